//! Ablation arms, the NA-ratio sweep and the consolidated report.
//!
//! A plan is a TOML file. Every table is optional and falls back to the
//! defaults of its owning module:
//!
//! ```toml
//! master_seed = 0
//! out_dir = "runs/plan"
//! preference_negatives = 2
//!
//! [dataset]   # DatasetSpec
//! n_episodes = 2560
//! [model]     # ModelConfig
//! [sft]       # SftConfig
//! [reward]    # RewardConfig; drives PPO when ppo.reward_source = "learned"
//! [ppo]       # PpoConfig
//!
//! [[arms]]
//! name = "qa_only"
//! beta = 0.0
//! sft_steps = 800
//! [[arms]]
//! name = "salu_sft"
//! sft_steps = 800
//! [[arms]]
//! name = "salu_rlhf"
//! sft_steps = 800
//! rlhf = true
//!
//! [sweep]     # omit to skip
//! ratios = [0.2, 0.3, 0.5, 0.7]
//! ```
//!
//! The `seed` fields of the sub-tables are ignored: every seed derives from
//! `master_seed` and a label. The dataset, reward model and PPO stage use
//! fixed labels or the arm name. The SFT stage is labeled by its own
//! settings, so arms with identical SFT settings share one SFT model, and
//! no result depends on which other arms run or in what order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::{error, info};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::{generate_dataset, synthesize_preferences, DatasetSpec, Episode, RESPONSE_BUDGET};
use crate::error::{Result, SaluError};
use crate::metrics::{
    cell, composition_sweep, evaluate, sweep_table_markdown, MetricsReport, SweepCell,
    MAIN_TABLE_HEADER, SWEEP_RATIOS, SWEEP_TABLE_HEADER,
};
use crate::model::{LanguageModel, ModelConfig};
use crate::ppo::{train_ppo, PpoConfig, RewardSource, RewardSourceKind};
use crate::reward::{train_reward_model, RewardConfig, RewardModel, RewardRun};
use crate::seed;
use crate::sft::{train_sft, SftConfig, SftRun};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    /// Unique; also the output subdirectory.
    pub name: String,
    /// Row label in the tables; defaults to `name`.
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub sft_steps: Option<usize>,
    /// Run the PPO stage after SFT.
    #[serde(default)]
    pub rlhf: bool,
    #[serde(default)]
    pub ppo_iterations: Option<usize>,
}

impl ArmSpec {
    pub fn label(&self) -> &str {
        self.label.as_deref().unwrap_or(&self.name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "default_ratios")]
    pub ratios: Vec<f64>,
    /// SFT step budget per ratio; defaults to `sft.max_steps`.
    #[serde(default)]
    pub sft_steps: Option<usize>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            ratios: default_ratios(),
            sft_steps: None,
        }
    }
}

fn default_ratios() -> Vec<f64> {
    SWEEP_RATIOS.to_vec()
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/plan")
}

fn default_negatives() -> usize {
    2
}

/// SFT step budget of the default ablation arms.
pub const ABLATION_SFT_STEPS: usize = 800;

/// The three ablation arms: QA-only SFT, SALU SFT, SALU SFT followed by PPO,
/// all with an SFT budget of [`ABLATION_SFT_STEPS`].
pub fn default_arms() -> Vec<ArmSpec> {
    let arm = |name: &str, label: &str| ArmSpec {
        name: name.into(),
        label: Some(label.into()),
        alpha: None,
        beta: None,
        sft_steps: Some(ABLATION_SFT_STEPS),
        rlhf: false,
        ppo_iterations: None,
    };
    vec![
        ArmSpec {
            beta: Some(0.0),
            ..arm("qa_only", "QA-only SFT")
        },
        arm("salu_sft", "SALU without RLHF"),
        ArmSpec {
            rlhf: true,
            ..arm("salu_rlhf", "SALU with RLHF")
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub sft: SftConfig,
    #[serde(default)]
    pub reward: RewardConfig,
    /// Dispreferred responses per episode for reward-model training.
    #[serde(default = "default_negatives")]
    pub preference_negatives: usize,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default = "default_arms")]
    pub arms: Vec<ArmSpec>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            master_seed: 0,
            out_dir: default_out_dir(),
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            sft: SftConfig::default(),
            reward: RewardConfig::default(),
            preference_negatives: default_negatives(),
            ppo: PpoConfig::default(),
            arms: default_arms(),
            sweep: None,
        }
    }
}

impl ExperimentPlan {
    pub fn from_toml(text: &str) -> Result<Self> {
        let plan: Self = toml::from_str(text).map_err(|e| SaluError::Config(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SaluError::Config(m));
        if self.arms.is_empty() {
            return bad("plan has no arms".into());
        }
        let mut seen = BTreeSet::new();
        for arm in &self.arms {
            let ok = !arm.name.is_empty()
                && arm
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !ok {
                return bad(format!(
                    "arm name `{}` must be non-empty ASCII letters, digits, `_` or `-`",
                    arm.name
                ));
            }
            if !seen.insert(arm.name.as_str()) {
                return bad(format!("duplicate arm name `{}`", arm.name));
            }
            self.sft_config(arm).validate()?;
            if arm.rlhf {
                self.ppo_config(arm).validate()?;
            }
        }
        if let Some(sweep) = &self.sweep {
            if sweep.ratios.is_empty() {
                return bad("sweep needs at least one ratio".into());
            }
            if let Some(r) = sweep.ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
                return bad(format!("sweep ratio {r} outside [0, 1]"));
            }
        }
        self.model.validate()?;
        self.reward.validate()?;
        self.dataset_spec()
            .validate(self.model.max_seq_len, RESPONSE_BUDGET)
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: seed::derive_str(self.master_seed, "dataset"),
            ..self.dataset.clone()
        }
    }

    /// SFT settings of `arm` with its settings-derived seed.
    pub fn sft_config(&self, arm: &ArmSpec) -> SftConfig {
        let mut cfg = SftConfig {
            seed: 0,
            ..self.sft.clone()
        };
        if let Some(a) = arm.alpha {
            cfg.alpha = a;
        }
        if let Some(b) = arm.beta {
            cfg.beta = b;
        }
        if let Some(s) = arm.sft_steps {
            cfg.max_steps = s;
        }
        cfg.seed = seed::derive_str(self.master_seed, &sft_label(&cfg));
        cfg
    }

    pub fn ppo_config(&self, arm: &ArmSpec) -> PpoConfig {
        let mut cfg = PpoConfig {
            seed: seed::derive_str(self.master_seed, &format!("ppo/{}", arm.name)),
            ..self.ppo.clone()
        };
        if let Some(n) = arm.ppo_iterations {
            cfg.iterations = n;
        }
        cfg
    }

    fn model_config(&self, sft_seed: u64) -> ModelConfig {
        ModelConfig {
            seed: seed::derive(sft_seed, &[0x1e7]),
            ..self.model.clone()
        }
    }
}

/// Seed label of an SFT stage; `cfg.seed` must be 0.
fn sft_label(cfg: &SftConfig) -> String {
    format!(
        "sft/{}",
        serde_json::to_string(cfg).expect("sft config serializes")
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmOutcome {
    pub name: String,
    pub label: String,
    /// Test-set metrics, or the error that stopped the arm.
    pub report: std::result::Result<MetricsReport, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanResults {
    pub arms: Vec<ArmOutcome>,
    pub sweep: Option<Vec<SweepCell>>,
}

impl PlanResults {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("results serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SaluError::Parse {
            line: e.line(),
            reason: e.to_string(),
        })
    }
}

/// Trained stages shared between arms of one run.
#[derive(Default)]
struct StageCache {
    sft: BTreeMap<String, (LanguageModel, SftRun)>,
    /// Keyed like `sft`; each reward model starts from that SFT policy.
    reward: BTreeMap<String, (RewardModel, RewardRun)>,
}

/// Runs every arm in declared order, then the sweep if requested, and
/// writes all artifacts plus the report under `plan.out_dir`.
pub fn run_plan(plan: &ExperimentPlan) -> Result<PlanResults> {
    run_plan_arms(plan, None)
}

/// [`run_plan`] restricted to the named arms (all arms when `only` is
/// `None`). Results of the selected arms are identical to a full run.
pub fn run_plan_arms(plan: &ExperimentPlan, only: Option<&[String]>) -> Result<PlanResults> {
    plan.validate()?;
    if let Some(names) = only {
        if let Some(n) = names.iter().find(|n| !plan.arms.iter().any(|a| &a.name == *n)) {
            return Err(SaluError::Config(format!("plan has no arm `{n}`")));
        }
    }
    fs::create_dir_all(&plan.out_dir)?;
    fs::write(plan.out_dir.join("plan.toml"), plan.to_toml())?;
    let started = Instant::now();
    let dataset = generate_dataset(&plan.dataset_spec())?;
    let (train, val, test) = (dataset.train(), dataset.val(), dataset.test());
    info!(
        "dataset: {} train / {} val / {} test episodes",
        train.len(),
        val.len(),
        test.len()
    );

    let mut cache = StageCache::default();
    let mut results = PlanResults::default();
    let mut timings = BTreeMap::new();
    for arm in &plan.arms {
        if only.is_some_and(|names| !names.contains(&arm.name)) {
            continue;
        }
        let t = Instant::now();
        info!("arm {}: start", arm.name);
        let report = run_arm(plan, arm, &train, &val, &test, &mut cache).map_err(|e| {
            error!("arm {} failed: {e}", arm.name);
            e.to_string()
        });
        timings.insert(arm.name.clone(), t.elapsed().as_secs_f64());
        results.arms.push(ArmOutcome {
            name: arm.name.clone(),
            label: arm.label().to_string(),
            report,
        });
    }

    if plan.sweep.is_some() {
        let t = Instant::now();
        results.sweep = Some(run_sweep(plan)?);
        timings.insert("sweep".into(), t.elapsed().as_secs_f64());
    }

    fs::write(plan.out_dir.join("results.json"), results.to_json())?;
    if results.arms.iter().any(|a| a.report.is_ok()) {
        write_report(&plan.out_dir, &report(&results)?)?;
    }
    let meta = serde_json::json!({
        "finished_unix": SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        "elapsed_seconds": started.elapsed().as_secs_f64(),
        "stage_seconds": timings,
    });
    fs::write(
        plan.out_dir.join("run_meta.json"),
        serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )?;
    Ok(results)
}

fn run_arm(
    plan: &ExperimentPlan,
    arm: &ArmSpec,
    train: &[Episode],
    val: &[Episode],
    test: &[Episode],
    cache: &mut StageCache,
) -> Result<MetricsReport> {
    let dir = plan.out_dir.join(&arm.name);
    fs::create_dir_all(&dir)?;

    let sft_cfg = plan.sft_config(arm);
    let key = sft_label(&SftConfig {
        seed: 0,
        ..sft_cfg.clone()
    });
    if !cache.sft.contains_key(&key) {
        let mut model = LanguageModel::new(plan.model_config(sft_cfg.seed))?;
        let run = train_sft(&mut model, train, val, &sft_cfg)?;
        cache.sft.insert(key.clone(), (model, run));
    } else {
        info!("arm {}: reusing SFT stage with identical settings", arm.name);
    }
    let (sft_model, sft_run) = &cache.sft[&key];
    let mut policy = sft_model.clone();
    checkpoint::save(policy.net(), &dir.join("sft.ckpt"))?;
    sft_run.write_loss_csv(&dir.join("sft_loss.csv"))?;
    sft_run.write_eval_csv(&dir.join("sft_eval.csv"))?;

    let mut config = serde_json::json!({ "arm": arm, "sft": sft_cfg, "model": policy.config() });
    if arm.rlhf {
        let ppo_cfg = plan.ppo_config(arm);
        let (rm, rm_run) = reward_stage(plan, train, &key, cache)?;
        checkpoint::save(rm.net(), &dir.join("reward.ckpt"))?;
        fs::write(
            dir.join("reward_run.json"),
            serde_json::to_string_pretty(rm_run).expect("reward run serializes"),
        )?;
        let source = match ppo_cfg.reward_source {
            RewardSourceKind::Rules => RewardSource::Rules(&ppo_cfg.reward_table),
            RewardSourceKind::Learned => RewardSource::Learned(rm),
        };
        let run = train_ppo(&mut policy, train, source, &ppo_cfg)?;
        run.write_stats_csv(&dir.join("ppo_stats.csv"))?;
        run.write_rollouts_csv(&dir.join("rollouts.csv"))?;
        checkpoint::save(policy.net(), &dir.join("ppo.ckpt"))?;
        config["ppo"] = serde_json::to_value(&ppo_cfg).expect("ppo config serializes");
    }
    checkpoint::save(policy.net(), &dir.join("policy.ckpt"))?;

    let report = evaluate(&policy, test, RESPONSE_BUDGET)?.with_config(config);
    fs::write(dir.join("metrics.json"), report.to_json())?;
    info!(
        "arm {}: overall accuracy {:.3}, hallucination rate {:?}",
        arm.name, report.overall_accuracy, report.hallucination_rate
    );
    Ok(report)
}

fn reward_stage<'c>(
    plan: &ExperimentPlan,
    train: &[Episode],
    sft_key: &str,
    cache: &'c mut StageCache,
) -> Result<&'c (RewardModel, RewardRun)> {
    if !cache.reward.contains_key(sft_key) {
        let s = seed::derive_str(plan.master_seed, "reward");
        let pairs = synthesize_preferences(train, plan.preference_negatives, seed::derive(s, &[1]));
        let mut rm = RewardModel::from_policy(&cache.sft[sft_key].0)?;
        let cfg = RewardConfig {
            seed: s,
            ..plan.reward.clone()
        };
        let run = train_reward_model(&mut rm, train, &pairs, &cfg)?;
        info!("reward model held-out pair accuracy {:.3}", run.heldout_accuracy);
        cache.reward.insert(sft_key.to_string(), (rm, run));
    }
    Ok(&cache.reward[sft_key])
}

/// Test set shared by every sweep cell: the test split of a dedicated
/// balanced dataset.
pub fn sweep_test_set(plan: &ExperimentPlan) -> Result<Vec<Episode>> {
    let spec = DatasetSpec {
        na_ratio: 0.5,
        seed: seed::derive_str(plan.master_seed, "sweep/test"),
        ..plan.dataset.clone()
    };
    Ok(generate_dataset(&spec)?.test())
}

/// Composition sweep with `plan.sweep` settings (defaults when absent).
/// Each cell trains a fresh model with the plan's SFT settings.
pub fn run_sweep(plan: &ExperimentPlan) -> Result<Vec<SweepCell>> {
    let sweep = plan.sweep.clone().unwrap_or_default();
    let test = sweep_test_set(plan)?;
    let base = DatasetSpec {
        seed: seed::derive_str(plan.master_seed, "sweep/train"),
        ..plan.dataset.clone()
    };
    let mut cfg = SftConfig {
        seed: 0,
        ..plan.sft.clone()
    };
    if let Some(s) = sweep.sft_steps {
        cfg.max_steps = s;
    }
    cfg.seed = seed::derive_str(plan.master_seed, &format!("sweep/{}", sft_label(&cfg)));
    let model_cfg = plan.model_config(cfg.seed);
    let cells = composition_sweep(&base, &sweep.ratios, &test, RESPONSE_BUDGET, |ratio, tr, va| {
        info!("sweep: na_ratio {ratio}");
        let mut model = LanguageModel::new(model_cfg.clone())?;
        train_sft(&mut model, tr, va, &cfg)?;
        Ok(model)
    })?;
    Ok(cells)
}

/// Rendered report artifacts.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub markdown: String,
    /// Main-results table plus hallucination rate, one row per arm.
    pub comparison_csv: String,
    pub sweep_csv: Option<String>,
}

const MISSING: &str = "n/a";

/// Builds the tables from successful arms; failed arms are listed below
/// them. Rejects results without any successful arm.
pub fn report(results: &PlanResults) -> Result<Report> {
    let ok: Vec<(&ArmOutcome, &MetricsReport)> = results
        .arms
        .iter()
        .filter_map(|a| a.report.as_ref().ok().map(|r| (a, r)))
        .collect();
    if ok.is_empty() {
        return Err(SaluError::Invalid("report needs at least one successful arm".into()));
    }

    let mut md = String::new();
    let _ = writeln!(md, "# Results\n\n## Main results (test set)\n");
    let _ = writeln!(md, "| Method | {} |", MAIN_TABLE_HEADER.join(" | "));
    let _ = writeln!(md, "|---{}|", "|---:".repeat(MAIN_TABLE_HEADER.len()));
    let mut csv = format!(
        "arm,{},hallucination_rate\n",
        MAIN_TABLE_HEADER
            .iter()
            .map(|h| h.to_lowercase().replace([' ', '.'], "_").trim_end_matches('_').to_string())
            .collect::<Vec<_>>()
            .join(",")
    );
    let mut flagged = false;
    for (arm, r) in &ok {
        let cells: Vec<String> = r.main_row().iter().map(|&v| cell(v)).collect();
        let marked: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let name = ["", "unanswerability.precision", "unanswerability.recall", "", "answerable_f1", ""][i];
                if !name.is_empty() && r.degenerate.iter().any(|d| d == name) {
                    flagged = true;
                    format!("{c}†")
                } else {
                    c.clone()
                }
            })
            .collect();
        let _ = writeln!(md, "| {} | {} |", arm.label, marked.join(" | "));
        let halluc = r.hallucination_rate.map(cell).unwrap_or_else(|| MISSING.into());
        let _ = writeln!(csv, "{},{},{halluc}", arm.name, cells.join(","));
    }
    if flagged {
        let _ = writeln!(md, "\n† computed from a zero denominator and reported as 0.");
    }

    let _ = writeln!(md, "\n## Hallucination rate on unanswerable test questions\n");
    let _ = writeln!(md, "| Method | Hallucination Rate |\n|---|---:|");
    for (arm, r) in &ok {
        let halluc = r.hallucination_rate.map(cell).unwrap_or_else(|| MISSING.into());
        let _ = writeln!(md, "| {} | {halluc} |", arm.label);
    }

    let sweep_csv = results.sweep.as_ref().map(|cells| {
        let _ = writeln!(md, "\n## Training data composition\n");
        md.push_str(&sweep_table_markdown(cells));
        let mut s = format!(
            "{}\n",
            SWEEP_TABLE_HEADER
                .iter()
                .map(|h| h.to_lowercase().replace(' ', "_"))
                .collect::<Vec<_>>()
                .join(",")
        );
        for c in cells {
            match &c.scores {
                Ok(v) => {
                    let _ = writeln!(
                        s,
                        "{},{},{},{}",
                        cell(c.na_ratio),
                        cell(v.unanswerability_f1),
                        cell(v.answerable_f1),
                        cell(v.overall_accuracy)
                    );
                }
                Err(_) => {
                    let _ = writeln!(s, "{},error,error,error", cell(c.na_ratio));
                }
            }
        }
        s
    });

    let failed: Vec<&ArmOutcome> = results.arms.iter().filter(|a| a.report.is_err()).collect();
    if !failed.is_empty() {
        let _ = writeln!(md, "\n## Failed arms\n");
        for a in failed {
            if let Err(e) = &a.report {
                let _ = writeln!(md, "- {}: {e}", a.name);
            }
        }
    }
    Ok(Report {
        markdown: md,
        comparison_csv: csv,
        sweep_csv,
    })
}

pub fn write_report(dir: &Path, report: &Report) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.md"), &report.markdown)?;
    fs::write(dir.join("comparison.csv"), &report.comparison_csv)?;
    if let Some(s) = &report.sweep_csv {
        fs::write(dir.join("sweep.csv"), s)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plan_round_trips_through_toml() {
        let plan = ExperimentPlan::default();
        let back = ExperimentPlan::from_toml(&plan.to_toml()).unwrap();
        assert_eq!(plan, back);
    }

    #[test]
    fn unknown_keys_and_duplicate_arms_rejected() {
        assert!(ExperimentPlan::from_toml("bogus = 1").is_err());
        let dup = "[[arms]]\nname = \"a\"\n[[arms]]\nname = \"a\"\n";
        assert!(ExperimentPlan::from_toml(dup).is_err());
        assert!(ExperimentPlan::from_toml("[[arms]]\nname = \"a/b\"\n").is_err());
    }

    #[test]
    fn arms_with_equal_sft_settings_share_the_sft_seed() {
        let plan = ExperimentPlan::default();
        let [qa, sft, rlhf] = &plan.arms[..] else { panic!() };
        assert_eq!(plan.sft_config(sft).seed, plan.sft_config(rlhf).seed);
        assert_ne!(plan.sft_config(qa).seed, plan.sft_config(sft).seed);
        assert_eq!(plan.sft_config(qa).beta, 0.0);
        assert_ne!(plan.ppo_config(sft).seed, plan.ppo_config(rlhf).seed);
    }

    #[test]
    fn empty_results_rejected() {
        assert!(report(&PlanResults::default()).is_err());
        let failed = PlanResults {
            arms: vec![ArmOutcome {
                name: "a".into(),
                label: "a".into(),
                report: Err("boom".into()),
            }],
            sweep: None,
        };
        assert!(report(&failed).is_err());
    }
}
