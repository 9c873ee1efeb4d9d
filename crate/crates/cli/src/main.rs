//! `salu` command-line runner.
//!
//! Every training subcommand resolves its settings in layers: module
//! defaults, then `--config <file.toml>`, then `--set key=value` overrides,
//! then dedicated flags. Unknown keys are usage errors. Logs go to standard
//! error; artifacts go to files, and reports or metrics to standard output.
//!
//! Exit status is 0 on success, 1 on a runtime failure and 2 on a usage
//! error. Failures print one JSON line `{"error": kind, "message": text}`
//! to standard error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use salu_core::corpus::{self, generate_dataset, DatasetSpec, Episode};
use salu_core::experiment::{self, ExperimentPlan, PlanResults};
use salu_core::metrics::{evaluate, sweep_table_markdown};
use salu_core::ppo::{train_ppo, PpoConfig, RewardSource};
use salu_core::reward::{shuffle_labels, train_reward_model, RewardConfig, RewardModel};
use salu_core::sft::{train_sft, SftConfig};
use salu_core::{checkpoint, seed, selftest, LanguageModel, ModelConfig, SaluError};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

const OUT_ENV: &str = "SALU_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "salu", version, about = "Answer-or-abstain language model pipeline")]
struct Cli {
    /// Worker threads for parallel evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML file with settings for this subcommand.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set sft.lr=1e-3` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug, Clone)]
struct OutArg {
    /// Output directory.
    #[arg(long, env = OUT_ENV, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset: <out> with all episodes plus .train/.val/.test splits.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        na_ratio: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write preference pairs for the train split with this many
        /// dispreferred responses per episode.
        #[arg(long)]
        pairs: Option<usize>,
        /// Output file; defaults to `$SALU_OUT_DIR/data.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Supervised fine-tuning on L_QA and L_NA.
    TrainSft {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Training episodes (JSONL).
        #[arg(long)]
        data: PathBuf,
        /// Validation episodes; defaults to the `.val` sibling of a `.train` file.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Initial policy checkpoint; a fresh model otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train the reward model on preference pairs.
    TrainReward {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Episodes the pairs refer to (JSONL).
        #[arg(long)]
        data: PathBuf,
        /// Preference pairs; synthesized from --data when absent.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Train on randomly flipped pair labels (control run).
        #[arg(long)]
        shuffle_labels: bool,
        /// SFT policy whose backbone initializes the scorer; a fresh model otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Confidence-shaped PPO starting from an SFT policy.
    TrainPpo {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// SFT policy checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Prompt episodes (JSONL).
        #[arg(long)]
        data: PathBuf,
        /// Learned reward model; the rule-based reward table otherwise.
        #[arg(long)]
        reward_model: Option<PathBuf>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        kl_coef: Option<f64>,
        #[arg(long)]
        lambda_abstain: Option<f64>,
        #[arg(long)]
        lambda_halluc: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Greedy-decode a dataset and print the metrics report as JSON.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// NA-ratio composition sweep; prints the table.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        n: Option<usize>,
        /// SFT steps per ratio.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Run an experiment plan and print the report.
    RunPlan {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run only these arms (repeatable).
        #[arg(long = "arm")]
        arms: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        na_ratio: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        /// SFT steps for every arm.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        kl_coef: Option<f64>,
        #[arg(long)]
        lambda_abstain: Option<f64>,
        #[arg(long)]
        lambda_halluc: Option<f64>,
        /// Output directory; overrides `out_dir` of the plan.
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
    },
    /// Rebuild the report of a finished plan run.
    Report {
        #[command(flatten)]
        out: OutArg,
    },
    /// Gradient checks and metric oracles.
    Selftest,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Run(SaluError),
}

impl From<SaluError> for CliError {
    fn from(e: SaluError) -> Self {
        Self::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Run(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataSettings {
    #[serde(default)]
    dataset: DatasetSpec,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SftSettings {
    #[serde(default)]
    sft: SftConfig,
    #[serde(default)]
    model: ModelConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RewardSettings {
    #[serde(default)]
    reward: RewardConfig,
    #[serde(default)]
    model: ModelConfig,
    /// Dispreferred responses per episode when pairs are synthesized.
    #[serde(default = "two")]
    negatives: usize,
}

fn two() -> usize {
    2
}

impl Default for RewardSettings {
    fn default() -> Self {
        Self {
            reward: RewardConfig::default(),
            model: ModelConfig::default(),
            negatives: two(),
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PpoSettings {
    #[serde(default)]
    ppo: PpoConfig,
}

/// Merges `src` into `dst`, recursing into tables.
fn merge(dst: &mut toml::Table, src: toml::Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

/// Sets a dotted `key`, creating intermediate tables.
fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> CliResult<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("malformed key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let next = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Defaults ← config file ← `--set` overrides ← `flags`, then a strict
/// deserialize that rejects unknown keys.
fn resolve<T>(cfg: &ConfigArgs, flags: &[(&str, Option<toml::Value>)]) -> CliResult<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let mut table = toml::Table::try_from(T::default())
        .map_err(|e| CliError::Run(SaluError::Config(e.to_string())))?;
    if let Some(path) = &cfg.config {
        let text = fs::read_to_string(path)?;
        let file: toml::Table = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        merge(&mut table, file);
    }
    for o in &cfg.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{o}` is not KEY=VALUE")))?;
        set_path(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            set_path(&mut table, k, v.clone())?;
        }
    }
    table
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(e.message().to_string()))
}

fn f(v: Option<f64>) -> Option<toml::Value> {
    v.map(toml::Value::Float)
}

fn u(v: Option<impl Into<u64>>) -> Option<toml::Value> {
    v.map(|x| toml::Value::Integer(x.into() as i64))
}

fn uz(v: Option<usize>) -> Option<toml::Value> {
    v.map(|x| toml::Value::Integer(x as i64))
}

fn load_policy(path: &Path) -> CliResult<LanguageModel> {
    Ok(LanguageModel::from_transformer(checkpoint::load(path)?)?)
}

fn sibling(path: &Path, from: &str, to: &str) -> Option<PathBuf> {
    let name = path.file_name()?.to_str()?;
    name.contains(from)
        .then(|| path.with_file_name(name.replacen(from, to, 1)))
}

fn split_paths(out: &Path) -> [PathBuf; 4] {
    let stem = out.with_extension("");
    let with = |s: &str| PathBuf::from(format!("{}.{s}.jsonl", stem.display()));
    [with("train"), with("val"), with("test"), with("pairs")]
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = toml::to_string(value).map_err(|e| CliError::Run(SaluError::Config(e.to_string())))?;
    fs::write(path, text)?;
    Ok(())
}

fn default_out() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn gen_data(
    cfg: &ConfigArgs,
    n: Option<usize>,
    na_ratio: Option<f64>,
    seed: Option<u64>,
    pairs: Option<usize>,
    out: Option<PathBuf>,
) -> CliResult<()> {
    let s: GenDataSettings = resolve(
        cfg,
        &[
            ("dataset.n_episodes", uz(n)),
            ("dataset.na_ratio", f(na_ratio)),
            ("dataset.seed", u(seed)),
        ],
    )?;
    let out = out.unwrap_or_else(|| default_out().join("data.jsonl"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let ds = generate_dataset(&s.dataset)?;
    corpus::save_episodes(&out, &ds.episodes)?;
    let [train, val, test, pair_path] = split_paths(&out);
    corpus::save_episodes(&train, &ds.train())?;
    corpus::save_episodes(&val, &ds.val())?;
    corpus::save_episodes(&test, &ds.test())?;
    if let Some(k) = pairs {
        let p = corpus::synthesize_preferences(&ds.train(), k, seed::derive(s.dataset.seed, &[0x9a]));
        corpus::save_pairs(&pair_path, &p)?;
        info!("wrote {} preference pairs to {}", p.len(), pair_path.display());
    }
    info!(
        "wrote {} episodes ({} unanswerable) to {}",
        ds.episodes.len(),
        s.dataset.n_unanswerable(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_sft_cmd(
    cfg: &ConfigArgs,
    data: &Path,
    val: Option<PathBuf>,
    model: Option<PathBuf>,
    alpha: Option<f64>,
    beta: Option<f64>,
    steps: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> CliResult<()> {
    let s: SftSettings = resolve(
        cfg,
        &[
            ("sft.alpha", f(alpha)),
            ("sft.beta", f(beta)),
            ("sft.max_steps", uz(steps)),
            ("sft.seed", u(seed)),
            ("model.seed", u(seed)),
        ],
    )?;
    let val = val
        .or_else(|| sibling(data, ".train.", ".val."))
        .ok_or_else(|| CliError::Usage("--val is required unless --data is a .train. file".into()))?;
    let train = corpus::load_episodes(data)?;
    let val = corpus::load_episodes(&val)?;
    let mut policy = match model {
        Some(p) => load_policy(&p)?,
        None => LanguageModel::new(s.model.clone())?,
    };
    fs::create_dir_all(out)?;
    let run = train_sft(&mut policy, &train, &val, &s.sft)?;
    checkpoint::save(policy.net(), &out.join("sft.ckpt"))?;
    run.write_loss_csv(&out.join("sft_loss.csv"))?;
    run.write_eval_csv(&out.join("sft_eval.csv"))?;
    write_toml(&out.join("config.toml"), &s)?;
    if let Some(best) = run.best_eval() {
        println!(
            "{}",
            serde_json::json!({
                "best_step": run.best_step,
                "steps_run": run.steps_run,
                "val_overall_accuracy": best.exact_target_match,
                "val_unanswerability_f1": best.unanswerability_f1,
            })
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_reward_cmd(
    cfg: &ConfigArgs,
    data: &Path,
    pairs: Option<PathBuf>,
    shuffle: bool,
    model: Option<PathBuf>,
    steps: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> CliResult<()> {
    let s: RewardSettings = resolve(
        cfg,
        &[
            ("reward.max_steps", uz(steps)),
            ("reward.seed", u(seed)),
            ("model.seed", u(seed)),
        ],
    )?;
    let episodes = corpus::load_episodes(data)?;
    let mut pairs = match pairs {
        Some(p) => corpus::load_pairs(&p)?,
        None => corpus::synthesize_preferences(&episodes, s.negatives, seed::derive(s.reward.seed, &[0x9a])),
    };
    if shuffle {
        pairs = shuffle_labels(&pairs, s.reward.seed);
    }
    let mut rm = match &model {
        Some(p) => RewardModel::from_policy(&load_policy(p)?)?,
        None => RewardModel::new(s.model.clone())?,
    };
    fs::create_dir_all(out)?;
    let run = train_reward_model(&mut rm, &episodes, &pairs, &s.reward)?;
    checkpoint::save(rm.net(), &out.join("reward.ckpt"))?;
    run.write_loss_csv(&out.join("reward_loss.csv"))?;
    write_toml(&out.join("config.toml"), &s)?;
    println!(
        "{}",
        serde_json::json!({
            "train_pairs": run.train_pairs,
            "heldout_pairs": run.heldout_pairs,
            "heldout_accuracy": run.heldout_accuracy,
            "shuffled_labels": shuffle,
        })
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_ppo_cmd(
    cfg: &ConfigArgs,
    model: &Path,
    data: &Path,
    reward_model: Option<PathBuf>,
    flags: [Option<f64>; 4],
    iters: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> CliResult<()> {
    let [epsilon, kl, la, lh] = flags;
    let mut flag_list = vec![
        ("ppo.clip_epsilon", f(epsilon)),
        ("ppo.kl_coef", f(kl)),
        ("ppo.lambda_abstain", f(la)),
        ("ppo.lambda_halluc", f(lh)),
        ("ppo.iterations", uz(iters)),
        ("ppo.seed", u(seed)),
    ];
    if reward_model.is_some() {
        flag_list.push(("ppo.reward_source", Some(toml::Value::String("learned".into()))));
    }
    let s: PpoSettings = resolve(cfg, &flag_list)?;
    let mut policy = load_policy(model)?;
    let episodes = corpus::load_episodes(data)?;
    let rm = match &reward_model {
        Some(p) => Some(RewardModel::from_transformer(checkpoint::load(p)?)?),
        None => None,
    };
    let source = match &rm {
        Some(rm) => RewardSource::Learned(rm),
        None => RewardSource::Rules(&s.ppo.reward_table),
    };
    fs::create_dir_all(out)?;
    let run = train_ppo(&mut policy, &episodes, source, &s.ppo)?;
    checkpoint::save(policy.net(), &out.join("policy.ckpt"))?;
    run.write_stats_csv(&out.join("ppo_stats.csv"))?;
    run.write_rollouts_csv(&out.join("rollouts.csv"))?;
    write_toml(&out.join("config.toml"), &s)?;
    if let Some(last) = run.stats.last() {
        println!("{}", serde_json::to_string(last).expect("stats serialize"));
    }
    Ok(())
}

fn eval_cmd(model: &Path, data: &Path) -> CliResult<()> {
    let policy = load_policy(model)?;
    let episodes: Vec<Episode> = corpus::load_episodes(data)?;
    let report = evaluate(&policy, &episodes, corpus::RESPONSE_BUDGET)?;
    println!("{}", report.to_json());
    Ok(())
}

fn plan_from(cfg: &ConfigArgs, flags: &[(&str, Option<toml::Value>)]) -> CliResult<ExperimentPlan> {
    let plan: ExperimentPlan = resolve(cfg, flags)?;
    plan.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(plan)
}

fn sweep_cmd(cfg: &ConfigArgs, n: Option<usize>, steps: Option<usize>, seed: Option<u64>, out: &Path) -> CliResult<()> {
    let mut plan = plan_from(
        cfg,
        &[
            ("dataset.n_episodes", uz(n)),
            ("master_seed", u(seed)),
        ],
    )?;
    let mut sweep = plan.sweep.clone().unwrap_or_default();
    if steps.is_some() {
        sweep.sft_steps = steps;
    }
    plan.sweep = Some(sweep);
    fs::create_dir_all(out)?;
    let cells = experiment::run_sweep(&plan)?;
    let results = PlanResults {
        arms: Vec::new(),
        sweep: Some(cells.clone()),
    };
    fs::write(out.join("sweep.json"), results.to_json())?;
    let md = sweep_table_markdown(&cells);
    fs::write(out.join("sweep.md"), &md)?;
    print!("{md}");
    if cells.iter().all(|c| c.scores.is_err()) {
        return Err(SaluError::Invalid("every sweep cell failed".into()).into());
    }
    Ok(())
}

fn report_cmd(out: &Path) -> CliResult<()> {
    let results = PlanResults::from_json(&fs::read_to_string(out.join("results.json"))?)?;
    let report = experiment::report(&results)?;
    experiment::write_report(out, &report)?;
    print!("{}", report.markdown);
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData {
            cfg,
            n,
            na_ratio,
            seed,
            pairs,
            out,
        } => gen_data(&cfg, n, na_ratio, seed, pairs, out),
        Command::TrainSft {
            cfg,
            data,
            val,
            model,
            alpha,
            beta,
            steps,
            seed,
            out,
        } => train_sft_cmd(&cfg, &data, val, model, alpha, beta, steps, seed, &out.out),
        Command::TrainReward {
            cfg,
            data,
            pairs,
            shuffle_labels,
            model,
            steps,
            seed,
            out,
        } => train_reward_cmd(&cfg, &data, pairs, shuffle_labels, model, steps, seed, &out.out),
        Command::TrainPpo {
            cfg,
            model,
            data,
            reward_model,
            epsilon,
            kl_coef,
            lambda_abstain,
            lambda_halluc,
            iters,
            seed,
            out,
        } => train_ppo_cmd(
            &cfg,
            &model,
            &data,
            reward_model,
            [epsilon, kl_coef, lambda_abstain, lambda_halluc],
            iters,
            seed,
            &out.out,
        ),
        Command::Eval { model, data } => eval_cmd(&model, &data),
        Command::Sweep {
            cfg,
            n,
            steps,
            seed,
            out,
        } => sweep_cmd(&cfg, n, steps, seed, &out.out),
        Command::RunPlan {
            cfg,
            arms,
            seed,
            n,
            na_ratio,
            alpha,
            beta,
            steps,
            iters,
            epsilon,
            kl_coef,
            lambda_abstain,
            lambda_halluc,
            out,
        } => {
            let out = out.map(|p| toml::Value::String(p.display().to_string()));
            let mut plan = plan_from(
                &cfg,
                &[
                    ("master_seed", u(seed)),
                    ("out_dir", out),
                    ("dataset.n_episodes", uz(n)),
                    ("dataset.na_ratio", f(na_ratio)),
                    ("sft.alpha", f(alpha)),
                    ("sft.beta", f(beta)),
                    ("sft.max_steps", uz(steps)),
                    ("ppo.iterations", uz(iters)),
                    ("ppo.clip_epsilon", f(epsilon)),
                    ("ppo.kl_coef", f(kl_coef)),
                    ("ppo.lambda_abstain", f(lambda_abstain)),
                    ("ppo.lambda_halluc", f(lambda_halluc)),
                ],
            )?;
            if steps.is_some() {
                for arm in &mut plan.arms {
                    arm.sft_steps = steps;
                }
            }
            let only = (!arms.is_empty()).then_some(arms.as_slice());
            if let Some(names) = only {
                if let Some(bad) = names.iter().find(|n| !plan.arms.iter().any(|a| &a.name == *n)) {
                    return Err(CliError::Usage(format!("plan has no arm `{bad}`")));
                }
            }
            let results = experiment::run_plan_arms(&plan, only)?;
            let report = experiment::report(&results)?;
            print!("{}", report.markdown);
            Ok(())
        }
        Command::Report { out } => report_cmd(&out.out),
        Command::Selftest => {
            let checks = selftest::run_all();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(SaluError::Invalid(format!("{failed} of {} self-checks failed", checks.len())).into());
            }
            Ok(())
        }
    }
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .try_init();
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.verbose, cli.quiet);
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("{}", error_line("usage", "--threads must be at least 1"));
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", error_line("threads", &e.to_string()));
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("{}", error_line("usage", &m));
            ExitCode::from(2)
        }
        Err(CliError::Run(e)) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::from(1)
        }
    }
}
