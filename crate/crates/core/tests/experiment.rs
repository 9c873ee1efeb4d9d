use std::fs;
use std::path::Path;

use salu_core::experiment::{self, ExperimentPlan, PlanResults};

const TINY: &str = r#"
master_seed = 3

[dataset]
n_episodes = 200

[model]
n_layers = 1
d_model = 16
n_heads = 2
ffn_dim = 32

[sft]
max_steps = 30
eval_every = 10
batch_size = 16
lr = 1e-2

[reward]
max_steps = 6
batch_size = 8

[ppo]
iterations = 2
rollout_batch = 8
reward_source = "learned"

[[arms]]
name = "qa_only"
beta = 0.0
[[arms]]
name = "salu_sft"
[[arms]]
name = "salu_rlhf"
rlhf = true
"#;

fn tiny_plan(out: &Path) -> ExperimentPlan {
    let mut plan = ExperimentPlan::from_toml(TINY).unwrap();
    plan.out_dir = out.to_path_buf();
    plan
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn plan_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    experiment::run_plan(&tiny_plan(&a)).unwrap();
    experiment::run_plan(&tiny_plan(&b)).unwrap();
    for f in [
        "comparison.csv",
        "report.md",
        "results.json",
        "qa_only/sft.ckpt",
        "salu_sft/policy.ckpt",
        "salu_rlhf/ppo.ckpt",
        "salu_rlhf/rollouts.csv",
        "salu_rlhf/reward.ckpt",
    ] {
        assert_eq!(read(&a, f), read(&b, f), "{f} differs");
    }
}

#[test]
fn single_arm_matches_full_plan_and_report_regenerates() {
    let tmp = tempfile::tempdir().unwrap();
    let (full, one) = (tmp.path().join("full"), tmp.path().join("one"));
    let full_results = experiment::run_plan(&tiny_plan(&full)).unwrap();
    let only = vec!["salu_rlhf".to_string()];
    let one_results = experiment::run_plan_arms(&tiny_plan(&one), Some(&only)).unwrap();
    let pick = |r: &PlanResults| r.arms.iter().find(|a| a.name == "salu_rlhf").cloned().unwrap();
    assert_eq!(pick(&full_results), pick(&one_results));

    let back = PlanResults::from_json(&fs::read_to_string(full.join("results.json")).unwrap()).unwrap();
    assert_eq!(back, full_results);
    let rebuilt = experiment::report(&back).unwrap();
    assert_eq!(rebuilt.markdown.as_bytes(), read(&full, "report.md"));
    assert_eq!(rebuilt.comparison_csv.as_bytes(), read(&full, "comparison.csv"));
}

#[test]
fn different_master_seeds_differ() {
    let tmp = tempfile::tempdir().unwrap();
    let mut p = tiny_plan(&tmp.path().join("x"));
    p.arms.truncate(1);
    let a = experiment::run_plan(&p).unwrap();
    p.master_seed = 4;
    p.out_dir = tmp.path().join("y");
    experiment::run_plan(&p).unwrap();
    assert_eq!(a.arms.len(), 1);
    assert_ne!(
        fs::read(tmp.path().join("x/qa_only/sft.ckpt")).unwrap(),
        fs::read(tmp.path().join("y/qa_only/sft.ckpt")).unwrap()
    );
}
