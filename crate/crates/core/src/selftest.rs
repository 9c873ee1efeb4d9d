//! Built-in gradient checks, analytic oracles and metric oracles.
//!
//! Every loss is checked against central finite differences on a model with
//! large random weights, so attention is sharp and no head is zero.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use salu_autodiff::gradcheck::{check_params, GradCheckReport, FD_STEP};
use salu_autodiff::{ParamGrads, ParamId, ParamStore};

use crate::corpus::{generate_dataset, synthesize_preferences, DatasetSpec, Episode};
use crate::error::Result;
use crate::metrics::{hallucination_rate, overall_accuracy, token_f1, unanswerability_prf, Outcome};
use crate::model::{HeadKind, LanguageModel, ModelConfig, Transformer};
use crate::ppo::{clipped_term, ppo_gradients, ppo_loss, score_rollout, PpoConfig, PpoTarget, RewardSource, Rollout};
use crate::reward::{preference_gradients, preference_loss_value, RewardModel};
use crate::seed;
use crate::sft::{loss_qa, loss_sft, sft_gradients};
use crate::vocab::{value, TokenId, EOS, NA, VOCAB_SIZE};

/// Tolerance for every loss except the PPO objective.
pub const GRAD_TOL: f64 = 1e-4;
/// The clipped objective has kinks; checked away from them at a looser
/// tolerance.
pub const PPO_GRAD_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }

    fn from_grad(name: &str, r: Result<GradCheckReport>, tol: f64) -> Self {
        match r {
            Ok(rep) => Self::new(
                name,
                rep.passes(tol),
                format!("{} entries, max rel err {:.2e} (tol {tol:.0e})", rep.checked, rep.max_rel_error),
            ),
            Err(e) => Self::new(name, false, e.to_string()),
        }
    }
}

/// Adds `N(0, std)` noise to every parameter.
pub fn jitter(store: &mut ParamStore, std: f64, seed_value: u64) {
    let mut rng = seed::rng(seed_value);
    let n = Normal::new(0.0, std).expect("valid std");
    let ids: Vec<ParamId> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for x in store.get_mut(id).data_mut() {
            *x += n.sample(&mut rng);
        }
    }
}

/// First, middle and last entry of every parameter tensor.
pub fn spot_entries(store: &ParamStore) -> Vec<(ParamId, usize)> {
    let mut out = Vec::new();
    for (id, _, t) in store.iter() {
        let n = t.numel();
        for j in [0, n / 2, n - 1] {
            if !out.contains(&(id, j)) {
                out.push((id, j));
            }
        }
    }
    out
}

/// Fresh policy with a zeroed output head, so every next-token
/// distribution is uniform.
pub fn uniform_policy() -> Result<LanguageModel> {
    let mut m = LanguageModel::new(ModelConfig::default())?;
    let (w, b) = m.net().lm_head_ids().expect("policy has a language-model head");
    for id in [w, b] {
        m.params_mut().get_mut(id).data_mut().fill(0.0);
    }
    Ok(m)
}

/// [`uniform_policy`] with a head bias so large that `token` has
/// probability exactly 1 in `f64` at every position.
pub fn certain_policy(token: TokenId) -> Result<LanguageModel> {
    let mut m = uniform_policy()?;
    let (_, b) = m.net().lm_head_ids().expect("policy has a language-model head");
    m.params_mut().get_mut(b).data_mut()[token] = 1e6;
    Ok(m)
}

fn rough_policy(seed_value: u64) -> Result<LanguageModel> {
    let mut m = LanguageModel::new(ModelConfig {
        seed: seed_value,
        ..ModelConfig::default()
    })?;
    jitter(m.params_mut(), 0.3, seed_value ^ 0x9e37);
    Ok(m)
}

/// [`check_params`] over [`spot_entries`] with a fallible loss; the first
/// loss error aborts the check.
pub fn check_store<F>(store: &ParamStore, grads: &ParamGrads, mut eval: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut work = store.clone();
    let entries = spot_entries(&work);
    let mut failure = None;
    let report = check_params(&mut work, grads, &entries, FD_STEP, |s| {
        Ok(eval(s).unwrap_or_else(|e| {
            failure.get_or_insert(e);
            f64::NAN
        }))
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

fn check_model<F>(model: &LanguageModel, grads: &ParamGrads, eval: F) -> Result<GradCheckReport>
where
    F: Fn(&LanguageModel) -> Result<f64>,
{
    let mut probe = model.clone();
    check_store(model.params(), grads, |s| {
        *probe.params_mut() = s.clone();
        eval(&probe)
    })
}

fn small_episodes() -> Result<(Episode, Episode)> {
    let ds = generate_dataset(&DatasetSpec {
        n_episodes: 20,
        seed: 11,
        ..DatasetSpec::default()
    })?;
    let a = ds.episodes.iter().find(|e| e.is_answerable()).cloned();
    let u = ds.episodes.iter().find(|e| !e.is_answerable()).cloned();
    Ok((a.expect("answerable episode"), u.expect("unanswerable episode")))
}

fn sft_check(name: &str, model: &LanguageModel, batch: &[&Episode], alpha: f64, beta: f64) -> Check {
    let r = sft_gradients(model, batch, alpha, beta)
        .and_then(|(_, g)| check_model(model, &g, |m| Ok(loss_sft(m, batch, alpha, beta)?.total)));
    Check::from_grad(name, r, GRAD_TOL)
}

fn preference_check(a: &Episode, u: &Episode) -> Check {
    let r = (|| {
        let mut net = Transformer::new(
            ModelConfig {
                seed: 5,
                ..ModelConfig::default()
            },
            HeadKind::Reward,
        )?;
        jitter(net.params_mut(), 0.3, 17);
        let rm = RewardModel::from_transformer(net)?;
        let eps = [a.clone(), u.clone()];
        let pairs = synthesize_preferences(&eps, 1, 3);
        let by_id: BTreeMap<u64, &Episode> = eps.iter().map(|e| (e.id, e)).collect();
        let batch: Vec<_> = pairs.iter().collect();
        let (_, grads) = preference_gradients(&rm, &by_id, &batch)?;
        check_store(rm.net().params(), &grads, |s| {
            let net = Transformer::from_params(rm.config().clone(), HeadKind::Reward, s.clone())?;
            let probe = RewardModel::from_transformer(net)?;
            Ok(preference_gradients(&probe, &by_id, &batch)?.0)
        })
    })();
    Check::from_grad("gradient: preference loss", r, GRAD_TOL)
}

/// Two rollouts scored by a snapshot, evaluated under a slightly moved
/// policy whose ratios stay well inside the clip band.
fn ppo_fixture(a: &Episode, u: &Episode) -> Result<(LanguageModel, Vec<Rollout>, PpoConfig)> {
    let cfg = PpoConfig::default();
    let snapshot = rough_policy(23)?;
    let table = cfg.reward_table;
    let batch = vec![
        score_rollout(&snapshot, a, 0, a.target(), RewardSource::Rules(&table), &cfg)?,
        score_rollout(&snapshot, u, 1, vec![value(3), EOS], RewardSource::Rules(&table), &cfg)?,
    ];
    let mut policy = snapshot;
    for attempt in 0..20u64 {
        let mut moved = policy.clone();
        jitter(moved.params_mut(), 0.002, 31 + attempt);
        let inside = batch.iter().all(|r| {
            moved
                .sequence_log_prob(&r.prompt, &r.response)
                .map(|lp| ((lp - r.old_log_prob).exp() - 1.0).abs() < cfg.clip_epsilon / 2.0)
                .unwrap_or(false)
        });
        let moved_away = batch.iter().all(|r| {
            moved
                .sequence_log_prob(&r.prompt, &r.response)
                .map(|lp| (lp - r.old_log_prob).abs() > 1e-4)
                .unwrap_or(false)
        });
        if inside && moved_away {
            policy = moved;
            break;
        }
    }
    Ok((policy, batch, cfg))
}

fn ppo_checks(a: &Episode, u: &Episode) -> Vec<Check> {
    let fixture = ppo_fixture(a, u);
    let run = |target: PpoTarget| -> Result<GradCheckReport> {
        let (policy, batch, cfg) = fixture.as_ref().map_err(|e| crate::SaluError::Invalid(e.to_string()))?;
        let (_, grads) = ppo_gradients(policy, batch, cfg, target)?;
        check_model(policy, &grads, |m| {
            let l = ppo_loss(m, batch, cfg)?;
            Ok(match target {
                PpoTarget::Objective => l.objective,
                PpoTarget::ValueLoss => l.value_loss,
                PpoTarget::Total => l.total,
            })
        })
    };
    vec![
        Check::from_grad("gradient: PPO objective", run(PpoTarget::Objective), PPO_GRAD_TOL),
        Check::from_grad("gradient: value loss", run(PpoTarget::ValueLoss), GRAD_TOL),
    ]
}

/// Finite-difference checks of every trainable loss.
pub fn gradient_checks() -> Vec<Check> {
    let (a, u) = match small_episodes() {
        Ok(x) => x,
        Err(e) => return vec![Check::new("gradient fixtures", false, e.to_string())],
    };
    let policy = match rough_policy(7) {
        Ok(m) => m,
        Err(e) => return vec![Check::new("gradient fixtures", false, e.to_string())],
    };
    let mut out = vec![
        sft_check("gradient: L_QA", &policy, &[&a], 1.0, 0.0),
        sft_check("gradient: L_NA", &policy, &[&u], 0.0, 1.0),
        sft_check("gradient: L_SFT", &policy, &[&a, &u], 0.7, 1.3),
        preference_check(&a, &u),
    ];
    out.extend(ppo_checks(&a, &u));
    out
}

/// Closed-form values the implementation must reproduce.
pub fn analytic_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let uniform = (|| {
        let (a, _) = small_episodes()?;
        loss_qa(&uniform_policy()?, &a)
    })();
    let want = 2.0 * (VOCAB_SIZE as f64).ln();
    out.push(match uniform {
        Ok(l) => Check::new(
            "oracle: uniform model L_QA = 2 ln 64",
            (l - want).abs() < 1e-9,
            format!("{l:.12} vs {want:.12}"),
        ),
        Err(e) => Check::new("oracle: uniform model L_QA = 2 ln 64", false, e.to_string()),
    });
    let certain = (|| {
        let (a, _) = small_episodes()?;
        certain_policy(EOS)?.confidence_score(&a.prompt(), &[EOS])
    })();
    out.push(match certain {
        Ok(c) => Check::new("oracle: confidence of a unit-probability response = 0", c == 0.0, format!("{c:e}")),
        Err(e) => Check::new("oracle: confidence of a unit-probability response = 0", false, e.to_string()),
    });
    let eq = preference_loss_value(0.37, 0.37);
    out.push(Check::new(
        "oracle: equal-score preference loss = ln 2",
        (eq - 2f64.ln()).abs() < 1e-12,
        format!("{eq:.15}"),
    ));
    let c1 = clipped_term(1.5, 1.0, 0.2);
    let c2 = clipped_term(0.5, -1.0, 0.2);
    out.push(Check::new(
        "oracle: clip cases 1.2 and -0.8",
        c1 == 1.2 && c2 == -0.8,
        format!("{c1}, {c2}"),
    ));
    out
}

/// Metrics against direct counting on random outcome multisets.
pub fn metric_checks(cases: usize) -> Vec<Check> {
    let mut rng = seed::rng(0x3e7);
    let mut mismatches = 0;
    for _ in 0..cases {
        let n = rng.random_range(1..40);
        let outcomes: Vec<Outcome> = (0..n)
            .map(|_| Outcome::ALL[rng.random_range(0..Outcome::ALL.len())])
            .collect();
        let count = |o: Outcome| outcomes.iter().filter(|&&x| x == o).count() as f64;
        let tp = count(Outcome::CorrectAbstention);
        let fp = count(Outcome::OverAbstention);
        let fn_ = count(Outcome::Hallucination);
        let total = n as f64;
        let ratio = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
        let p = ratio(tp, tp + fp);
        let r = ratio(tp, tp + fn_);
        let f1 = ratio(2.0 * p * r, p + r);
        let prf = unanswerability_prf(&outcomes);
        let ok = prf.precision == p
            && prf.recall == r
            && prf.f1 == f1
            && prf.accuracy == (total - fp - fn_) / total
            && overall_accuracy(&outcomes) == (tp + count(Outcome::CorrectAnswer)) / total
            && match hallucination_rate(&outcomes) {
                Ok(h) => tp + fn_ > 0.0 && h == fn_ / (tp + fn_),
                Err(_) => tp + fn_ == 0.0,
            };
        if !ok {
            mismatches += 1;
        }
    }
    let f1 = token_f1(&[value(1), value(2), value(3)], &[value(0), value(1), value(2)]);
    vec![
        Check::new(
            "oracle: metrics vs brute-force counts",
            mismatches == 0,
            format!("{mismatches} mismatches in {cases} multisets"),
        ),
        Check::new(
            "oracle: token F1 of {b,c,d} vs {a,b,c}",
            (f1 - 2.0 / 3.0).abs() < 1e-12,
            format!("{f1}"),
        ),
        Check::new(
            "oracle: abstention response is [NA, EOS]",
            crate::metrics::is_abstention(&[NA, EOS]) && !crate::metrics::is_abstention(&[NA]),
            String::new(),
        ),
    ]
}

pub fn run_all() -> Vec<Check> {
    let mut out = gradient_checks();
    out.extend(analytic_checks());
    out.extend(metric_checks(1000));
    out
}
