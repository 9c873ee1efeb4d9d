//! Multi-task supervised fine-tuning: answer answerable episodes, emit the
//! abstention response on unanswerable ones.
//!
//! Per-example losses are token-summed negative log-likelihoods. A batch
//! loss averages each kind separately and then mixes them with α and β.

use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use salu_autodiff::{AdamConfig, AdamState, AutodiffError, Graph, ParamGrads, Var};
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Episode, KnowledgeBase, RESPONSE_BUDGET};
use crate::error::{Result, SaluError};
use crate::metrics::{self, MetricsReport};
use crate::model::LanguageModel;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Validation cadence in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Renames the keys of every training example through a fresh random
    /// permutation each time it is drawn; values follow the knowledge base
    /// recovered from the training set.
    pub relabel: bool,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            lr: 3e-4,
            batch_size: 32,
            max_steps: 2000,
            eval_every: 200,
            patience: 5,
            relabel: true,
            seed: 0,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SaluError::Config(m));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return bad(format!("alpha and beta must be finite and non-negative (alpha={}, beta={})", self.alpha, self.beta));
        }
        if self.alpha + self.beta <= 0.0 {
            return bad("alpha + beta must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1".into());
        }
        Ok(())
    }
}

/// Token-summed NLL of the episode's gold target, recorded on `g`.
fn target_nll<'a>(g: &mut Graph<'a>, model: &'a LanguageModel, ep: &Episode) -> Result<Var> {
    let vars = model.response_vars(g, &ep.prompt(), &ep.target())?;
    let s = g.sum(vars.token_log_probs)?;
    Ok(g.scale(s, -1.0)?)
}

fn require_kind(ep: &Episode, answerable: bool) -> Result<()> {
    if ep.is_answerable() != answerable {
        let reason = if answerable {
            "question-answering loss needs an answerable episode"
        } else {
            "abstention loss needs an unanswerable episode"
        };
        return Err(SaluError::WrongEpisodeKind {
            id: ep.id,
            reason,
        });
    }
    Ok(())
}

/// `−Σ log P(a_i | X, a_<i)` over the answer target `(v, EOS)`.
pub fn loss_qa(model: &LanguageModel, ep: &Episode) -> Result<f64> {
    require_kind(ep, true)?;
    let mut g = Graph::new();
    let l = target_nll(&mut g, model, ep)?;
    Ok(g.item(l))
}

/// The same sum over the abstention target `(NA, EOS)`.
pub fn loss_na(model: &LanguageModel, ep: &Episode) -> Result<f64> {
    require_kind(ep, false)?;
    let mut g = Graph::new();
    let l = target_nll(&mut g, model, ep)?;
    Ok(g.item(l))
}

/// Batch loss with its two per-kind means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SftLoss {
    pub total: f64,
    /// Mean L_QA over answerable episodes in the batch (0 if none).
    pub qa_mean: f64,
    /// Mean L_NA over unanswerable episodes in the batch (0 if none).
    pub na_mean: f64,
}

/// Mixes per-kind means; a kind absent from the batch contributes 0.
pub fn combine(alpha: f64, beta: f64, qa: &[f64], na: &[f64]) -> SftLoss {
    let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    let (qa_mean, na_mean) = (mean(qa), mean(na));
    SftLoss {
        total: alpha * qa_mean + beta * na_mean,
        qa_mean,
        na_mean,
    }
}

fn batch_graph<'a>(
    g: &mut Graph<'a>,
    model: &'a LanguageModel,
    batch: &[&Episode],
    alpha: f64,
    beta: f64,
) -> Result<(Option<Var>, SftLoss)> {
    if batch.is_empty() {
        return Err(SaluError::Invalid("empty SFT batch".into()));
    }
    let n_qa = batch.iter().filter(|e| e.is_answerable()).count();
    let n_na = batch.len() - n_qa;
    let (mut qa, mut na) = (Vec::new(), Vec::new());
    let mut total: Option<Var> = None;
    for ep in batch {
        let (weight, sink) = if ep.is_answerable() {
            (alpha / n_qa as f64, &mut qa)
        } else {
            (beta / n_na as f64, &mut na)
        };
        let l = target_nll(g, model, ep)?;
        sink.push(g.item(l));
        if weight == 0.0 {
            continue;
        }
        let term = g.scale(l, weight)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok((total, combine(alpha, beta, &qa, &na)))
}

/// `α·mean(L_QA) + β·mean(L_NA)` over `batch`.
pub fn loss_sft(model: &LanguageModel, batch: &[&Episode], alpha: f64, beta: f64) -> Result<SftLoss> {
    let mut g = Graph::new();
    Ok(batch_graph(&mut g, model, batch, alpha, beta)?.1)
}

/// Batch loss and its gradient with respect to every policy parameter.
pub fn sft_gradients(
    model: &LanguageModel,
    batch: &[&Episode],
    alpha: f64,
    beta: f64,
) -> Result<(SftLoss, ParamGrads)> {
    let mut g = Graph::new();
    let (root, loss) = batch_graph(&mut g, model, batch, alpha, beta)?;
    let mut grads = ParamGrads::zeros_like(model.params());
    if let Some(root) = root {
        let gr = g.backward(root)?;
        g.accumulate_param_grads(&gr, 1.0, &mut grads);
    }
    Ok((loss, grads))
}

/// SFT loss with `episodes` treated as one batch, one graph per episode.
pub fn dataset_loss(model: &LanguageModel, episodes: &[Episode], alpha: f64, beta: f64) -> Result<SftLoss> {
    let (mut qa, mut na) = (Vec::new(), Vec::new());
    for ep in episodes {
        let mut g = Graph::new();
        let l = target_nll(&mut g, model, ep)?;
        if ep.is_answerable() { &mut qa } else { &mut na }.push(g.item(l));
    }
    Ok(combine(alpha, beta, &qa, &na))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftStep {
    pub step: usize,
    pub loss: SftLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftEval {
    pub step: usize,
    pub val_loss: SftLoss,
    /// Fraction of validation episodes whose greedy response equals the
    /// gold target; identical to overall accuracy.
    pub exact_target_match: f64,
    pub unanswerability_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftRun {
    pub curve: Vec<SftStep>,
    pub evals: Vec<SftEval>,
    pub best_step: usize,
    pub steps_run: usize,
    pub stopped_early: bool,
}

impl SftRun {
    pub fn initial_val_loss(&self) -> Option<f64> {
        self.evals.first().map(|e| e.val_loss.total)
    }

    pub fn best_eval(&self) -> Option<&SftEval> {
        self.evals.iter().find(|e| e.step == self.best_step)
    }

    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,l_sft,l_qa_mean,l_na_mean")?;
        for s in &self.curve {
            writeln!(f, "{},{},{},{}", s.step, s.loss.total, s.loss.qa_mean, s.loss.na_mean)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn write_eval_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,val_l_sft,exact_target_match,unanswerability_f1")?;
        for e in &self.evals {
            writeln!(
                f,
                "{},{},{},{}",
                e.step, e.val_loss.total, e.exact_target_match, e.unanswerability_f1
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

fn divergence(step: usize, e: SaluError) -> SaluError {
    match e {
        SaluError::Autodiff(AutodiffError::NonFinite { op }) => SaluError::Divergence {
            step,
            reason: format!("non-finite value in {op}"),
        },
        SaluError::Autodiff(AutodiffError::NonFiniteGradient(name)) => SaluError::Divergence {
            step,
            reason: format!("non-finite gradient for {name}"),
        },
        other => other,
    }
}

fn validate_on(model: &LanguageModel, val: &[Episode], cfg: &SftConfig, step: usize) -> Result<SftEval> {
    let val_loss = dataset_loss(model, val, cfg.alpha, cfg.beta)?;
    let responses = metrics::generate_responses(model, val, RESPONSE_BUDGET)?;
    let report = MetricsReport::from_responses(val, &responses)?;
    Ok(SftEval {
        step,
        val_loss,
        exact_target_match: report.overall_accuracy,
        unanswerability_f1: report.unanswerability.f1,
    })
}

fn improves(ev: &SftEval, best: &SftEval) -> bool {
    ev.exact_target_match > best.exact_target_match
        || (ev.exact_target_match == best.exact_target_match && ev.val_loss.total < best.val_loss.total)
}

/// Adam on the batch SFT loss with seeded shuffled batching.
///
/// Validation runs before the first step, every `eval_every` steps and at
/// the end. An evaluation improves on the best so far when its validation
/// overall accuracy is higher, or equal with a lower validation loss.
/// Training stops once `patience` consecutive evaluations fail to improve;
/// the best evaluated parameters are restored before returning.
pub fn train_sft(
    model: &mut LanguageModel,
    train: &[Episode],
    val: &[Episode],
    cfg: &SftConfig,
) -> Result<SftRun> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(SaluError::Invalid("SFT needs non-empty train and validation sets".into()));
    }
    let kb = if cfg.relabel {
        Some(KnowledgeBase::infer(train)?)
    } else {
        None
    };
    let mut rng = seed::rng(seed::derive(cfg.seed, &[0x5f7]));
    let mut adam = AdamState::new(model.params(), AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();

    let mut curve = Vec::with_capacity(cfg.max_steps);
    let mut evals = vec![validate_on(model, val, cfg, 0)?];
    let mut best = (evals[0].clone(), model.params().clone());
    let mut stale = 0;
    let mut stopped_early = false;
    let mut step = 0;

    while step < cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(train.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ep = &train[order[cursor]];
            batch.push(match &kb {
                Some(kb) => corpus::random_relabel(ep, kb, &mut rng),
                None => ep.clone(),
            });
            cursor += 1;
        }
        step += 1;
        let batch: Vec<&Episode> = batch.iter().collect();
        let (loss, grads) =
            sft_gradients(model, &batch, cfg.alpha, cfg.beta).map_err(|e| divergence(step, e))?;
        if !loss.total.is_finite() {
            return Err(SaluError::Divergence {
                step,
                reason: "loss is not finite".into(),
            });
        }
        adam.step(model.params_mut(), &grads)
            .map_err(|e| divergence(step, e.into()))?;
        curve.push(SftStep { step, loss });
        debug!("sft step {step}: loss {:.5}", loss.total);

        let due = cfg.eval_every > 0 && step % cfg.eval_every == 0;
        if due || step == cfg.max_steps {
            let ev = validate_on(model, val, cfg, step)?;
            info!(
                "sft step {step}: val loss {:.4}, exact match {:.3}, unanswerability F1 {:.3}",
                ev.val_loss.total, ev.exact_target_match, ev.unanswerability_f1
            );
            if improves(&ev, &best.0) {
                best = (ev.clone(), model.params().clone());
                stale = 0;
            } else {
                stale += 1;
            }
            evals.push(ev);
            if stale >= cfg.patience && step < cfg.max_steps {
                info!("sft early stop at step {step}; best step {}", best.0.step);
                stopped_early = true;
                break;
            }
        }
    }
    if best.0.step != step {
        *model.params_mut() = best.1;
    }
    Ok(SftRun {
        curve,
        evals,
        best_step: best.0.step,
        steps_run: step,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_invariants() {
        assert!(SftConfig::default().validate().is_ok());
        let zero = SftConfig { alpha: 0.0, beta: 0.0, ..SftConfig::default() };
        assert!(zero.validate().is_err());
        let neg = SftConfig { beta: -1.0, ..SftConfig::default() };
        assert!(neg.validate().is_err());
        let qa_only = SftConfig { beta: 0.0, ..SftConfig::default() };
        assert!(qa_only.validate().is_ok());
    }

    #[test]
    fn combine_examples() {
        let l = combine(1.0, 1.0, &[2.0], &[4.0]);
        assert_eq!(l.total, 6.0);
        let l = combine(1.0, 0.0, &[2.0, 4.0], &[10.0]);
        assert_eq!(l.total, 3.0);
        let l = combine(1.0, 1.0, &[], &[4.0, 2.0]);
        assert_eq!((l.total, l.qa_mean), (3.0, 0.0));
    }
}
