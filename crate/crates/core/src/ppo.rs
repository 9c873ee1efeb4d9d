//! Confidence-shaped PPO on whole responses.
//!
//! Each rollout is one sampled response with a single end-of-sequence
//! reward. The ratio is taken per sequence, the KL penalty is the exact
//! per-token KL to the pre-update policy, and the value head regresses the
//! shaped reward.

use std::io::Write;
use std::path::Path;

use log::{info, warn};
use salu_autodiff::{kernels, AdamConfig, AdamState, Graph, ParamGrads, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::corpus::{Episode, RESPONSE_BUDGET};
use crate::error::{Result, SaluError};
use crate::metrics::{classify_response, is_abstention, Outcome};
use crate::model::{DecodeMode, LanguageModel};
use crate::reward::{base_reward, BaseRewardTable, RewardModel};
use crate::seed;
use crate::vocab::{TokenId, EOS, VOCAB_SIZE};

/// Largest tolerated `|log π_θ(Y|X) − log π_old(Y|X)|`.
pub const MAX_LOG_RATIO: f64 = 50.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSourceKind {
    #[default]
    Rules,
    Learned,
}

impl RewardSourceKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rules" => Ok(Self::Rules),
            "learned" => Ok(Self::Learned),
            other => Err(SaluError::Config(format!(
                "reward_source must be `rules` or `learned`, got `{other}`"
            ))),
        }
    }
}

/// Where the base reward of a rollout comes from.
#[derive(Clone, Copy, Debug)]
pub enum RewardSource<'a> {
    Rules(&'a BaseRewardTable),
    Learned(&'a RewardModel),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub kl_coef: f64,
    pub lambda_abstain: f64,
    pub lambda_halluc: f64,
    pub rollout_batch: usize,
    pub ppo_epochs: usize,
    pub lr: f64,
    pub value_loss_coef: f64,
    pub max_new_tokens: usize,
    pub sample_temperature: f64,
    pub iterations: usize,
    /// Mean KL above which training aborts.
    pub kl_limit: f64,
    pub reward_source: RewardSourceKind,
    pub reward_table: BaseRewardTable,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            kl_coef: 0.05,
            lambda_abstain: 0.5,
            lambda_halluc: 1.0,
            rollout_batch: 64,
            ppo_epochs: 4,
            lr: 1e-4,
            value_loss_coef: 0.5,
            max_new_tokens: RESPONSE_BUDGET,
            sample_temperature: 1.0,
            iterations: 30,
            kl_limit: 1.0,
            reward_source: RewardSourceKind::Rules,
            reward_table: BaseRewardTable::default(),
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SaluError::Config(m));
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad(format!("clip_epsilon must lie in (0, 1), got {}", self.clip_epsilon));
        }
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            return bad(format!("kl_coef must be non-negative, got {}", self.kl_coef));
        }
        if !(self.lambda_abstain >= 0.0 && self.lambda_halluc >= 0.0) {
            return bad("lambda_abstain and lambda_halluc must be non-negative".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("ppo lr must be positive, got {}", self.lr));
        }
        if !(self.sample_temperature > 0.0 && self.sample_temperature.is_finite()) {
            return bad("sample_temperature must be positive".into());
        }
        if self.rollout_batch == 0 || self.ppo_epochs == 0 || self.max_new_tokens == 0 {
            return bad("rollout_batch, ppo_epochs and max_new_tokens must be positive".into());
        }
        if !(self.value_loss_coef >= 0.0 && self.kl_limit > 0.0) {
            return bad("value_loss_coef must be non-negative and kl_limit positive".into());
        }
        self.reward_table.validate()
    }
}

/// Confidence-modulated reward.
///
/// With `c = exp(S)`, correct abstentions get `r₀·(1 + λ_a·c)`,
/// hallucinations `r₀·(1 + λ_h·c)`, every other outcome `r₀`.
pub fn shaped_reward(outcome: Outcome, base: f64, confidence: f64, lambda_abstain: f64, lambda_halluc: f64) -> f64 {
    let c = confidence.exp();
    match outcome {
        Outcome::CorrectAbstention => base * (1.0 + lambda_abstain * c),
        Outcome::Hallucination => base * (1.0 + lambda_halluc * c),
        _ => base,
    }
}

/// One sampled response and everything PPO needs about it.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// Index into the episode slice the batch was collected from.
    pub episode: usize,
    pub episode_id: u64,
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
    /// `log π_old(Y|X)`.
    pub old_log_prob: f64,
    /// `log π_old(·|prefix)` at every response position, row-major `[m, V]`.
    pub old_log_dists: Vec<f64>,
    pub outcome: Outcome,
    /// `S(Y|X)` under the snapshot.
    pub confidence: f64,
    pub base_reward: f64,
    pub reward: f64,
    pub value: f64,
    pub advantage: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBatch {
    pub rollouts: Vec<Rollout>,
    /// Episodes dropped because decoding overflowed or never emitted `[EOS]`.
    pub skipped: usize,
}

fn log_softmax_rows(logits: &Tensor) -> Vec<f64> {
    let v = logits.cols();
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(v) {
        let lse = kernels::log_sum_exp(row);
        for x in row.iter_mut() {
            *x -= lse;
        }
    }
    out
}

/// Samples one response per episode from the snapshot `policy`.
///
/// Sampling seeds derive from `(seed, episode index)`.
pub fn collect_rollouts(
    policy: &LanguageModel,
    episodes: &[&Episode],
    source: RewardSource<'_>,
    cfg: &PpoConfig,
    seed_value: u64,
) -> Result<RolloutBatch> {
    let mut batch = RolloutBatch::default();
    for (i, ep) in episodes.iter().enumerate() {
        let prompt = ep.prompt();
        let mode = DecodeMode::Sample {
            temperature: cfg.sample_temperature,
            seed: seed::derive(seed_value, &[i as u64]),
        };
        let response = match policy.decode(&prompt, mode, cfg.max_new_tokens) {
            Ok(r) if r.last() == Some(&EOS) => r,
            Ok(_) | Err(SaluError::SequenceTooLong { .. }) => {
                batch.skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        batch.rollouts.push(score_rollout(policy, ep, i, response, source, cfg)?);
    }
    if batch.skipped > 0 {
        warn!("skipped {} rollouts without [EOS] or over length", batch.skipped);
    }
    Ok(batch)
}

/// Scores `response` to `ep` under the snapshot `policy`: log-probabilities,
/// confidence, value estimate, base and shaped reward.
pub fn score_rollout(
    policy: &LanguageModel,
    ep: &Episode,
    index: usize,
    response: Vec<TokenId>,
    source: RewardSource<'_>,
    cfg: &PpoConfig,
) -> Result<Rollout> {
    let prompt = ep.prompt();
    let mut g = Graph::new();
    let vars = policy.response_vars(&mut g, &prompt, &response)?;
    let token_lp = g.value(vars.token_log_probs).data().to_vec();
    let old_log_dists = log_softmax_rows(g.value(vars.logits));
    let value = g.item(vars.value);
    let old_log_prob: f64 = token_lp.iter().sum();
    let confidence = old_log_prob / response.len() as f64;
    let outcome = classify_response(ep, &response);
    let (base, shaping_outcome) = match source {
        RewardSource::Rules(table) => (base_reward(table, ep, &response), outcome),
        RewardSource::Learned(rm) => {
            let s = rm.score(&prompt, &response)?;
            (s, learned_shaping_outcome(&response, s))
        }
    };
    let reward = shaped_reward(shaping_outcome, base, confidence, cfg.lambda_abstain, cfg.lambda_halluc);
    Ok(Rollout {
        episode: index,
        episode_id: ep.id,
        prompt,
        response,
        old_log_prob,
        old_log_dists,
        outcome,
        confidence,
        base_reward: base,
        reward,
        value,
        advantage: reward - value,
    })
}

/// Outcome used to shape a learned score: a positively scored abstention
/// is shaped like a correct abstention, a negatively scored answer like a
/// hallucination.
fn learned_shaping_outcome(response: &[TokenId], score: f64) -> Outcome {
    match (is_abstention(response), score > 0.0) {
        (true, true) => Outcome::CorrectAbstention,
        (false, false) => Outcome::Hallucination,
        (true, false) => Outcome::OverAbstention,
        (false, true) => Outcome::CorrectAnswer,
    }
}

/// `min(ρA, clip(ρ, 1−ε, 1+ε)A)`.
pub fn clipped_term(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage)
}

/// Exact `KL(p ‖ q)` from log-probabilities.
pub fn exact_kl(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| lp.exp() * (lp - lq))
        .sum()
}

/// Scalars of one evaluation of the PPO loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoLoss {
    /// `mean(clipped term) − γ·mean(KL)`, the quantity ascended.
    pub objective: f64,
    pub clipped_mean: f64,
    pub kl_mean: f64,
    pub value_loss: f64,
    /// `−objective + c_v·value_loss`, the quantity descended.
    pub total: f64,
    /// Rollouts whose clip bound was active.
    pub clip_fraction: f64,
    /// Rollouts whose log-ratio hit the ±50 clamp.
    pub flagged: usize,
}

struct LossVars {
    objective: Var,
    value_loss: Var,
    total: Var,
}

fn ppo_graph<'a>(
    g: &mut Graph<'a>,
    policy: &'a LanguageModel,
    batch: &[Rollout],
    cfg: &PpoConfig,
) -> Result<(LossVars, PpoLoss)> {
    if batch.is_empty() {
        return Err(SaluError::Invalid("empty rollout batch".into()));
    }
    let n = batch.len() as f64;
    let eps = cfg.clip_epsilon;
    let mut clip_sum: Option<Var> = None;
    let mut kl_sum: Option<Var> = None;
    let mut v_sum: Option<Var> = None;
    let mut stats = PpoLoss::default();
    let mut clipped = 0usize;
    let acc = |g: &mut Graph<'a>, s: Option<Var>, x: Var| -> Result<Option<Var>> {
        Ok(Some(match s {
            Some(t) => g.add(t, x)?,
            None => x,
        }))
    };
    for r in batch {
        let vars = policy.response_vars(g, &r.prompt, &r.response)?;
        let m = r.response.len();

        let lp = g.sum(vars.token_log_probs)?;
        let old = g.constant(Tensor::scalar(r.old_log_prob));
        let gap = g.sub(lp, old)?;
        let gap_value = g.item(gap);
        if gap_value.abs() > MAX_LOG_RATIO {
            stats.flagged += 1;
        }
        let gap = g.clamp(gap, -MAX_LOG_RATIO, MAX_LOG_RATIO)?;
        let ratio = g.exp(gap)?;
        let rho = g.item(ratio);
        let a = r.advantage;
        let unclipped = g.scale(ratio, a)?;
        let bounded = g.clamp(ratio, 1.0 - eps, 1.0 + eps)?;
        let bounded = g.scale(bounded, a)?;
        let term = g.minimum(unclipped, bounded)?;
        if clipped_term(rho, a, eps) != rho * a {
            clipped += 1;
        }
        clip_sum = acc(g, clip_sum, term)?;

        // Exact log-softmax: logits − logsumexp, the latter via CE against token 0.
        let ce0 = g.cross_entropy(vars.logits, &vec![0; m])?;
        let first = g.slice(vars.logits, 1, 0, 1)?;
        let first = g.reshape(first, &[m])?;
        let lse = g.add(ce0, first)?;
        let lse = g.reshape(lse, &[m, 1])?;
        let ones = g.constant(Tensor::full(&[1, VOCAB_SIZE], 1.0));
        let lse = g.matmul(lse, ones)?;
        let log_p = g.sub(vars.logits, lse)?;
        let p = g.exp(log_p)?;
        let old_dists = g.constant(Tensor::new(vec![m, VOCAB_SIZE], r.old_log_dists.clone())?);
        let diff = g.sub(log_p, old_dists)?;
        let kl_rows = g.mul(p, diff)?;
        let kl_rows = g.sum_last_axis(kl_rows)?;
        let kl = g.mean(kl_rows)?;
        kl_sum = acc(g, kl_sum, kl)?;

        let target = g.constant(Tensor::scalar(r.reward));
        let resid = g.sub(vars.value, target)?;
        let sq = g.mul(resid, resid)?;
        v_sum = acc(g, v_sum, sq)?;
    }
    let clip_mean = g.scale(clip_sum.expect("non-empty"), 1.0 / n)?;
    let kl_mean = g.scale(kl_sum.expect("non-empty"), 1.0 / n)?;
    let value_loss = g.scale(v_sum.expect("non-empty"), 1.0 / n)?;
    let penalty = g.scale(kl_mean, cfg.kl_coef)?;
    let objective = g.sub(clip_mean, penalty)?;
    let neg = g.scale(objective, -1.0)?;
    let vterm = g.scale(value_loss, cfg.value_loss_coef)?;
    let total = g.add(neg, vterm)?;
    stats.objective = g.item(objective);
    stats.clipped_mean = g.item(clip_mean);
    stats.kl_mean = g.item(kl_mean);
    stats.value_loss = g.item(value_loss);
    stats.total = g.item(total);
    stats.clip_fraction = clipped as f64 / n;
    Ok((
        LossVars {
            objective,
            value_loss,
            total,
        },
        stats,
    ))
}

/// Evaluates the PPO quantities of `policy` on `batch`.
pub fn ppo_loss(policy: &LanguageModel, batch: &[Rollout], cfg: &PpoConfig) -> Result<PpoLoss> {
    let mut g = Graph::new();
    Ok(ppo_graph(&mut g, policy, batch, cfg)?.1)
}

/// `mean(clip term) − γ·mean(KL)`.
pub fn ppo_objective(policy: &LanguageModel, batch: &[Rollout], cfg: &PpoConfig) -> Result<f64> {
    Ok(ppo_loss(policy, batch, cfg)?.objective)
}

/// `mean((V(X) − r)²)`.
pub fn value_loss(policy: &LanguageModel, batch: &[Rollout]) -> Result<f64> {
    let mut g = Graph::new();
    let (vars, _) = ppo_graph(&mut g, policy, batch, &PpoConfig::default())?;
    Ok(g.item(vars.value_loss))
}

/// Which scalar [`ppo_gradients`] differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PpoTarget {
    /// The objective (ascent direction).
    Objective,
    ValueLoss,
    /// `−objective + c_v·value_loss`.
    Total,
}

/// Gradient of the chosen PPO scalar with respect to the policy parameters.
pub fn ppo_gradients(
    policy: &LanguageModel,
    batch: &[Rollout],
    cfg: &PpoConfig,
    target: PpoTarget,
) -> Result<(PpoLoss, ParamGrads)> {
    let mut g = Graph::new();
    let (vars, stats) = ppo_graph(&mut g, policy, batch, cfg)?;
    let root = match target {
        PpoTarget::Objective => vars.objective,
        PpoTarget::ValueLoss => vars.value_loss,
        PpoTarget::Total => vars.total,
    };
    let grads = g.backward(root)?;
    let mut out = ParamGrads::zeros_like(policy.params());
    g.accumulate_param_grads(&grads, 1.0, &mut out);
    Ok((stats, out))
}

/// Mean exact per-token KL of `policy` to the snapshot stored in `batch`.
pub fn mean_kl(policy: &LanguageModel, batch: &[Rollout]) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for r in batch {
        let mut g = Graph::new();
        let vars = policy.response_vars(&mut g, &r.prompt, &r.response)?;
        let now = log_softmax_rows(g.value(vars.logits));
        let m = r.response.len();
        let kl: f64 = (0..m)
            .map(|j| {
                let s = j * VOCAB_SIZE..(j + 1) * VOCAB_SIZE;
                exact_kl(&now[s.clone()], &r.old_log_dists[s])
            })
            .sum();
        total += kl / m as f64;
    }
    Ok(total / batch.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoIterStats {
    pub iter: usize,
    pub mean_reward: f64,
    /// Hallucinations among rollouts on unanswerable episodes.
    pub halluc_rate: f64,
    /// KL of the updated policy to the iteration's snapshot.
    pub mean_kl: f64,
    pub clip_frac: f64,
    /// Mean `exp(S)` over abstaining rollouts (0 if none).
    pub mean_confidence_on_abstentions: f64,
    pub skipped: usize,
    pub flagged: usize,
}

/// One logged rollout, enough to audit reward shaping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub iter: usize,
    pub episode_id: u64,
    pub outcome: Outcome,
    pub confidence: f64,
    pub base_reward: f64,
    pub reward: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoRun {
    pub stats: Vec<PpoIterStats>,
    pub rollout_log: Vec<RolloutRecord>,
}

impl PpoRun {
    pub fn write_stats_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "iter,mean_reward,halluc_rate,mean_kl,clip_frac,mean_confidence_on_abstentions")?;
        for s in &self.stats {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                s.iter, s.mean_reward, s.halluc_rate, s.mean_kl, s.clip_frac, s.mean_confidence_on_abstentions
            )?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn write_rollouts_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "iter,episode_id,outcome,confidence,base_reward,reward")?;
        for r in &self.rollout_log {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                r.iter,
                r.episode_id,
                r.outcome.as_str(),
                r.confidence,
                r.base_reward,
                r.reward
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Draws a rollout batch with answerable and unanswerable episodes in the
/// proportions of `episodes`, cycling through seeded permutations of each.
struct BatchSampler<'e> {
    pools: [Vec<&'e Episode>; 2],
    cursors: [usize; 2],
    rng: rand_chacha::ChaCha8Rng,
}

impl<'e> BatchSampler<'e> {
    fn new(episodes: &'e [Episode], seed_value: u64) -> Self {
        let mut rng = seed::rng(seed::derive(seed_value, &[0xba7c]));
        let mut pools = [Vec::new(), Vec::new()];
        for e in episodes {
            pools[usize::from(!e.is_answerable())].push(e);
        }
        for p in &mut pools {
            rand::seq::SliceRandom::shuffle(p.as_mut_slice(), &mut rng);
        }
        Self {
            pools,
            cursors: [0, 0],
            rng,
        }
    }

    fn draw(&mut self, n: usize) -> Vec<&'e Episode> {
        let total: usize = self.pools.iter().map(Vec::len).sum();
        let n_na = ((n * self.pools[1].len()) as f64 / total as f64).round() as usize;
        let mut out = Vec::with_capacity(n);
        for (kind, k) in [(0usize, n - n_na), (1, n_na)] {
            for _ in 0..k {
                if self.pools[kind].is_empty() {
                    break;
                }
                if self.cursors[kind] == self.pools[kind].len() {
                    rand::seq::SliceRandom::shuffle(self.pools[kind].as_mut_slice(), &mut self.rng);
                    self.cursors[kind] = 0;
                }
                out.push(self.pools[kind][self.cursors[kind]]);
                self.cursors[kind] += 1;
            }
        }
        out
    }
}

/// PPO loop: snapshot, collect, then `ppo_epochs` full-batch steps on
/// `−objective + c_v·value_loss`.
pub fn train_ppo(
    policy: &mut LanguageModel,
    episodes: &[Episode],
    source: RewardSource<'_>,
    cfg: &PpoConfig,
) -> Result<PpoRun> {
    cfg.validate()?;
    if episodes.is_empty() {
        return Err(SaluError::Invalid("PPO needs at least one episode".into()));
    }
    let mut adam = AdamState::new(policy.params(), AdamConfig::with_lr(cfg.lr));
    let mut sampler = BatchSampler::new(episodes, cfg.seed);
    let mut run = PpoRun::default();
    for iter in 0..cfg.iterations {
        let chosen = sampler.draw(cfg.rollout_batch);
        let snapshot = policy.clone();
        let batch = collect_rollouts(&snapshot, &chosen, source, cfg, seed::derive(cfg.seed, &[iter as u64]))?;
        if batch.rollouts.is_empty() {
            return Err(SaluError::Invalid(format!("iteration {iter}: every rollout was skipped")));
        }
        let mut last = PpoLoss::default();
        for _ in 0..cfg.ppo_epochs {
            let (stats, grads) = ppo_gradients(policy, &batch.rollouts, cfg, PpoTarget::Total)
                .map_err(|e| SaluError::Divergence { step: iter, reason: e.to_string() })?;
            adam.step(policy.params_mut(), &grads)
                .map_err(|e| SaluError::Divergence { step: iter, reason: e.to_string() })?;
            last = stats;
        }
        let kl = mean_kl(policy, &batch.rollouts)?;
        let rs = &batch.rollouts;
        let mean_reward = rs.iter().map(|r| r.reward).sum::<f64>() / rs.len() as f64;
        let unans: Vec<&Rollout> = rs
            .iter()
            .filter(|r| matches!(r.outcome, Outcome::Hallucination | Outcome::CorrectAbstention))
            .collect();
        let halluc_rate = if unans.is_empty() {
            0.0
        } else {
            unans.iter().filter(|r| r.outcome == Outcome::Hallucination).count() as f64 / unans.len() as f64
        };
        let abst: Vec<f64> = rs
            .iter()
            .filter(|r| r.outcome.abstained())
            .map(|r| r.confidence.exp())
            .collect();
        let mean_conf = if abst.is_empty() { 0.0 } else { abst.iter().sum::<f64>() / abst.len() as f64 };
        let stats = PpoIterStats {
            iter,
            mean_reward,
            halluc_rate,
            mean_kl: kl,
            clip_frac: last.clip_fraction,
            mean_confidence_on_abstentions: mean_conf,
            skipped: batch.skipped,
            flagged: last.flagged,
        };
        info!(
            "ppo iter {iter}: reward {mean_reward:.4}, halluc {halluc_rate:.3}, kl {kl:.2e}, clip {:.3}",
            last.clip_fraction
        );
        run.stats.push(stats);
        run.rollout_log.extend(rs.iter().map(|r| RolloutRecord {
            iter,
            episode_id: r.episode_id,
            outcome: r.outcome,
            confidence: r.confidence,
            base_reward: r.base_reward,
            reward: r.reward,
        }));
        if kl > cfg.kl_limit {
            return Err(SaluError::PolicyCollapse {
                iter,
                kl,
                limit: cfg.kl_limit,
            });
        }
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_examples() {
        assert_eq!(clipped_term(1.5, 1.0, 0.2), 1.2);
        assert_eq!(clipped_term(0.5, -1.0, 0.2), -0.8);
        assert_eq!(clipped_term(1.0, 0.7, 0.2), 0.7);
    }

    #[test]
    fn shaping_examples() {
        assert_eq!(shaped_reward(Outcome::Hallucination, -2.0, 0.0, 0.5, 1.0), -4.0);
        assert_eq!(shaped_reward(Outcome::CorrectAnswer, 1.0, -0.1, 0.5, 1.0), 1.0);
        let near_zero = shaped_reward(Outcome::CorrectAbstention, 1.0, -60.0, 0.5, 1.0);
        assert!((near_zero - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_zero_on_identical() {
        let p = [0.2f64.ln(), 0.8f64.ln()];
        assert_eq!(exact_kl(&p, &p), 0.0);
        let q = [0.5f64.ln(), 0.5f64.ln()];
        assert!(exact_kl(&p, &q) > 0.0);
    }

    #[test]
    fn config_checks() {
        assert!(PpoConfig::default().validate().is_ok());
        assert!(PpoConfig { clip_epsilon: 1.0, ..PpoConfig::default() }.validate().is_err());
        assert!(PpoConfig { kl_coef: -0.1, ..PpoConfig::default() }.validate().is_err());
    }
}
