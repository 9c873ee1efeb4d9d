//! Preference-trained reward model and the rule-based reward table.
//!
//! The reward model scores `X ++ R ++ [SEP]`, where `X` is the rendered
//! prompt (history, question and passages) and `R` the response, by
//! applying a scalar head to the final position.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use salu_autodiff::{AdamConfig, AdamState, Graph, ParamGrads, Var};
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Episode, KnowledgeBase, PreferencePair};
use crate::error::{Result, SaluError};
use crate::metrics::{classify_response, Outcome};
use crate::model::{HeadKind, LanguageModel, ModelConfig, Transformer};
use crate::seed;
use crate::vocab::{TokenId, SEP};

/// Scalar scorer of (prompt, response) pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardModel {
    net: Transformer,
}

impl RewardModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        Ok(Self {
            net: Transformer::new(config, HeadKind::Reward)?,
        })
    }

    pub fn from_transformer(net: Transformer) -> Result<Self> {
        if net.kind() != HeadKind::Reward {
            return Err(SaluError::Checkpoint("expected a reward checkpoint".into()));
        }
        Ok(Self { net })
    }

    /// Copies the policy's backbone; the score head starts at zero.
    pub fn from_policy(policy: &LanguageModel) -> Result<Self> {
        let mut net = Transformer::new(policy.config().clone(), HeadKind::Reward)?;
        let src = policy.params();
        let targets: Vec<_> = net
            .params()
            .iter()
            .filter_map(|(id, name, _)| src.id(name).map(|sid| (id, sid)))
            .collect();
        for (id, sid) in targets {
            *net.params_mut().get_mut(id) = src.get(sid).clone();
        }
        Ok(Self { net })
    }

    pub fn net(&self) -> &Transformer {
        &self.net
    }

    pub fn into_net(self) -> Transformer {
        self.net
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    /// `X ++ R ++ [SEP]`.
    pub fn input(prompt: &[TokenId], response: &[TokenId]) -> Vec<TokenId> {
        let mut ids = Vec::with_capacity(prompt.len() + response.len() + 1);
        ids.extend_from_slice(prompt);
        ids.extend_from_slice(response);
        ids.push(SEP);
        ids
    }

    fn score_var<'a>(&'a self, g: &mut Graph<'a>, prompt: &[TokenId], response: &[TokenId]) -> Result<Var> {
        if response.is_empty() {
            return Err(SaluError::InvalidSequence("empty response".into()));
        }
        let ids = Self::input(prompt, response);
        let h = self.net.hidden(g, &ids, ids.len() - 1)?;
        self.net.scalar_head(g, h, 0)
    }

    pub fn score(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<f64> {
        let mut g = Graph::new();
        let s = self.score_var(&mut g, prompt, response)?;
        Ok(g.item(s))
    }
}

/// `−log σ(a − b)`, evaluated stably.
pub fn preference_loss_value(score_preferred: f64, score_dispreferred: f64) -> f64 {
    -salu_autodiff::kernels::log_sigmoid(score_preferred - score_dispreferred)
}

fn pair_loss_var<'a>(
    g: &mut Graph<'a>,
    rm: &'a RewardModel,
    prompt: &[TokenId],
    pair: &PreferencePair,
) -> Result<Var> {
    let a = rm.score_var(g, prompt, &pair.preferred)?;
    let b = rm.score_var(g, prompt, &pair.dispreferred)?;
    let d = g.sub(a, b)?;
    let ls = g.log_sigmoid(d)?;
    Ok(g.scale(ls, -1.0)?)
}

/// Preference loss of one pair.
pub fn preference_loss(rm: &RewardModel, episode: &Episode, pair: &PreferencePair) -> Result<f64> {
    check_pair(episode, pair)?;
    let mut g = Graph::new();
    let l = pair_loss_var(&mut g, rm, &episode.prompt(), pair)?;
    Ok(g.item(l))
}

fn check_pair(episode: &Episode, pair: &PreferencePair) -> Result<()> {
    if episode.id != pair.episode_id {
        return Err(SaluError::Invalid(format!(
            "pair for episode {} scored against episode {}",
            pair.episode_id, episode.id
        )));
    }
    Ok(())
}

/// Mean preference loss over `batch` and its parameter gradient.
pub fn preference_gradients(
    rm: &RewardModel,
    episodes: &BTreeMap<u64, &Episode>,
    batch: &[&PreferencePair],
) -> Result<(f64, ParamGrads)> {
    let items = batch
        .iter()
        .map(|&pair| Ok((episode_of(episodes, pair)?.prompt(), pair.clone())))
        .collect::<Result<Vec<_>>>()?;
    batch_gradients(rm, &items)
}

fn batch_gradients(rm: &RewardModel, items: &[(Vec<TokenId>, PreferencePair)]) -> Result<(f64, ParamGrads)> {
    if items.is_empty() {
        return Err(SaluError::Invalid("empty preference batch".into()));
    }
    let mut g = Graph::new();
    let mut total: Option<Var> = None;
    for (prompt, pair) in items {
        let l = pair_loss_var(&mut g, rm, prompt, pair)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    let total = total.expect("non-empty batch");
    let mean = g.scale(total, 1.0 / items.len() as f64)?;
    let grads = g.backward(mean)?;
    let mut out = ParamGrads::zeros_like(rm.net.params());
    g.accumulate_param_grads(&grads, 1.0, &mut out);
    Ok((g.item(mean), out))
}

fn episode_of<'e>(episodes: &BTreeMap<u64, &'e Episode>, pair: &PreferencePair) -> Result<&'e Episode> {
    episodes
        .get(&pair.episode_id)
        .copied()
        .ok_or_else(|| SaluError::Invalid(format!("pair references unknown episode {}", pair.episode_id)))
}

/// Fraction of pairs whose preferred response scores strictly higher.
pub fn pair_accuracy(rm: &RewardModel, episodes: &[Episode], pairs: &[PreferencePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(SaluError::Invalid("pair accuracy of an empty set".into()));
    }
    let by_id = index_episodes(episodes);
    let mut correct = 0;
    for pair in pairs {
        let prompt = episode_of(&by_id, pair)?.prompt();
        if rm.score(&prompt, &pair.preferred)? > rm.score(&prompt, &pair.dispreferred)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

fn index_episodes(episodes: &[Episode]) -> BTreeMap<u64, &Episode> {
    episodes.iter().map(|e| (e.id, e)).collect()
}

/// Swaps preferred and dispreferred on a seeded coin flip per pair.
pub fn shuffle_labels(pairs: &[PreferencePair], seed_value: u64) -> Vec<PreferencePair> {
    let mut rng = seed::rng(seed::derive(seed_value, &[0x5a5a]));
    pairs
        .iter()
        .map(|p| {
            let mut q = p.clone();
            if rng.random_bool(0.5) {
                std::mem::swap(&mut q.preferred, &mut q.dispreferred);
            }
            q
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Fraction of episodes whose pairs are held out for accuracy.
    pub holdout_fraction: f64,
    /// Rename keys and values of each drawn pair through a random
    /// knowledge-base-consistent permutation.
    pub relabel: bool,
    pub seed: u64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 32,
            max_steps: 600,
            holdout_fraction: 0.1,
            relabel: true,
            seed: 0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(SaluError::Config(format!("reward lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.max_steps == 0 {
            return Err(SaluError::Config("reward batch_size and max_steps must be positive".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(SaluError::Config(format!(
                "holdout_fraction must lie in (0, 1), got {}",
                self.holdout_fraction
            )));
        }
        Ok(())
    }
}

pub const MIN_PAIRS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRun {
    /// `(step, mean batch loss)`.
    pub curve: Vec<(usize, f64)>,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    pub heldout_accuracy: f64,
}

impl RewardRun {
    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,preference_loss")?;
        for (s, l) in &self.curve {
            writeln!(f, "{s},{l}")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Splits pairs by episode so no held-out episode contributes training pairs.
pub fn holdout_split(
    pairs: &[PreferencePair],
    fraction: f64,
    seed_value: u64,
) -> (Vec<PreferencePair>, Vec<PreferencePair>) {
    let mut ids: Vec<u64> = pairs.iter().map(|p| p.episode_id).collect::<BTreeSet<_>>().into_iter().collect();
    ids.shuffle(&mut seed::rng(seed::derive(seed_value, &[0x401d])));
    let n_held = ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len().saturating_sub(1).max(1));
    let held: BTreeSet<u64> = ids[..n_held].iter().copied().collect();
    pairs.iter().cloned().partition(|p| !held.contains(&p.episode_id))
}

fn relabel_pair<R: Rng>(
    ep: &Episode,
    pair: &PreferencePair,
    kb: &KnowledgeBase,
    rng: &mut R,
) -> (Vec<TokenId>, PreferencePair) {
    let (kp, vp) = corpus::random_perms(kb, rng);
    let map = |r: &[TokenId]| r.iter().map(|&t| corpus::relabel_token(t, &kp, &vp)).collect();
    let pair = PreferencePair {
        preferred: map(&pair.preferred),
        dispreferred: map(&pair.dispreferred),
        ..pair.clone()
    };
    (corpus::relabel(ep, &kp, &vp).prompt(), pair)
}

/// Adam on the mean preference loss; reports held-out pair accuracy.
pub fn train_reward_model(
    rm: &mut RewardModel,
    episodes: &[Episode],
    pairs: &[PreferencePair],
    cfg: &RewardConfig,
) -> Result<RewardRun> {
    cfg.validate()?;
    if pairs.len() < MIN_PAIRS {
        return Err(SaluError::Invalid(format!(
            "reward training needs at least {MIN_PAIRS} pairs, got {}",
            pairs.len()
        )));
    }
    let (train, held) = holdout_split(pairs, cfg.holdout_fraction, cfg.seed);
    let by_id = index_episodes(episodes);
    let kb = if cfg.relabel {
        Some(KnowledgeBase::infer(episodes)?)
    } else {
        None
    };
    let mut rng = seed::rng(seed::derive(cfg.seed, &[0x7e3a]));
    let mut adam = AdamState::new(rm.net.params(), AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut curve = Vec::with_capacity(cfg.max_steps);
    for step in 1..=cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(train.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let pair = &train[order[cursor]];
            let ep = episode_of(&by_id, pair)?;
            batch.push(match &kb {
                Some(kb) => relabel_pair(ep, pair, kb, &mut rng),
                None => (ep.prompt(), pair.clone()),
            });
            cursor += 1;
        }
        let (loss, grads) = batch_gradients(rm, &batch).map_err(|e| match e {
            SaluError::Autodiff(err) => SaluError::Divergence {
                step,
                reason: err.to_string(),
            },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(SaluError::Divergence {
                step,
                reason: "preference loss is not finite".into(),
            });
        }
        adam.step(rm.net.params_mut(), &grads)
            .map_err(|e| SaluError::Divergence { step, reason: e.to_string() })?;
        curve.push((step, loss));
        debug!("reward step {step}: loss {loss:.5}");
    }
    let heldout_accuracy = pair_accuracy(rm, episodes, &held)?;
    info!("reward model held-out pair accuracy {heldout_accuracy:.3} on {} pairs", held.len());
    Ok(RewardRun {
        curve,
        train_pairs: train.len(),
        heldout_pairs: held.len(),
        heldout_accuracy,
    })
}

/// Environment reward per outcome.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseRewardTable {
    pub correct_answer: f64,
    pub correct_abstention: f64,
    pub hallucination: f64,
    pub wrong_answer: f64,
    pub over_abstention: f64,
}

impl Default for BaseRewardTable {
    fn default() -> Self {
        Self {
            correct_answer: 1.0,
            correct_abstention: 1.0,
            hallucination: -2.0,
            wrong_answer: -1.0,
            over_abstention: -0.5,
        }
    }
}

impl BaseRewardTable {
    /// Requires `hallucination < wrong_answer < 0 < correct_answer` and
    /// hallucination to be the strict minimum of the table.
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.correct_answer,
            self.correct_abstention,
            self.hallucination,
            self.wrong_answer,
            self.over_abstention,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(SaluError::Config("reward table entries must be finite".into()));
        }
        if !(self.hallucination < self.wrong_answer && self.wrong_answer < 0.0 && 0.0 < self.correct_answer) {
            return Err(SaluError::Config(
                "reward table must satisfy hallucination < wrong_answer < 0 < correct_answer".into(),
            ));
        }
        if !(self.hallucination < self.correct_abstention && self.hallucination < self.over_abstention) {
            return Err(SaluError::Config("hallucination must be the strict minimum reward".into()));
        }
        Ok(())
    }

    pub fn get(&self, outcome: Outcome) -> f64 {
        match outcome {
            Outcome::CorrectAnswer => self.correct_answer,
            Outcome::CorrectAbstention => self.correct_abstention,
            Outcome::Hallucination => self.hallucination,
            Outcome::WrongAnswer => self.wrong_answer,
            Outcome::OverAbstention => self.over_abstention,
        }
    }
}

/// Table reward for `response` to `episode`.
pub fn base_reward(table: &BaseRewardTable, episode: &Episode, response: &[TokenId]) -> f64 {
    table.get(classify_response(episode, response))
}
