//! Synthetic answerability corpus.
//!
//! Every episode asks for the value of one key. Passages hold facts of the
//! form `K is V`; the question is answerable exactly when some passage
//! states a fact about the queried key. Distractor passages carry real facts
//! about other keys, so an unanswerable episode looks just like an
//! answerable one except for the missing key.
//!
//! All facts in a dataset agree with one [`KnowledgeBase`], so the value of
//! any key can be recalled from training alone. Whether recalling it is
//! allowed depends only on the passages.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaluError};
use crate::seed;
use crate::vocab::{
    self, TokenId, ABSTENTION, CLS, DOT, EOS, IS, NUM_FILLERS, NUM_KEYS, NUM_VALUES, QMARK, SEP,
    WHAT,
};

/// Length of the question segment `what is K ?`.
const QUESTION_LEN: usize = 4;
/// Tokens per history turn, rendered as `K . V .`.
const TURN_LEN: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gold {
    Answer(TokenId),
    Unanswerable,
}

impl Gold {
    pub fn is_answerable(self) -> bool {
        matches!(self, Gold::Answer(_))
    }
}

/// One question with its dialogue history and retrieved passages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub id: u64,
    /// Prior (question key, answer value) turns.
    pub history: Vec<(TokenId, TokenId)>,
    /// The key being asked about.
    pub question: TokenId,
    pub passages: Vec<Vec<TokenId>>,
    pub gold: Gold,
    /// Whether each passage states the queried fact.
    pub passage_labels: Vec<bool>,
}

impl Episode {
    pub fn is_answerable(&self) -> bool {
        self.gold.is_answerable()
    }

    pub fn prompt(&self) -> Vec<TokenId> {
        render_prompt(self)
    }

    pub fn target(&self) -> Vec<TokenId> {
        gold_target(self)
    }
}

/// `[CLS] history [SEP] what is K ? [SEP] P₁ . P₂ … [SEP]`
pub fn render_prompt(ep: &Episode) -> Vec<TokenId> {
    let mut x = Vec::with_capacity(48);
    x.push(CLS);
    for &(q, a) in &ep.history {
        x.extend_from_slice(&[q, DOT, a, DOT]);
    }
    x.push(SEP);
    x.extend_from_slice(&[WHAT, IS, ep.question, QMARK]);
    x.push(SEP);
    for (i, p) in ep.passages.iter().enumerate() {
        if i > 0 {
            x.push(DOT);
        }
        x.extend_from_slice(p);
    }
    x.push(SEP);
    x
}

/// `[V, EOS]` for answerable episodes, the abstention `[NA, EOS]` otherwise.
pub fn gold_target(ep: &Episode) -> Vec<TokenId> {
    match ep.gold {
        Gold::Answer(v) => vec![v, EOS],
        Gold::Unanswerable => ABSTENTION.to_vec(),
    }
}

/// Value stated for `key` in `passage`, if any.
pub fn lookup(passage: &[TokenId], key: TokenId) -> Option<TokenId> {
    passage
        .windows(3)
        .find(|w| w[0] == key && w[1] == IS && vocab::is_value(w[2]))
        .map(|w| w[2])
}

/// Renames keys and values through the given permutations; every other
/// token is kept. Answerability and the answer's position are unchanged.
pub fn relabel(ep: &Episode, key_perm: &[usize], value_perm: &[usize]) -> Episode {
    let map = |t: TokenId| relabel_token(t, key_perm, value_perm);
    Episode {
        id: ep.id,
        history: ep.history.iter().map(|&(k, v)| (map(k), map(v))).collect(),
        question: map(ep.question),
        passages: ep.passages.iter().map(|p| p.iter().map(|&t| map(t)).collect()).collect(),
        gold: match ep.gold {
            Gold::Answer(v) => Gold::Answer(map(v)),
            Gold::Unanswerable => Gold::Unanswerable,
        },
        passage_labels: ep.passage_labels.clone(),
    }
}

/// One token of [`relabel`].
pub fn relabel_token(t: TokenId, key_perm: &[usize], value_perm: &[usize]) -> TokenId {
    if vocab::is_key(t) {
        vocab::key(key_perm[t - vocab::key(0)])
    } else if vocab::is_value(t) {
        vocab::value(value_perm[t - vocab::value(0)])
    } else {
        t
    }
}

/// The fixed key → value assignment all facts of a dataset agree with.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeBase {
    /// Value index for each key index; a permutation.
    values: Vec<usize>,
}

impl KnowledgeBase {
    /// Uniformly random assignment drawn from `world_seed`.
    pub fn from_seed(world_seed: u64) -> Self {
        let mut values: Vec<usize> = (0..NUM_VALUES).collect();
        values.shuffle(&mut seed::rng(seed::derive(world_seed, &[0x3b])));
        values.truncate(NUM_KEYS);
        Self { values }
    }

    /// Recovers the assignment from the facts and history turns of
    /// `episodes`. Keys never mentioned are paired with the unused values in
    /// ascending order. Conflicting facts are rejected.
    pub fn infer(episodes: &[Episode]) -> Result<Self> {
        let mut known: Vec<Option<usize>> = vec![None; NUM_KEYS];
        let facts = episodes.iter().flat_map(|e| {
            let stated = e.passages.iter().flat_map(|p| {
                p.windows(3)
                    .filter(|w| vocab::is_key(w[0]) && w[1] == IS && vocab::is_value(w[2]))
                    .map(|w| (w[0], w[2]))
                    .collect::<Vec<_>>()
            });
            stated.chain(e.history.iter().copied())
        });
        for (k, v) in facts {
            let (k, v) = (k - vocab::key(0), v - vocab::value(0));
            match known[k] {
                Some(prev) if prev != v => {
                    return Err(SaluError::Invalid(format!(
                        "facts disagree on key K{k:02}: V{prev:02} and V{v:02}"
                    )))
                }
                _ => known[k] = Some(v),
            }
        }
        let used: BTreeSet<usize> = known.iter().flatten().copied().collect();
        if used.len() != known.iter().flatten().count() {
            return Err(SaluError::Invalid("two keys share one value".into()));
        }
        let mut free = (0..NUM_VALUES).filter(|v| !used.contains(v));
        let values = known
            .into_iter()
            .map(|v| v.unwrap_or_else(|| free.next().expect("enough values")))
            .collect();
        Ok(Self { values })
    }

    pub fn value_of(&self, key: TokenId) -> TokenId {
        vocab::value(self.values[key - vocab::key(0)])
    }

    /// Value permutation that keeps facts consistent after keys are renamed
    /// through `key_perm`.
    pub fn induced_value_perm(&self, key_perm: &[usize]) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..NUM_VALUES).collect();
        for (k, &v) in self.values.iter().enumerate() {
            perm[v] = self.values[key_perm[k]];
        }
        perm
    }
}

/// [`relabel`] with a uniformly random key permutation and the value
/// permutation it induces through `kb`, so relabeled facts still agree
/// with `kb`.
pub fn random_relabel<R: Rng>(ep: &Episode, kb: &KnowledgeBase, rng: &mut R) -> Episode {
    let (kp, vp) = random_perms(kb, rng);
    relabel(ep, &kp, &vp)
}

/// A uniformly random key permutation and its induced value permutation.
pub fn random_perms<R: Rng>(kb: &KnowledgeBase, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut kp: Vec<usize> = (0..NUM_KEYS).collect();
    kp.shuffle(rng);
    let vp = kb.induced_value_perm(&kp);
    (kp, vp)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_episodes: usize,
    pub na_ratio: f64,
    pub n_passages: usize,
    pub facts_per_passage: usize,
    pub min_history: usize,
    pub max_history: usize,
    /// Selects the knowledge base every fact is drawn from.
    pub world_seed: u64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_episodes: 2560,
            na_ratio: 0.5,
            n_passages: 3,
            facts_per_passage: 2,
            min_history: 0,
            max_history: 2,
            world_seed: 0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Longest prompt this spec can produce.
    pub fn max_prompt_len(&self) -> usize {
        let passage = 1 + self.facts_per_passage * 3 + self.facts_per_passage.saturating_sub(1);
        let passages = self.n_passages * passage + self.n_passages.saturating_sub(1);
        1 + self.max_history * TURN_LEN + 1 + QUESTION_LEN + 1 + passages + 1
    }

    pub fn n_unanswerable(&self) -> usize {
        (self.n_episodes as f64 * self.na_ratio).round() as usize
    }

    /// Checks these settings against the vocabulary and a sequence budget that
    /// must also hold a response of `response_budget` tokens.
    pub fn validate(&self, max_seq_len: usize, response_budget: usize) -> Result<()> {
        let bad = |m: String| Err(SaluError::Config(m));
        if self.n_episodes < 10 {
            return bad(format!("n_episodes must be at least 10, got {}", self.n_episodes));
        }
        if !(0.0..=1.0).contains(&self.na_ratio) {
            return bad(format!("na_ratio must lie in [0, 1], got {}", self.na_ratio));
        }
        if self.n_passages == 0 || self.facts_per_passage == 0 {
            return bad("need at least one passage with one fact".into());
        }
        if self.min_history > self.max_history {
            return bad("min_history exceeds max_history".into());
        }
        let facts = self.n_passages * self.facts_per_passage;
        // Unanswerable episodes need one key that no passage mentions, and
        // history keys are drawn from keys other than the question.
        if facts + 1 > NUM_KEYS {
            return bad(format!(
                "{facts} facts per episode need more than the {NUM_KEYS} available keys"
            ));
        }
        if self.max_history > 0 && NUM_KEYS < 2 {
            return bad("history needs at least two keys".into());
        }
        let len = self.max_prompt_len() + response_budget;
        if len > max_seq_len {
            return bad(format!(
                "prompt of up to {} tokens plus {response_budget} response tokens exceeds max_seq_len {max_seq_len}",
                self.max_prompt_len()
            ));
        }
        Ok(())
    }
}

/// Indices of the train / validation / test episodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub episodes: Vec<Episode>,
    pub split: Split,
}

impl Dataset {
    fn pick(&self, idx: &[usize]) -> Vec<Episode> {
        idx.iter().map(|&i| self.episodes[i].clone()).collect()
    }

    pub fn train(&self) -> Vec<Episode> {
        self.pick(&self.split.train)
    }

    pub fn val(&self) -> Vec<Episode> {
        self.pick(&self.split.val)
    }

    pub fn test(&self) -> Vec<Episode> {
        self.pick(&self.split.test)
    }
}

/// Default response budget reserved when validating prompt lengths.
pub const RESPONSE_BUDGET: usize = 4;

fn make_episode<R: Rng>(
    rng: &mut R,
    spec: &DatasetSpec,
    kb: &KnowledgeBase,
    id: u64,
    answerable: bool,
) -> Episode {
    let n_facts = spec.n_passages * spec.facts_per_passage;
    let mut keys: Vec<usize> = (0..NUM_KEYS).collect();
    keys.shuffle(rng);
    let fact_keys = &keys[..n_facts];
    let facts: Vec<(TokenId, TokenId)> = fact_keys
        .iter()
        .map(|&k| (vocab::key(k), kb.value_of(vocab::key(k))))
        .collect();
    let (question, gold) = if answerable {
        let (k, v) = *facts.choose(rng).expect("at least one fact");
        (k, Gold::Answer(v))
    } else {
        (vocab::key(keys[n_facts]), Gold::Unanswerable)
    };
    let passages: Vec<Vec<TokenId>> = facts
        .chunks(spec.facts_per_passage)
        .map(|chunk| {
            let mut p = vec![vocab::filler(rng.random_range(0..NUM_FILLERS))];
            for (i, &(k, v)) in chunk.iter().enumerate() {
                if i > 0 {
                    p.push(DOT);
                }
                p.extend_from_slice(&[k, IS, v]);
            }
            p
        })
        .collect();
    let passage_labels = passages.iter().map(|p| lookup(p, question).is_some()).collect();
    let turns = rng.random_range(spec.min_history..=spec.max_history);
    let history = (0..turns)
        .map(|_| {
            let k = loop {
                let k = vocab::key(rng.random_range(0..NUM_KEYS));
                if k != question {
                    break k;
                }
            };
            (k, kb.value_of(k))
        })
        .collect();
    Episode {
        id,
        history,
        question,
        passages,
        gold,
        passage_labels,
    }
}

fn split_counts(n: usize) -> (usize, usize) {
    let train = (n as f64 * 0.8).round() as usize;
    let val = ((n as f64 * 0.1).round() as usize).min(n - train);
    (train, val)
}

/// Generates `spec.n_episodes` episodes with exactly
/// `round(n · na_ratio)` unanswerable ones, plus a stratified 80/10/10
/// split. Every (question, passages) pair is unique within the dataset, so
/// no test prompt content also appears in training.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate(crate::model::ModelConfig::default().max_seq_len, RESPONSE_BUDGET)?;
    let n = spec.n_episodes;
    let n_na = spec.n_unanswerable();
    let kb = KnowledgeBase::from_seed(spec.world_seed);
    let mut master = seed::rng(seed::derive(spec.seed, &[0xda7a]));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut master);
    let mut unanswerable = vec![false; n];
    for &i in &order[..n_na] {
        unanswerable[i] = true;
    }

    let mut seen = BTreeSet::new();
    let mut episodes = Vec::with_capacity(n);
    for (i, &na) in unanswerable.iter().enumerate() {
        let mut attempt = 0u64;
        let ep = loop {
            let mut rng = seed::rng(seed::derive(spec.seed, &[i as u64, attempt]));
            let ep = make_episode(&mut rng, spec, &kb, i as u64, !na);
            if seen.insert((ep.question, ep.passages.clone())) {
                break ep;
            }
            attempt += 1;
            if attempt > 1000 {
                return Err(SaluError::Config(
                    "could not generate distinct episodes; spec too small".into(),
                ));
            }
        };
        episodes.push(ep);
    }

    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..n).filter(|&i| unanswerable[i] == class).collect();
        idx.shuffle(&mut master);
        let (tr, va) = split_counts(idx.len());
        split.train.extend_from_slice(&idx[..tr]);
        split.val.extend_from_slice(&idx[tr..tr + va]);
        split.test.extend_from_slice(&idx[tr + va..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(Dataset {
        spec: spec.clone(),
        episodes,
        split,
    })
}

/// A preferred / dispreferred response pair for one episode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreferencePair {
    pub episode_id: u64,
    pub preferred: Vec<TokenId>,
    pub dispreferred: Vec<TokenId>,
    pub rule: PreferenceRule,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferenceRule {
    /// Unanswerable: abstention beats a fabricated answer.
    AbstainOverFabrication,
    /// Answerable: the correct value beats a wrong one.
    AnswerOverWrong,
    /// Answerable: the correct value beats abstaining.
    AnswerOverAbstention,
}

/// Builds `negatives_per_episode` pairs per episode.
///
/// Unanswerable episodes prefer `[NA, EOS]` over fabricated values.
/// Answerable episodes alternate wrong values (even slots) and the
/// abstention (odd slots) as the dispreferred side. Fabricated and wrong
/// values are distinct within an episode and never equal the gold value.
pub fn synthesize_preferences(
    episodes: &[Episode],
    negatives_per_episode: usize,
    seed: u64,
) -> Vec<PreferencePair> {
    let mut pairs = Vec::with_capacity(episodes.len() * negatives_per_episode);
    for ep in episodes {
        let mut rng = seed::rng(seed::derive(seed, &[ep.id]));
        let gold_value = match ep.gold {
            Gold::Answer(v) => Some(v),
            Gold::Unanswerable => None,
        };
        let mut wrong: Vec<TokenId> = (0..NUM_VALUES)
            .map(vocab::value)
            .filter(|&v| Some(v) != gold_value)
            .collect();
        wrong.shuffle(&mut rng);
        let mut wrong = wrong.into_iter().cycle();
        for slot in 0..negatives_per_episode {
            let pair = match gold_value {
                None => PreferencePair {
                    episode_id: ep.id,
                    preferred: ABSTENTION.to_vec(),
                    dispreferred: vec![wrong.next().expect("cycle"), EOS],
                    rule: PreferenceRule::AbstainOverFabrication,
                },
                Some(v) if slot % 2 == 0 => PreferencePair {
                    episode_id: ep.id,
                    preferred: vec![v, EOS],
                    dispreferred: vec![wrong.next().expect("cycle"), EOS],
                    rule: PreferenceRule::AnswerOverWrong,
                },
                Some(v) => PreferencePair {
                    episode_id: ep.id,
                    preferred: vec![v, EOS],
                    dispreferred: ABSTENTION.to_vec(),
                    rule: PreferenceRule::AnswerOverAbstention,
                },
            };
            pairs.push(pair);
        }
    }
    pairs
}

// ---------------------------------------------------------------------------
// JSON Lines I/O

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum GoldRecord {
    Answer { answer: String },
    Unanswerable { unanswerable: bool },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeRecord {
    id: u64,
    history: Vec<[String; 2]>,
    question: String,
    passages: Vec<Vec<String>>,
    gold: GoldRecord,
    passage_labels: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    episode_id: u64,
    preferred: Vec<String>,
    dispreferred: Vec<String>,
    rule: PreferenceRule,
}

fn strs(ids: &[TokenId]) -> Vec<String> {
    ids.iter().map(|&t| vocab::token_str(t)).collect()
}

fn ids(strs: &[String]) -> Result<Vec<TokenId>> {
    strs.iter().map(|s| vocab::parse_token(s)).collect()
}

impl From<&Episode> for EpisodeRecord {
    fn from(ep: &Episode) -> Self {
        Self {
            id: ep.id,
            history: ep
                .history
                .iter()
                .map(|&(q, a)| [vocab::token_str(q), vocab::token_str(a)])
                .collect(),
            question: vocab::token_str(ep.question),
            passages: ep.passages.iter().map(|p| strs(p)).collect(),
            gold: match ep.gold {
                Gold::Answer(v) => GoldRecord::Answer {
                    answer: vocab::token_str(v),
                },
                Gold::Unanswerable => GoldRecord::Unanswerable { unanswerable: true },
            },
            passage_labels: ep.passage_labels.clone(),
        }
    }
}

impl EpisodeRecord {
    fn into_episode(self) -> Result<Episode> {
        let question = vocab::parse_token(&self.question)?;
        let passages = self
            .passages
            .iter()
            .map(|p| ids(p))
            .collect::<Result<Vec<_>>>()?;
        let gold = match self.gold {
            GoldRecord::Answer { answer } => Gold::Answer(vocab::parse_token(&answer)?),
            GoldRecord::Unanswerable { unanswerable: true } => Gold::Unanswerable,
            GoldRecord::Unanswerable { unanswerable: false } => {
                return Err(SaluError::Invalid("gold.unanswerable must be true".into()))
            }
        };
        if passages.len() != self.passage_labels.len() {
            return Err(SaluError::Invalid(
                "passage_labels length differs from passages".into(),
            ));
        }
        let history = self
            .history
            .iter()
            .map(|[q, a]| Ok((vocab::parse_token(q)?, vocab::parse_token(a)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Episode {
            id: self.id,
            history,
            question,
            passages,
            gold,
            passage_labels: self.passage_labels,
        })
    }
}

pub fn episode_to_json(ep: &Episode) -> String {
    serde_json::to_string(&EpisodeRecord::from(ep)).expect("episode serializes")
}

pub fn episode_from_json(line: &str) -> Result<Episode> {
    let rec: EpisodeRecord =
        serde_json::from_str(line).map_err(|e| SaluError::Invalid(e.to_string()))?;
    rec.into_episode()
}

pub fn pair_to_json(p: &PreferencePair) -> String {
    serde_json::to_string(&PairRecord {
        episode_id: p.episode_id,
        preferred: strs(&p.preferred),
        dispreferred: strs(&p.dispreferred),
        rule: p.rule,
    })
    .expect("pair serializes")
}

pub fn pair_from_json(line: &str) -> Result<PreferencePair> {
    let rec: PairRecord =
        serde_json::from_str(line).map_err(|e| SaluError::Invalid(e.to_string()))?;
    let pair = PreferencePair {
        episode_id: rec.episode_id,
        preferred: ids(&rec.preferred)?,
        dispreferred: ids(&rec.dispreferred)?,
        rule: rec.rule,
    };
    if pair.preferred == pair.dispreferred
        || pair.preferred.last() != Some(&EOS)
        || pair.dispreferred.last() != Some(&EOS)
    {
        return Err(SaluError::Invalid(
            "pair responses must differ and end with [EOS]".into(),
        ));
    }
    Ok(pair)
}

fn write_lines<T>(path: &Path, items: &[T], f: impl Fn(&T) -> String) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for it in items {
        writeln!(w, "{}", f(it))?;
    }
    w.flush()?;
    Ok(())
}

/// Parses one record per non-empty line. Errors carry the 1-based line
/// number and the last line that parsed cleanly.
pub fn read_lines<T, R: BufRead>(r: R, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let mut out = Vec::new();
    let mut last_good = 0;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse(&line) {
            Ok(v) => {
                out.push(v);
                last_good = i + 1;
            }
            Err(e) => {
                return Err(SaluError::Parse {
                    line: i + 1,
                    reason: format!("{e} (last good line: {last_good})"),
                })
            }
        }
    }
    Ok(out)
}

pub fn save_episodes(path: &Path, episodes: &[Episode]) -> Result<()> {
    write_lines(path, episodes, episode_to_json)
}

pub fn load_episodes(path: &Path) -> Result<Vec<Episode>> {
    read_lines(BufReader::new(File::open(path)?), episode_from_json)
}

pub fn save_pairs(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    write_lines(path, pairs, pair_to_json)
}

pub fn load_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    read_lines(BufReader::new(File::open(path)?), pair_from_json)
}
