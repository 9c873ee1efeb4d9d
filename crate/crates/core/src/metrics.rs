//! Answer-or-abstain evaluation.
//!
//! A response counts as an abstention only when it is exactly `[NA, EOS]`;
//! anything else is an answer attempt. For the unanswerability metrics the
//! positive class is "unanswerable" and a prediction is positive when the
//! model abstained.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{generate_dataset, gold_target, DatasetSpec, Episode, Gold};
use crate::error::{Result, SaluError};
use crate::model::{DecodeMode, LanguageModel};
use crate::vocab::{TokenId, ABSTENTION, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    CorrectAnswer,
    WrongAnswer,
    Hallucination,
    CorrectAbstention,
    OverAbstention,
}

impl Outcome {
    pub const ALL: [Outcome; 5] = [
        Outcome::CorrectAnswer,
        Outcome::WrongAnswer,
        Outcome::Hallucination,
        Outcome::CorrectAbstention,
        Outcome::OverAbstention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::CorrectAnswer => "correct_answer",
            Self::WrongAnswer => "wrong_answer",
            Self::Hallucination => "hallucination",
            Self::CorrectAbstention => "correct_abstention",
            Self::OverAbstention => "over_abstention",
        }
    }

    pub fn is_correct(self) -> bool {
        matches!(self, Outcome::CorrectAnswer | Outcome::CorrectAbstention)
    }

    pub fn abstained(self) -> bool {
        matches!(self, Outcome::CorrectAbstention | Outcome::OverAbstention)
    }
}

pub fn is_abstention(response: &[TokenId]) -> bool {
    response == ABSTENTION
}

/// Total over (gold, response): every pair lands in exactly one outcome.
pub fn classify_response(episode: &Episode, response: &[TokenId]) -> Outcome {
    match (episode.gold, is_abstention(response)) {
        (Gold::Unanswerable, true) => Outcome::CorrectAbstention,
        (Gold::Unanswerable, false) => Outcome::Hallucination,
        (Gold::Answer(_), true) => Outcome::OverAbstention,
        (Gold::Answer(_), false) if response == gold_target(episode) => Outcome::CorrectAnswer,
        (Gold::Answer(_), false) => Outcome::WrongAnswer,
    }
}

/// Confusion counts with "unanswerable" as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_outcomes(outcomes: &[Outcome]) -> Self {
        let mut c = Confusion::default();
        for o in outcomes {
            match o {
                Outcome::CorrectAbstention => c.tp += 1,
                Outcome::OverAbstention => c.fp += 1,
                Outcome::Hallucination => c.fn_ += 1,
                Outcome::CorrectAnswer | Outcome::WrongAnswer => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// `num / den`, or 0 with a warning when the denominator is 0.
fn ratio(num: usize, den: usize, what: &str) -> f64 {
    if den == 0 {
        warn!("degenerate denominator for {what}; reporting 0");
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_confusion(c: &Confusion) -> Self {
        let precision = ratio(c.tp, c.tp + c.fp, "precision");
        let recall = ratio(c.tp, c.tp + c.fn_, "recall");
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            accuracy: ratio(c.tp + c.tn, c.total(), "accuracy"),
            precision,
            recall,
            f1,
        }
    }
}

pub fn unanswerability_prf(outcomes: &[Outcome]) -> Prf {
    Prf::from_confusion(&Confusion::from_outcomes(outcomes))
}

/// Multiset token overlap F1 with `[EOS]` stripped from both sides.
pub fn token_f1(prediction: &[TokenId], gold: &[TokenId]) -> f64 {
    let strip = |s: &[TokenId]| -> Vec<TokenId> { s.iter().copied().filter(|&t| t != EOS).collect() };
    let (p, g) = (strip(prediction), strip(gold));
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<TokenId, usize> = BTreeMap::new();
    for t in &g {
        *counts.entry(*t).or_default() += 1;
    }
    let mut common = 0;
    for t in &p {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Exact match with `[EOS]` excluded from both sides.
pub fn exact_match(prediction: &[TokenId], gold: &[TokenId]) -> bool {
    let strip = |s: &[TokenId]| s.iter().copied().filter(|&t| t != EOS).collect::<Vec<_>>();
    strip(prediction) == strip(gold)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnswerQuality {
    pub exact_match: f64,
    pub token_f1: f64,
    /// Answerable episodes on which an answer was attempted.
    pub attempted: usize,
}

/// EM and token-F1 over answerable episodes where the model did not abstain.
pub fn answer_quality(episodes: &[Episode], responses: &[Vec<TokenId>]) -> AnswerQuality {
    let mut em = 0.0;
    let mut f1 = 0.0;
    let mut n = 0;
    for (ep, r) in episodes.iter().zip(responses) {
        if !ep.is_answerable() || is_abstention(r) {
            continue;
        }
        let gold = gold_target(ep);
        em += f64::from(u8::from(exact_match(r, &gold)));
        f1 += token_f1(r, &gold);
        n += 1;
    }
    if n == 0 {
        warn!("no attempted answers on answerable episodes; answer quality reported as 0");
        return AnswerQuality::default();
    }
    AnswerQuality {
        exact_match: em / n as f64,
        token_f1: f1 / n as f64,
        attempted: n,
    }
}

/// Fraction of unanswerable episodes that received a non-abstention.
pub fn hallucination_rate(outcomes: &[Outcome]) -> Result<f64> {
    let unanswerable = outcomes
        .iter()
        .filter(|o| matches!(o, Outcome::Hallucination | Outcome::CorrectAbstention))
        .count();
    if unanswerable == 0 {
        return Err(SaluError::Invalid(
            "hallucination rate needs at least one unanswerable episode".into(),
        ));
    }
    let h = outcomes.iter().filter(|&&o| o == Outcome::Hallucination).count();
    Ok(h as f64 / unanswerable as f64)
}

pub fn overall_accuracy(outcomes: &[Outcome]) -> f64 {
    let correct = outcomes.iter().filter(|o| o.is_correct()).count();
    ratio(correct, outcomes.len(), "overall accuracy")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeHistogram {
    pub correct_answer: usize,
    pub wrong_answer: usize,
    pub hallucination: usize,
    pub correct_abstention: usize,
    pub over_abstention: usize,
}

impl OutcomeHistogram {
    pub fn from_outcomes(outcomes: &[Outcome]) -> Self {
        let mut h = Self::default();
        for o in outcomes {
            *h.slot(*o) += 1;
        }
        h
    }

    fn slot(&mut self, o: Outcome) -> &mut usize {
        match o {
            Outcome::CorrectAnswer => &mut self.correct_answer,
            Outcome::WrongAnswer => &mut self.wrong_answer,
            Outcome::Hallucination => &mut self.hallucination,
            Outcome::CorrectAbstention => &mut self.correct_abstention,
            Outcome::OverAbstention => &mut self.over_abstention,
        }
    }

    pub fn total(&self) -> usize {
        self.correct_answer
            + self.wrong_answer
            + self.hallucination
            + self.correct_abstention
            + self.over_abstention
    }
}

/// Failure modes of the error analysis. Synthetic unanswerable episodes
/// always carry facts about other keys, so every hallucination is of the
/// "looks answerable but is not" kind; over-abstention is kept apart, and
/// wrong answers to answerable questions are reported on their own.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub hallucination: usize,
    pub over_abstention: usize,
    pub wrong_answer: usize,
}

impl ErrorBreakdown {
    pub fn total(&self) -> usize {
        self.hallucination + self.over_abstention + self.wrong_answer
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }
}

pub fn error_breakdown(episodes: &[Episode], responses: &[Vec<TokenId>]) -> ErrorBreakdown {
    let mut b = ErrorBreakdown::default();
    for (ep, r) in episodes.iter().zip(responses) {
        match classify_response(ep, r) {
            Outcome::Hallucination => b.hallucination += 1,
            Outcome::OverAbstention => b.over_abstention += 1,
            Outcome::WrongAnswer => b.wrong_answer += 1,
            Outcome::CorrectAnswer | Outcome::CorrectAbstention => {}
        }
    }
    b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_episodes: usize,
    pub unanswerability: Prf,
    pub answerable_em: f64,
    pub answerable_f1: f64,
    pub overall_accuracy: f64,
    /// `None` when the evaluation set has no unanswerable episodes.
    pub hallucination_rate: Option<f64>,
    pub outcomes: OutcomeHistogram,
    pub errors: ErrorBreakdown,
    /// Cells computed from a zero denominator.
    pub degenerate: Vec<String>,
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn from_responses(episodes: &[Episode], responses: &[Vec<TokenId>]) -> Result<Self> {
        if episodes.is_empty() || episodes.len() != responses.len() {
            return Err(SaluError::Invalid(format!(
                "need one response per episode ({} episodes, {} responses)",
                episodes.len(),
                responses.len()
            )));
        }
        let outcomes: Vec<Outcome> = episodes
            .iter()
            .zip(responses)
            .map(|(e, r)| classify_response(e, r))
            .collect();
        let confusion = Confusion::from_outcomes(&outcomes);
        let quality = answer_quality(episodes, responses);
        let mut degenerate = Vec::new();
        if confusion.tp + confusion.fp == 0 {
            degenerate.push("unanswerability.precision".to_string());
        }
        if confusion.tp + confusion.fn_ == 0 {
            degenerate.push("unanswerability.recall".to_string());
        }
        if quality.attempted == 0 {
            degenerate.push("answerable_f1".to_string());
        }
        Ok(Self {
            n_episodes: episodes.len(),
            unanswerability: Prf::from_confusion(&confusion),
            answerable_em: quality.exact_match,
            answerable_f1: quality.token_f1,
            overall_accuracy: overall_accuracy(&outcomes),
            hallucination_rate: hallucination_rate(&outcomes).ok(),
            outcomes: OutcomeHistogram::from_outcomes(&outcomes),
            errors: error_breakdown(episodes, responses),
            degenerate,
            config: serde_json::Value::Null,
        })
    }

    pub fn with_config(mut self, config: serde_json::Value) -> Self {
        self.config = config;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Main-results style row: unanswerability acc/prec/rec/F1, answerable
    /// F1 and overall accuracy.
    pub fn main_row(&self) -> [f64; 6] {
        let u = &self.unanswerability;
        [
            u.accuracy,
            u.precision,
            u.recall,
            u.f1,
            self.answerable_f1,
            self.overall_accuracy,
        ]
    }
}

pub const MAIN_TABLE_HEADER: [&str; 6] = [
    "Unanswerability Acc.",
    "Unanswerability Prec.",
    "Unanswerability Rec.",
    "Unanswerability F1",
    "Answerable QA F1",
    "Overall Acc.",
];

/// Three-decimal cell formatting used by every table.
pub fn cell(v: f64) -> String {
    format!("{v:.3}")
}

/// Markdown table with one row per (name, report).
pub fn main_table_markdown(rows: &[(String, &MetricsReport)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "| Method | {} |", MAIN_TABLE_HEADER.join(" | "));
    let _ = writeln!(s, "|---{}|", "|---:".repeat(MAIN_TABLE_HEADER.len()));
    for (name, r) in rows {
        let cells: Vec<String> = r.main_row().iter().map(|&v| cell(v)).collect();
        let _ = writeln!(s, "| {name} | {} |", cells.join(" | "));
    }
    s
}

/// Greedy responses of `model` for every episode, in input order.
/// Episodes are decoded in parallel on the current rayon pool.
pub fn generate_responses(
    model: &LanguageModel,
    episodes: &[Episode],
    max_new: usize,
) -> Result<Vec<Vec<TokenId>>> {
    episodes
        .par_iter()
        .map(|e| model.decode(&e.prompt(), DecodeMode::Greedy, max_new))
        .collect()
}

/// Greedy-decodes every episode and scores the responses.
pub fn evaluate(model: &LanguageModel, episodes: &[Episode], max_new: usize) -> Result<MetricsReport> {
    let responses = generate_responses(model, episodes, max_new)?;
    MetricsReport::from_responses(episodes, &responses)
}

/// NA ratios of the composition sweep.
pub const SWEEP_RATIOS: [f64; 4] = [0.2, 0.3, 0.5, 0.7];

pub const SWEEP_TABLE_HEADER: [&str; 4] = [
    "NA Example Ratio in SFT",
    "Unanswerability F1",
    "Answerable QA F1",
    "Overall Accuracy",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepScores {
    pub unanswerability_f1: f64,
    pub answerable_f1: f64,
    pub overall_accuracy: f64,
}

/// One sweep row; a failed cell keeps its error message.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub na_ratio: f64,
    pub scores: std::result::Result<SweepScores, String>,
}

/// Trains one model per NA ratio and scores each on the shared `test` set.
///
/// Every ratio uses `base` with only `na_ratio` replaced, so the dataset and
/// training seeds are shared. Training episodes whose (question, passages)
/// also occur in `test` are dropped. `train` receives the ratio and the
/// train / validation episodes.
pub fn composition_sweep<F>(
    base: &DatasetSpec,
    ratios: &[f64],
    test: &[Episode],
    max_new: usize,
    mut train: F,
) -> Result<Vec<SweepCell>>
where
    F: FnMut(f64, &[Episode], &[Episode]) -> Result<LanguageModel>,
{
    let n_na = test.iter().filter(|e| !e.is_answerable()).count();
    if test.is_empty() || 2 * n_na != test.len() {
        return Err(SaluError::Invalid(format!(
            "sweep test set must be exactly half unanswerable ({n_na} of {})",
            test.len()
        )));
    }
    let held: BTreeSet<(TokenId, &Vec<Vec<TokenId>>)> =
        test.iter().map(|e| (e.question, &e.passages)).collect();
    let fresh = |eps: Vec<Episode>| -> Vec<Episode> {
        eps.into_iter()
            .filter(|e| !held.contains(&(e.question, &e.passages)))
            .collect()
    };
    let mut cells = Vec::with_capacity(ratios.len());
    for &na_ratio in ratios {
        let spec = DatasetSpec {
            na_ratio,
            ..base.clone()
        };
        let scores = generate_dataset(&spec)
            .and_then(|ds| {
                let model = train(na_ratio, &fresh(ds.train()), &fresh(ds.val()))?;
                evaluate(&model, test, max_new)
            })
            .map(|r| SweepScores {
                unanswerability_f1: r.unanswerability.f1,
                answerable_f1: r.answerable_f1,
                overall_accuracy: r.overall_accuracy,
            })
            .map_err(|e| {
                warn!("sweep cell na_ratio={na_ratio} failed: {e}");
                e.to_string()
            });
        cells.push(SweepCell { na_ratio, scores });
    }
    Ok(cells)
}

/// Markdown sweep table; failed cells render as `error`.
pub fn sweep_table_markdown(cells: &[SweepCell]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "| {} |", SWEEP_TABLE_HEADER.join(" | "));
    let _ = writeln!(s, "|---{}|", "|---:".repeat(SWEEP_TABLE_HEADER.len() - 1));
    for c in cells {
        let ratio = format!("{:.0}%", c.na_ratio * 100.0);
        match &c.scores {
            Ok(v) => {
                let _ = writeln!(
                    s,
                    "| {ratio} | {} | {} | {} |",
                    cell(v.unanswerability_f1),
                    cell(v.answerable_f1),
                    cell(v.overall_accuracy)
                );
            }
            Err(_) => {
                let _ = writeln!(s, "| {ratio} | error | error | error |");
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{key, value, NA};

    fn ep(gold: Gold) -> Episode {
        Episode {
            id: 0,
            history: vec![],
            question: key(0),
            passages: vec![],
            gold,
            passage_labels: vec![],
        }
    }

    #[test]
    fn classification_examples() {
        let na = ep(Gold::Unanswerable);
        let ans = ep(Gold::Answer(value(11)));
        assert_eq!(classify_response(&na, &[NA, EOS]), Outcome::CorrectAbstention);
        assert_eq!(classify_response(&na, &[value(5), EOS]), Outcome::Hallucination);
        assert_eq!(classify_response(&ans, &[value(11), EOS]), Outcome::CorrectAnswer);
        assert_eq!(classify_response(&ans, &[value(10), EOS]), Outcome::WrongAnswer);
        assert_eq!(classify_response(&ans, &[NA, EOS]), Outcome::OverAbstention);
        // Abstention needs the exact sequence.
        assert_eq!(classify_response(&na, &[NA]), Outcome::Hallucination);
        assert_eq!(classify_response(&ans, &[value(11)]), Outcome::WrongAnswer);
    }

    #[test]
    fn confusion_example() {
        let mut o = vec![Outcome::CorrectAbstention; 3];
        o.push(Outcome::OverAbstention);
        o.push(Outcome::Hallucination);
        o.extend([Outcome::CorrectAnswer; 5]);
        let m = unanswerability_prf(&o);
        assert_eq!(m.precision, 0.75);
        assert_eq!(m.recall, 0.75);
        assert!((m.f1 - 0.75).abs() < 1e-15);
        assert_eq!(m.accuracy, 0.8);
    }

    #[test]
    fn perfect_and_degenerate() {
        let perfect = [Outcome::CorrectAbstention, Outcome::CorrectAnswer];
        let m = unanswerability_prf(&perfect);
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
        let never = [Outcome::Hallucination, Outcome::CorrectAnswer];
        let m = unanswerability_prf(&never);
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn token_f1_overlap() {
        let (a, b, c, d) = (value(0), value(1), value(2), value(3));
        let f = token_f1(&[b, c, d], &[a, b, c]);
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(token_f1(&[a, EOS], &[a, EOS]), 1.0);
        assert!(exact_match(&[a, EOS], &[a]));
    }

    #[test]
    fn hallucination_rate_counts() {
        let mut o = vec![Outcome::Hallucination; 2];
        o.extend([Outcome::CorrectAbstention; 8]);
        o.extend([Outcome::WrongAnswer; 4]);
        assert_eq!(hallucination_rate(&o).unwrap(), 0.2);
        assert!(hallucination_rate(&[Outcome::CorrectAnswer]).is_err());
    }

    #[test]
    fn abstained_answerables_leave_quality_denominator() {
        let eps = vec![ep(Gold::Answer(value(1))), ep(Gold::Answer(value(2)))];
        let responses = vec![vec![value(1), EOS], vec![NA, EOS]];
        let q = answer_quality(&eps, &responses);
        assert_eq!(q.attempted, 1);
        assert_eq!(q.exact_match, 1.0);
        let r = MetricsReport::from_responses(&eps, &responses).unwrap();
        assert_eq!(r.errors.over_abstention, 1);
        assert_eq!(r.hallucination_rate, None);
    }

    #[test]
    fn breakdown_counting_identity() {
        let eps = vec![
            ep(Gold::Answer(value(1))),
            ep(Gold::Answer(value(2))),
            ep(Gold::Unanswerable),
            ep(Gold::Unanswerable),
        ];
        let responses = vec![
            vec![value(1), EOS],
            vec![value(3), EOS],
            vec![value(4), EOS],
            vec![NA, EOS],
        ];
        let b = error_breakdown(&eps, &responses);
        assert_eq!(b.total(), 4 - 1 - 1);
        let perfect = vec![vec![value(1), EOS], vec![value(2), EOS], vec![NA, EOS], vec![NA, EOS]];
        assert!(error_breakdown(&eps, &perfect).is_empty());
    }
}
