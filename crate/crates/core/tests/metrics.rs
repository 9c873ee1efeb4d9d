use proptest::prelude::*;
use salu_core::corpus::{Episode, Gold};
use salu_core::metrics::{
    answer_quality, classify_response, exact_match, hallucination_rate, overall_accuracy, token_f1,
    unanswerability_prf, MetricsReport, Outcome, OutcomeHistogram,
};
use salu_core::vocab::{key, value, ABSTENTION, EOS, NA};

fn episode(id: u64, gold: Gold) -> Episode {
    Episode {
        id,
        history: vec![],
        question: key(0),
        passages: vec![],
        gold,
        passage_labels: vec![],
    }
}

/// Reference confusion counts from a literal truth table over outcomes.
fn brute_counts(outcomes: &[Outcome]) -> (f64, f64, f64, f64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0.0, 0.0, 0.0, 0.0);
    for o in outcomes {
        let gold_unanswerable = matches!(o, Outcome::Hallucination | Outcome::CorrectAbstention);
        let predicted_unanswerable = matches!(o, Outcome::CorrectAbstention | Outcome::OverAbstention);
        match (gold_unanswerable, predicted_unanswerable) {
            (true, true) => tp += 1.0,
            (false, true) => fp += 1.0,
            (true, false) => fn_ += 1.0,
            (false, false) => tn += 1.0,
        }
    }
    (tp, fp, fn_, tn)
}

/// Overlap by greedy matching with a used-flag per gold token.
fn brute_token_f1(p: &[usize], g: &[usize]) -> f64 {
    let p: Vec<usize> = p.iter().copied().filter(|&t| t != EOS).collect();
    let g: Vec<usize> = g.iter().copied().filter(|&t| t != EOS).collect();
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    let mut used = vec![false; g.len()];
    let mut common = 0usize;
    for t in &p {
        if let Some(j) = (0..g.len()).find(|&j| !used[j] && g[j] == *t) {
            used[j] = true;
            common += 1;
        }
    }
    if common == 0 {
        return 0.0;
    }
    let prec = common as f64 / p.len() as f64;
    let rec = common as f64 / g.len() as f64;
    2.0 * prec * rec / (prec + rec)
}

fn outcome_strategy() -> impl Strategy<Value = Outcome> {
    prop::sample::select(Outcome::ALL.to_vec())
}

fn token_strategy() -> impl Strategy<Value = usize> {
    prop_oneof![Just(EOS), Just(NA), (0usize..4).prop_map(value)]
}

#[test]
fn classification_truth_table() {
    let ans = episode(0, Gold::Answer(value(3)));
    let un = episode(1, Gold::Unanswerable);
    assert_eq!(classify_response(&ans, &[value(3), EOS]), Outcome::CorrectAnswer);
    assert_eq!(classify_response(&ans, &[value(4), EOS]), Outcome::WrongAnswer);
    assert_eq!(classify_response(&ans, &[value(3)]), Outcome::WrongAnswer);
    assert_eq!(classify_response(&ans, &ABSTENTION), Outcome::OverAbstention);
    assert_eq!(classify_response(&un, &ABSTENTION), Outcome::CorrectAbstention);
    assert_eq!(classify_response(&un, &[NA]), Outcome::Hallucination);
    assert_eq!(classify_response(&un, &[value(0), EOS]), Outcome::Hallucination);
}

#[test]
fn hand_computed_prf() {
    let o = [
        Outcome::CorrectAbstention,
        Outcome::CorrectAbstention,
        Outcome::OverAbstention,
        Outcome::Hallucination,
        Outcome::CorrectAnswer,
    ];
    let prf = unanswerability_prf(&o);
    assert_eq!(prf.precision, 2.0 / 3.0);
    assert_eq!(prf.recall, 2.0 / 3.0);
    assert!((prf.f1 - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(prf.accuracy, 3.0 / 5.0);
    assert_eq!(overall_accuracy(&o), 3.0 / 5.0);
    assert_eq!(hallucination_rate(&o).unwrap(), 1.0 / 3.0);
}

#[test]
fn hallucination_rate_needs_unanswerables() {
    assert!(hallucination_rate(&[Outcome::CorrectAnswer, Outcome::OverAbstention]).is_err());
}

#[test]
fn answer_quality_skips_abstentions_and_unanswerables() {
    let eps = vec![
        episode(0, Gold::Answer(value(1))),
        episode(1, Gold::Answer(value(2))),
        episode(2, Gold::Answer(value(3))),
        episode(3, Gold::Unanswerable),
    ];
    let responses = vec![
        vec![value(1), EOS],
        vec![value(9), EOS],
        ABSTENTION.to_vec(),
        vec![value(0), EOS],
    ];
    let q = answer_quality(&eps, &responses);
    assert_eq!(q.attempted, 2);
    assert_eq!(q.exact_match, 0.5);
    assert_eq!(q.token_f1, 0.5);
}

#[test]
fn report_counts_match_outcomes() {
    let eps = vec![episode(0, Gold::Answer(value(1))), episode(1, Gold::Unanswerable)];
    let responses = vec![vec![value(1), EOS], vec![value(1), EOS]];
    let r = MetricsReport::from_responses(&eps, &responses).unwrap();
    assert_eq!(r.n_episodes, 2);
    assert_eq!(r.hallucination_rate, Some(1.0));
    assert_eq!(r.overall_accuracy, 0.5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn prf_matches_brute_force(outcomes in prop::collection::vec(outcome_strategy(), 1..60)) {
        let (tp, fp, fn_, tn) = brute_counts(&outcomes);
        let n = outcomes.len() as f64;
        let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
        let p = div(tp, tp + fp);
        let r = div(tp, tp + fn_);
        let f1 = div(2.0 * p * r, p + r);
        let prf = unanswerability_prf(&outcomes);
        prop_assert_eq!(prf.precision, p);
        prop_assert_eq!(prf.recall, r);
        prop_assert_eq!(prf.f1, f1);
        prop_assert_eq!(prf.accuracy, (tp + tn) / n);
        let correct = outcomes.iter().filter(|o| matches!(o, Outcome::CorrectAnswer | Outcome::CorrectAbstention)).count();
        prop_assert_eq!(overall_accuracy(&outcomes), correct as f64 / n);
        match hallucination_rate(&outcomes) {
            Ok(h) => prop_assert_eq!(h, fn_ / (tp + fn_)),
            Err(_) => prop_assert_eq!(tp + fn_, 0.0),
        }
        let hist = OutcomeHistogram::from_outcomes(&outcomes);
        prop_assert_eq!(hist.total(), outcomes.len());
    }

    #[test]
    fn metrics_are_bounded(outcomes in prop::collection::vec(outcome_strategy(), 1..60)) {
        let prf = unanswerability_prf(&outcomes);
        for v in [prf.precision, prf.recall, prf.f1, prf.accuracy, overall_accuracy(&outcomes)] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn token_metrics_match_hand_oracle(
        p in prop::collection::vec(token_strategy(), 0..6),
        g in prop::collection::vec(token_strategy(), 0..6),
    ) {
        prop_assert!((token_f1(&p, &g) - brute_token_f1(&p, &g)).abs() < 1e-15);
        let strip = |s: &[usize]| s.iter().copied().filter(|&t| t != EOS).collect::<Vec<_>>();
        prop_assert_eq!(exact_match(&p, &g), strip(&p) == strip(&g));
    }
}

proptest! {
    #[test]
    fn token_f1_symmetric_and_bounded(
        p in prop::collection::vec(token_strategy(), 0..6),
        g in prop::collection::vec(token_strategy(), 0..6),
    ) {
        let f = token_f1(&p, &g);
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert!((f - token_f1(&g, &p)).abs() < 1e-15);
        if exact_match(&p, &g) {
            prop_assert_eq!(f, 1.0);
        }
    }
}
