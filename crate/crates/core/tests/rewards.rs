use std::collections::BTreeSet;

use proptest::prelude::*;
use salu_core::corpus::{generate_dataset, synthesize_preferences, DatasetSpec};
use salu_core::metrics::Outcome;
use salu_core::ppo::{clipped_term, exact_kl, shaped_reward, PpoConfig};
use salu_core::reward::{holdout_split, preference_loss_value, shuffle_labels, BaseRewardTable};

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

#[test]
fn preference_loss_reference_points() {
    assert!((preference_loss_value(0.3, 0.3) - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(preference_loss_value(40.0, -40.0) < 1e-30);
    assert!((preference_loss_value(-400.0, 400.0) - 800.0).abs() < 1e-9);
}

#[test]
fn clip_reference_cases() {
    assert_eq!(clipped_term(1.5, 1.0, 0.2), 1.2);
    assert_eq!(clipped_term(0.5, -1.0, 0.2), -0.8);
    assert_eq!(clipped_term(0.5, 1.0, 0.2), 0.5);
    assert_eq!(clipped_term(1.5, -1.0, 0.2), -1.5);
}

#[test]
fn default_reward_table_is_valid_and_ordered() {
    let t = BaseRewardTable::default();
    t.validate().unwrap();
    for o in Outcome::ALL {
        if o != Outcome::Hallucination {
            assert!(t.get(Outcome::Hallucination) < t.get(o));
        }
    }
    let flat = BaseRewardTable { hallucination: -1.0, ..t };
    assert!(flat.validate().is_err());
}

#[test]
fn ppo_config_rejects_bad_values() {
    assert!(PpoConfig::default().validate().is_ok());
    for bad in [
        PpoConfig { clip_epsilon: 0.0, ..PpoConfig::default() },
        PpoConfig { kl_coef: -1.0, ..PpoConfig::default() },
        PpoConfig { lambda_halluc: -0.1, ..PpoConfig::default() },
        PpoConfig { rollout_batch: 0, ..PpoConfig::default() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn shuffled_labels_flip_about_half() {
    let ds = generate_dataset(&DatasetSpec { n_episodes: 400, ..DatasetSpec::default() }).unwrap();
    let pairs = synthesize_preferences(&ds.episodes, 2, 1);
    let shuffled = shuffle_labels(&pairs, 3);
    let flipped = pairs.iter().zip(&shuffled).filter(|(a, b)| a.preferred != b.preferred).count();
    let frac = flipped as f64 / pairs.len() as f64;
    assert!((0.45..0.55).contains(&frac), "flipped fraction {frac}");
    for (a, b) in pairs.iter().zip(&shuffled) {
        let x: BTreeSet<_> = [&a.preferred, &a.dispreferred].into_iter().collect();
        let y: BTreeSet<_> = [&b.preferred, &b.dispreferred].into_iter().collect();
        assert_eq!(x, y);
    }
}

#[test]
fn holdout_split_is_by_episode() {
    let ds = generate_dataset(&DatasetSpec { n_episodes: 200, ..DatasetSpec::default() }).unwrap();
    let pairs = synthesize_preferences(&ds.episodes, 3, 1);
    let (train, held) = holdout_split(&pairs, 0.1, 7);
    assert_eq!(train.len() + held.len(), pairs.len());
    let a: BTreeSet<u64> = train.iter().map(|p| p.episode_id).collect();
    let b: BTreeSet<u64> = held.iter().map(|p| p.episode_id).collect();
    assert!(a.is_disjoint(&b));
    assert_eq!(b.len(), 20);
}

proptest! {
    #[test]
    fn preference_loss_positive_and_decreasing(a in -30.0f64..30.0, b in -30.0f64..30.0, d in 0.01f64..5.0) {
        let l = preference_loss_value(a, b);
        prop_assert!(l > 0.0);
        prop_assert!(preference_loss_value(a + d, b) < l);
        let swap = preference_loss_value(b, a);
        prop_assert!((l - swap - (b - a)).abs() < 1e-9);
    }

    #[test]
    fn clipped_term_is_pessimistic(r in 0.0f64..3.0, adv in -5.0f64..5.0, eps in 0.01f64..0.5) {
        let c = clipped_term(r, adv, eps);
        prop_assert!(c <= r * adv + 1e-12);
        if (1.0 - eps..=1.0 + eps).contains(&r) {
            prop_assert!((c - r * adv).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_kl_nonnegative_and_zero_on_self(
        x in prop::collection::vec(-5.0f64..5.0, 2..10),
        y in prop::collection::vec(-5.0f64..5.0, 10),
    ) {
        let p = log_softmax(&x);
        let q = log_softmax(&y[..x.len()]);
        prop_assert!(exact_kl(&p, &q) >= -1e-12);
        prop_assert!(exact_kl(&p, &p).abs() < 1e-12);
    }

    #[test]
    fn shaping_monotone_in_confidence(
        s1 in -20.0f64..0.0, s2 in -20.0f64..0.0,
        la in 0.0f64..3.0, lh in 0.0f64..3.0,
        base in 0.01f64..3.0,
    ) {
        let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
        let h = |s| shaped_reward(Outcome::Hallucination, -base, s, la, lh);
        let a = |s| shaped_reward(Outcome::CorrectAbstention, base, s, la, lh);
        prop_assert!(h(hi).abs() >= h(lo).abs());
        prop_assert!(h(hi) <= -base);
        prop_assert!(a(hi) >= a(lo));
        prop_assert!(a(lo) >= base);
        for o in [Outcome::CorrectAnswer, Outcome::WrongAnswer, Outcome::OverAbstention] {
            prop_assert_eq!(shaped_reward(o, base, hi, la, lh), base);
        }
    }
}
