//! Transformer properties: causality, normalization, log-probability
//! identities and parameter gradients.

use salu_autodiff::gradcheck::{check_params, FD_STEP};
use salu_autodiff::{Graph, ParamGrads};
use salu_core::model::{argmax, DecodeMode};
use salu_core::vocab::{self, EOS};
use salu_core::{LanguageModel, ModelConfig};

fn tiny(seed: u64) -> LanguageModel {
    let cfg = ModelConfig {
        seed,
        ..ModelConfig::default()
    };
    let mut m = LanguageModel::new(cfg).unwrap();
    // Large weights everywhere: sharp attention and non-zero heads.
    let mut rng = salu_core::seed::rng(seed ^ 0xabc);
    use rand_distr::{Distribution, Normal};
    let n = Normal::new(0.0, 0.3).unwrap();
    let ids: Vec<_> = m.params().iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for x in m.params_mut().get_mut(id).data_mut() {
            *x += n.sample(&mut rng);
        }
    }
    m
}

fn prompt() -> Vec<usize> {
    "[CLS] K01 . V02 . [SEP] what is K03 ? [SEP] F00 K03 is V11 . K04 is V05 [SEP]"
        .split_whitespace()
        .map(|t| vocab::parse_token(t).unwrap())
        .collect()
}

#[test]
fn causal_mask_keeps_earlier_logits_bit_identical() {
    let m = tiny(3);
    let a = prompt();
    for j in [1, 5, a.len() - 1] {
        let mut b = a.clone();
        b[j] = vocab::filler(7);
        let la = m.forward_logits(&a).unwrap();
        let lb = m.forward_logits(&b).unwrap();
        let v = vocab::VOCAB_SIZE;
        assert_eq!(&la.data()[..j * v], &lb.data()[..j * v], "position {j}");
        assert_ne!(&la.data()[j * v..], &lb.data()[j * v..]);
    }
}

#[test]
fn logits_finite_and_rows_normalize() {
    let m = LanguageModel::new(ModelConfig::default()).unwrap();
    let l = m.forward_logits(&prompt()).unwrap();
    assert!(l.all_finite());
    for r in 0..l.rows() {
        let mut row = l.row(r).to_vec();
        salu_autodiff::kernels::softmax_in_place(&mut row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn log_prob_identities() {
    let m = tiny(5);
    let x = prompt();
    let y = vec![vocab::value(11), EOS];
    let per = m.token_log_probs(&x, &y).unwrap();
    let seq = m.sequence_log_prob(&x, &y).unwrap();
    assert!((seq - per.iter().sum::<f64>()).abs() < 1e-12);
    assert!(seq <= 0.0);
    let s = m.confidence_score(&x, &y).unwrap();
    assert_eq!(s, seq / 2.0);
    let geo = per.iter().map(|l| l.exp()).product::<f64>().sqrt();
    assert!((s.exp() - geo).abs() < 1e-10);

    // Length-one response: the single token's probability from the full pass.
    let logits = m.forward_logits(&x).unwrap();
    let mut last = logits.row(logits.rows() - 1).to_vec();
    salu_autodiff::kernels::softmax_in_place(&mut last);
    let single = m.sequence_log_prob(&x, &[EOS]).unwrap();
    assert!((single - last[EOS].ln()).abs() < 1e-12);
}

#[test]
fn value_head_zero_at_init() {
    let m = LanguageModel::new(ModelConfig::default()).unwrap();
    assert_eq!(m.value_estimate(&prompt()).unwrap(), 0.0);
    let m = tiny(1);
    let v = m.value_estimate(&prompt()).unwrap();
    assert!(v.is_finite());
    let mut other = prompt();
    other[8] = vocab::key(9);
    assert_ne!(v, m.value_estimate(&other).unwrap());
}

#[test]
fn sampling_is_seeded_and_cold_sampling_matches_greedy() {
    let m = tiny(2);
    let x = prompt();
    let s = DecodeMode::Sample { temperature: 1.0, seed: 9 };
    assert_eq!(m.decode(&x, s, 4).unwrap(), m.decode(&x, s, 4).unwrap());
    assert_eq!(
        m.decode(&x, DecodeMode::Greedy, 4).unwrap(),
        m.decode(&x, DecodeMode::Greedy, 4).unwrap()
    );
    let mut rng = salu_core::seed::rng(77);
    use rand::Rng;
    for i in 0..20 {
        let mut p = x.clone();
        let pos = rng.random_range(1..p.len() - 1);
        p[pos] = rng.random_range(5..61);
        let cold = DecodeMode::Sample { temperature: 1e-4, seed: i };
        assert_eq!(m.decode(&p, cold, 3).unwrap(), m.decode(&p, DecodeMode::Greedy, 3).unwrap());
    }
}

#[test]
fn argmax_lowest_index_on_ties() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
}

fn scalar_objective(m: &LanguageModel, x: &[usize], y: &[usize]) -> f64 {
    let mut g = Graph::new();
    let v = m.response_vars(&mut g, x, y).unwrap();
    let s = g.sum(v.token_log_probs).unwrap();
    g.item(s) + g.item(v.value)
}

#[test]
fn sequence_log_prob_gradients_match_finite_differences() {
    let mut m = tiny(11);
    let x = prompt();
    let y = vec![vocab::value(11), EOS];
    let mut grads = ParamGrads::zeros_like(m.params());
    {
        let mut g = Graph::new();
        let v = m.response_vars(&mut g, &x, &y).unwrap();
        let s = g.sum(v.token_log_probs).unwrap();
        let root = g.add(s, v.value).unwrap();
        let gr = g.backward(root).unwrap();
        g.accumulate_param_grads(&gr, 1.0, &mut grads);
    }
    let mut entries = Vec::new();
    for (id, _, t) in m.params().iter() {
        let n = t.numel();
        for j in [0, n / 3, n - 1] {
            entries.push((id, j));
        }
    }
    assert!(entries.len() >= 5);
    let mut store = m.params().clone();
    let report = check_params(&mut store, &grads, &entries, FD_STEP, |s| {
        *m.params_mut() = s.clone();
        Ok(scalar_objective(&m, &x, &y))
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}
