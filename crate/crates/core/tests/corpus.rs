use proptest::prelude::*;
use salu_core::corpus::{
    self, generate_dataset, lookup, random_relabel, relabel, synthesize_preferences, DatasetSpec, Gold,
    KnowledgeBase, PreferenceRule,
};
use salu_core::seed;
use salu_core::vocab::{self, ABSTENTION, EOS, NUM_KEYS, VOCAB_SIZE};

fn small_spec(n: usize, na_ratio: f64, seed: u64) -> DatasetSpec {
    DatasetSpec {
        n_episodes: n,
        na_ratio,
        seed,
        ..DatasetSpec::default()
    }
}

#[test]
fn generation_is_deterministic() {
    let s = small_spec(200, 0.5, 9);
    assert_eq!(generate_dataset(&s).unwrap(), generate_dataset(&s).unwrap());
    let other = generate_dataset(&small_spec(200, 0.5, 10)).unwrap();
    assert_ne!(generate_dataset(&s).unwrap().episodes, other.episodes);
}

#[test]
fn jsonl_round_trip() {
    let ds = generate_dataset(&small_spec(60, 0.4, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("eps.jsonl");
    corpus::save_episodes(&path, &ds.episodes).unwrap();
    assert_eq!(corpus::load_episodes(&path).unwrap(), ds.episodes);

    let pairs = synthesize_preferences(&ds.episodes, 3, 4);
    let ppath = dir.path().join("pairs.jsonl");
    corpus::save_pairs(&ppath, &pairs).unwrap();
    assert_eq!(corpus::load_pairs(&ppath).unwrap(), pairs);
}

#[test]
fn malformed_jsonl_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, "{\"id\": 1}\n").unwrap();
    assert!(corpus::load_episodes(&path).is_err());
}

#[test]
fn knowledge_base_is_recovered_from_episodes() {
    let ds = generate_dataset(&small_spec(400, 0.5, 3)).unwrap();
    let truth = KnowledgeBase::from_seed(0);
    let inferred = KnowledgeBase::infer(&ds.episodes).unwrap();
    for k in 0..NUM_KEYS {
        assert_eq!(inferred.value_of(vocab::key(k)), truth.value_of(vocab::key(k)));
    }
}

#[test]
fn conflicting_facts_are_rejected() {
    let ds = generate_dataset(&small_spec(40, 0.5, 3)).unwrap();
    let mut eps = ds.episodes.clone();
    let (k, v) = eps[0].history.first().copied().unwrap_or_else(|| {
        let p = &eps[0].passages[0];
        (p[1], p[3])
    });
    let other = if v == vocab::value(0) { vocab::value(1) } else { vocab::value(0) };
    assert!(KnowledgeBase::infer(&eps).is_ok());
    eps[1].history.push((k, other));
    assert!(KnowledgeBase::infer(&eps).is_err());
}

#[test]
fn preference_pairs_follow_rules() {
    let ds = generate_dataset(&small_spec(100, 0.5, 2)).unwrap();
    let pairs = synthesize_preferences(&ds.episodes, 4, 0);
    assert_eq!(pairs.len(), 400);
    for p in &pairs {
        let ep = ds.episodes.iter().find(|e| e.id == p.episode_id).unwrap();
        assert_ne!(p.preferred, p.dispreferred);
        match (ep.gold, p.rule) {
            (Gold::Unanswerable, PreferenceRule::AbstainOverFabrication) => {
                assert_eq!(p.preferred, ABSTENTION.to_vec());
                assert!(vocab::is_value(p.dispreferred[0]) && p.dispreferred[1] == EOS);
            }
            (Gold::Answer(v), PreferenceRule::AnswerOverWrong) => {
                assert_eq!(p.preferred, vec![v, EOS]);
                assert_ne!(p.dispreferred[0], v);
            }
            (Gold::Answer(v), PreferenceRule::AnswerOverAbstention) => {
                assert_eq!(p.preferred, vec![v, EOS]);
                assert_eq!(p.dispreferred, ABSTENTION.to_vec());
            }
            other => panic!("rule does not match gold: {other:?}"),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dataset_invariants(n in 10usize..160, ratio in 0.0f64..=1.0, s in any::<u64>()) {
        let spec = small_spec(n, ratio, s);
        let ds = generate_dataset(&spec).unwrap();
        let kb = KnowledgeBase::from_seed(spec.world_seed);
        prop_assert_eq!(ds.episodes.len(), n);
        let unanswerable = ds.episodes.iter().filter(|e| !e.is_answerable()).count();
        prop_assert_eq!(unanswerable, spec.n_unanswerable());

        let mut all: Vec<usize> = ds.split.train.iter().chain(&ds.split.val).chain(&ds.split.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());

        for ep in &ds.episodes {
            let prompt = ep.prompt();
            prop_assert!(prompt.len() <= spec.max_prompt_len());
            prop_assert!(prompt.iter().all(|&t| t < VOCAB_SIZE));
            let found: Vec<_> = ep.passages.iter().filter_map(|p| lookup(p, ep.question)).collect();
            match ep.gold {
                Gold::Answer(v) => {
                    prop_assert!(!found.is_empty());
                    prop_assert!(found.iter().all(|&f| f == v));
                    prop_assert_eq!(v, kb.value_of(ep.question));
                }
                Gold::Unanswerable => prop_assert!(found.is_empty()),
            }
            for (p, &label) in ep.passages.iter().zip(&ep.passage_labels) {
                prop_assert_eq!(lookup(p, ep.question).is_some(), label);
            }
            for &(k, v) in &ep.history {
                prop_assert_eq!(v, kb.value_of(k));
            }
        }
    }

    #[test]
    fn relabel_keeps_answerability_and_kb(s in any::<u64>(), r in any::<u64>()) {
        let ds = generate_dataset(&small_spec(20, 0.5, s)).unwrap();
        let kb = KnowledgeBase::from_seed(0);
        let mut rng = seed::rng(r);
        for ep in &ds.episodes {
            let e = random_relabel(ep, &kb, &mut rng);
            prop_assert_eq!(e.is_answerable(), ep.is_answerable());
            prop_assert_eq!(e.prompt().len(), ep.prompt().len());
            prop_assert_eq!(&e.passage_labels, &ep.passage_labels);
            if let Gold::Answer(v) = e.gold {
                prop_assert_eq!(v, kb.value_of(e.question));
            }
            for p in &e.passages {
                for w in p.windows(3).filter(|w| vocab::is_key(w[0]) && vocab::is_value(w[2])) {
                    prop_assert_eq!(w[2], kb.value_of(w[0]));
                }
            }
        }
    }

    #[test]
    fn identity_relabel_is_noop(s in any::<u64>()) {
        let ds = generate_dataset(&small_spec(10, 0.5, s)).unwrap();
        let kp: Vec<usize> = (0..NUM_KEYS).collect();
        let vp: Vec<usize> = (0..vocab::NUM_VALUES).collect();
        for ep in &ds.episodes {
            prop_assert_eq!(&relabel(ep, &kp, &vp), ep);
        }
    }
}
