use letter_core::autograd::log_softmax_with_temperature;
use letter_core::data::{Interaction, InteractionDataset};
use letter_core::genrec::{
    build_examples, constrained_beam_search, eval_examples, example_loss, examples_from_sequence,
    hard_negative_weight, history_tokens, pack_examples, ranking_generation_loss, train_recommender, EvalSplit,
    ExampleMode, IdentifierTrie, KvCache, RecTrainingConfig, RecommenderArch, RecommenderModel, SequenceExample,
    TokenVocabulary, BOS, END,
};
use letter_core::gradcheck::check_params;
use letter_core::tokenizer::{assign_identifiers, IdentifierAssignment};
use letter_core::{Error, SeededRng, Tape, Tensor};
use proptest::prelude::*;

fn tiny_arch() -> RecommenderArch {
    RecommenderArch {
        layers: 2,
        width: 8,
        heads: 2,
        ffn_mult: 2,
    }
}

/// Random distinct codes for `n` items.
fn random_assignment(n: usize, levels: usize, size: usize, rng: &mut SeededRng) -> IdentifierAssignment {
    let codes: Vec<Vec<usize>> = (0..n).map(|_| (0..levels).map(|_| rng.below(size)).collect()).collect();
    assign_identifiers(&codes)
}

fn setup(n: usize, seed: u64) -> (TokenVocabulary, Vec<Vec<usize>>, IdentifierTrie, RecommenderModel) {
    let mut rng = SeededRng::new(seed);
    let a = random_assignment(n, 3, 4, &mut rng);
    let vocab = TokenVocabulary::for_assignment(&a, 4).unwrap();
    let toks = vocab.item_tokens(&a).unwrap();
    let trie = IdentifierTrie::build(&toks).unwrap();
    let model = RecommenderModel::new(tiny_arch(), vocab, 64, &mut rng).unwrap();
    (vocab, toks, trie, model)
}

#[test]
fn vocabulary_layout() {
    let v = TokenVocabulary::new(3, 5, 2).unwrap();
    assert_eq!(v.size(), 3 + 15 + 2);
    assert_ne!(v.code_token(0, 4).unwrap(), v.code_token(1, 4).unwrap());
    assert_eq!(v.describe(v.code_token(1, 4).unwrap()), "<c2_4>");
    assert_eq!(v.describe(v.suffix_token(1).unwrap()), "<d1>");
    assert!(matches!(v.code_token(3, 0), Err(Error::Data(_))));
    let mut all: Vec<usize> = (0..3)
        .flat_map(|l| (0..5).map(move |c| (l, c)))
        .map(|(l, c)| v.code_token(l, c).unwrap())
        .collect();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 15);
}

#[test]
fn last_target_example_of_five_items() {
    let ex = examples_from_sequence(&[1, 2, 3, 4, 5], ExampleMode::LastTarget, 20);
    assert_eq!(ex, vec![(vec![1, 2, 3, 4], 5)]);
    let sw = examples_from_sequence(&[1, 2, 3], ExampleMode::SlidingWindow, 20);
    assert_eq!(sw, vec![(vec![1], 2), (vec![1, 2], 3)]);
}

#[test]
fn long_histories_keep_the_most_recent_twenty() {
    let items: Vec<usize> = (0..26).collect();
    let ex = examples_from_sequence(&items, ExampleMode::LastTarget, 20);
    assert_eq!(ex[0].0, (5..25).collect::<Vec<_>>());
    assert_eq!(ex[0].1, 25);
    for (h, _) in examples_from_sequence(&items, ExampleMode::SlidingWindow, 20) {
        assert!(h.len() <= 20);
    }
}

fn random_dataset(users: usize, items: usize, seed: u64) -> InteractionDataset {
    let mut rng = SeededRng::new(seed);
    let mut ev = Vec::new();
    for u in 0..users {
        let len = 5 + rng.below(25);
        for t in 0..len {
            ev.push(Interaction {
                user: format!("u{u}"),
                item: rng.below(items).to_string(),
                timestamp: t as i64,
            });
        }
    }
    InteractionDataset::from_interactions(&ev, 1).unwrap()
}

#[test]
fn example_count_matches_recount() {
    let ds = random_dataset(40, 30, 3);
    let mut rng = SeededRng::new(0);
    let a = random_assignment(ds.catalog.len(), 2, 8, &mut rng);
    let sw = build_examples(&ds, &a, ExampleMode::SlidingWindow, 20).unwrap();
    let lt = build_examples(&ds, &a, ExampleMode::LastTarget, 20).unwrap();
    let mut expect_sw = 0;
    let mut expect_lt = 0;
    for u in &ds.users {
        let n = u.items.len() - 2;
        expect_sw += n.saturating_sub(1);
        expect_lt += usize::from(n >= 2);
    }
    assert_eq!(sw.len(), expect_sw);
    assert_eq!(lt.len(), expect_lt);
    for e in &sw {
        let seq = &ds.users[e.user].items;
        assert!(e.history.len() <= 20);
        let k = e.history.len();
        assert!(seq[..seq.len() - 2]
            .windows(k + 1)
            .any(|w| w[..k] == e.history[..] && w[k] == e.target));
    }
    let val = eval_examples(&ds, &a, EvalSplit::Validation, 20).unwrap();
    let test = eval_examples(&ds, &a, EvalSplit::Test, 20).unwrap();
    assert_eq!(val.len(), ds.users.len());
    for (u, (v, t)) in ds.users.iter().zip(val.iter().zip(&test)) {
        assert_eq!(v.target, u.validation_target());
        assert_eq!(t.target, u.test_target());
        assert_eq!(*t.history.last().unwrap(), u.validation_target());
    }
}

#[test]
fn missing_identifier_is_a_data_error() {
    let ds = random_dataset(10, 10, 1);
    let mut rng = SeededRng::new(0);
    let mut a = random_assignment(ds.catalog.len(), 2, 8, &mut rng);
    a.identifiers.pop();
    match build_examples(&ds, &a, ExampleMode::SlidingWindow, 20) {
        Err(Error::Data(m)) => assert!(m.contains(ds.catalog.name(ds.catalog.len() - 1))),
        other => panic!("{other:?}"),
    }
}

#[test]
fn packed_streams_equal_separate_examples() {
    let (_, toks, _, model) = setup(12, 5);
    let mut examples = Vec::new();
    let seqs = [(0..12).chain(0..12).collect::<Vec<usize>>(), vec![3, 1, 4, 1, 5]];
    for (u, s) in seqs.iter().enumerate() {
        for (history, target) in examples_from_sequence(s, ExampleMode::SlidingWindow, 5) {
            examples.push(SequenceExample { user: u, history, target });
        }
    }
    let streams = pack_examples(&examples, &toks);
    assert!(streams.len() < examples.len());
    assert_eq!(streams.iter().map(|s| s.examples).sum::<usize>(), examples.len());
    for tau in [0.6, 1.0] {
        let mut tape = Tape::new();
        let l = model.batch_loss(&mut tape, &streams, tau).unwrap();
        let packed = tape.value(l).item() * examples.len() as f64;
        let separate: f64 = examples.iter().map(|e| example_loss(&model, e, &toks, tau).unwrap()).sum();
        assert!((packed - separate).abs() < 1e-9 * separate, "{packed} vs {separate}");
    }
}

#[test]
fn uniform_logits_give_length_times_log_vocab() {
    for tau in [0.6, 0.8, 1.0, 1.2] {
        let logits = Tensor::full(&[4, 37], 0.3);
        let l = ranking_generation_loss(&logits, &[0, 5, 36, 2], tau).unwrap();
        assert!((l - 4.0 * 37f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn unit_temperature_is_cross_entropy() {
    let mut rng = SeededRng::new(8);
    for _ in 0..50 {
        let logits = rng.normal_tensor(&[3, 20], 3.0);
        let targets: Vec<usize> = (0..3).map(|_| rng.below(20)).collect();
        let got = ranking_generation_loss(&logits, &targets, 1.0).unwrap();
        let mut ce = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = logits.row(r);
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            ce += -(row[t].exp() / z).ln();
        }
        assert!((got - ce).abs() < 1e-12, "{got} vs {ce}");
    }
    let logits = Tensor::zeros(&[1, 4]);
    assert!(matches!(ranking_generation_loss(&logits, &[4], 1.0), Err(Error::Data(_))));
    assert!(matches!(ranking_generation_loss(&logits, &[0], 0.0), Err(Error::Parameter(_))));
}

#[test]
fn hard_negative_weights() {
    let w = hard_negative_weight(&[2.0, 1.0, 1.0], 0, 0.7).unwrap();
    assert_eq!(w, vec![0.0, 0.5, 0.5]);
    let mut rng = SeededRng::new(2);
    for _ in 0..100 {
        let logits: Vec<f64> = (0..50).map(|_| rng.normal() * 2.0).collect();
        let t = rng.below(50);
        for tau in [0.6, 1.0, 1.2] {
            let w = hard_negative_weight(&logits, t, tau).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for a in 0..50 {
                for b in 0..50 {
                    if a != t && b != t && logits[a] < logits[b] {
                        assert!(w[a] < w[b]);
                    }
                }
            }
        }
        // dw/dtau < 0 wherever the logit exceeds the weighted mean, and that
        // mean falls as tau grows, so clearing it at 0.6 covers [0.6, 1.2]
        let lo = hard_negative_weight(&logits, t, 0.6).unwrap();
        let hi = hard_negative_weight(&logits, t, 1.2).unwrap();
        let lo_mean: f64 = (0..50).map(|v| lo[v] * logits[v]).sum();
        for v in (0..50).filter(|&v| v != t && logits[v] > lo_mean) {
            assert!(lo[v] > hi[v], "v={v}");
        }
    }
}

#[test]
fn generation_loss_gradients_match_finite_differences() {
    let (_, toks, _, model) = setup(10, 9);
    let examples: Vec<SequenceExample> = examples_from_sequence(&[1, 4, 2, 8, 5], ExampleMode::SlidingWindow, 20)
        .into_iter()
        .map(|(history, target)| SequenceExample { user: 0, history, target })
        .collect();
    let streams = pack_examples(&examples, &toks);
    let ids: Vec<_> = model.store.ids().collect();
    for tau in [0.6, 1.0, 1.2] {
        let mut store = model.store.clone();
        let report = check_params(&mut store, &ids, 1e-5, Some(3), 4, |tape, st| {
            let mut m = model.clone();
            m.store = st.clone();
            m.batch_loss(tape, &streams, tau)
        })
        .unwrap();
        assert!(report.passes(1e-4), "tau {tau}: {report:?}");
    }
}

#[test]
fn logits_are_causal() {
    let (vocab, _, _, model) = setup(10, 11);
    let mut rng = SeededRng::new(1);
    let tokens: Vec<usize> = (0..30).map(|_| rng.below(vocab.size())).collect();
    let base = model.logits(&tokens).unwrap();
    for t in [0, 7, 28] {
        let mut changed = tokens.clone();
        for x in changed.iter_mut().skip(t + 1) {
            *x = (*x + 1 + rng.below(vocab.size() - 1)) % vocab.size();
        }
        let other = model.logits(&changed).unwrap();
        for r in 0..=t {
            assert_eq!(base.row(r), other.row(r), "row {r} moved after perturbing past {t}");
        }
    }
}

#[test]
fn cached_decoding_matches_full_forward() {
    let (vocab, _, _, model) = setup(10, 12);
    let mut rng = SeededRng::new(3);
    let tokens: Vec<usize> = (0..25).map(|_| rng.below(vocab.size())).collect();
    let full = model.logits(&tokens).unwrap();
    let mut base = KvCache::default();
    model.extend_cache(None, &mut base, &tokens[..10]).unwrap();
    let mut suffix = KvCache::default();
    for (i, &t) in tokens[10..].iter().enumerate() {
        let h = model.extend_cache(Some(&base), &mut suffix, &[t]).unwrap();
        let l = model.logits_from_hidden(&h);
        for (a, b) in l.iter().zip(full.row(10 + i)) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn trie_small_cases() {
    let t = IdentifierTrie::build(&[vec![5, 9, END]]).unwrap();
    assert_eq!(t.valid_successors(&[]), vec![5]);
    assert_eq!(t.valid_successors(&[5]), vec![9]);
    assert_eq!(t.valid_successors(&[5, 9]), vec![END]);
    assert_eq!(t.lookup(&[5, 9, END]), Some(0));
    let t = IdentifierTrie::build(&[vec![3, 4, 7, END], vec![3, 4, 6, END]]).unwrap();
    assert_eq!(t.valid_successors(&[3, 4]), vec![6, 7]);
    assert_eq!(t.num_leaves(), 2);
    assert!(t.valid_successors(&[4]).is_empty());
    assert!(matches!(
        IdentifierTrie::build(&[vec![3, END], vec![3, END]]),
        Err(Error::Data(_))
    ));
}

#[test]
fn trie_successors_match_brute_force() {
    let mut rng = SeededRng::new(4);
    let a = random_assignment(150, 3, 5, &mut rng);
    let vocab = TokenVocabulary::for_assignment(&a, 5).unwrap();
    let toks = vocab.item_tokens(&a).unwrap();
    let trie = IdentifierTrie::build(&toks).unwrap();
    assert_eq!(trie.num_leaves(), 150);
    for _ in 0..1000 {
        let len = rng.below(5);
        let prefix: Vec<usize> = if rng.bernoulli(0.7) {
            let s = &toks[rng.below(150)];
            s[..len.min(s.len())].to_vec()
        } else {
            (0..len).map(|_| rng.below(vocab.size())).collect()
        };
        let mut expect: Vec<usize> = toks
            .iter()
            .filter(|s| s.len() > prefix.len() && s[..prefix.len()] == prefix[..])
            .map(|s| s[prefix.len()])
            .collect();
        expect.sort();
        expect.dedup();
        assert_eq!(trie.valid_successors(&prefix), expect, "prefix {prefix:?}");
    }
    for (i, s) in toks.iter().enumerate() {
        assert_eq!(trie.lookup(s), Some(i));
    }
}

/// Teacher-forced log-probability of every item's identifier.
fn exhaustive_scores(model: &RecommenderModel, prefix: &[usize], toks: &[Vec<usize>]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = toks
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let mut seq = prefix.to_vec();
            seq.extend_from_slice(&y[..y.len() - 1]);
            let logits = model.logits(&seq).unwrap();
            let score = y
                .iter()
                .enumerate()
                .map(|(k, &t)| log_softmax_with_temperature(logits.row(prefix.len() - 1 + k), 1.0)[t])
                .sum();
            (i, score)
        })
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

#[test]
fn full_beam_equals_exhaustive_ranking() {
    for seed in 0..3 {
        let (_, toks, trie, model) = setup(60, seed);
        let prefix = history_tokens(&[3, 17, 42], &toks);
        let beam = constrained_beam_search(&model, &prefix, &trie, 60).unwrap();
        let oracle = exhaustive_scores(&model, &prefix, &toks);
        assert_eq!(beam.len(), 60);
        for (b, o) in beam.iter().zip(&oracle) {
            assert_eq!(b.item, o.0);
            assert!((b.score - o.1).abs() < 1e-9);
        }
    }
}

#[test]
fn greedy_beam_follows_per_step_argmax() {
    let (_, toks, trie, model) = setup(40, 7);
    let prefix = history_tokens(&[1, 2], &toks);
    let got = constrained_beam_search(&model, &prefix, &trie, 1).unwrap();
    let mut seq = prefix.clone();
    let mut generated = Vec::new();
    loop {
        let valid = trie.valid_successors(&generated);
        if valid.is_empty() {
            break;
        }
        let logits = model.logits(&seq).unwrap();
        let row = logits.row(seq.len() - 1);
        let best = *valid.iter().max_by(|&&a, &&b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap();
        generated.push(best);
        seq.push(best);
    }
    assert_eq!(got.len(), 1);
    assert_eq!(Some(got[0].item), trie.lookup(&generated));
}

#[test]
fn single_item_catalog_and_bad_width() {
    let mut rng = SeededRng::new(0);
    let a = assign_identifiers(&[vec![2, 1]]);
    let vocab = TokenVocabulary::for_assignment(&a, 3).unwrap();
    let toks = vocab.item_tokens(&a).unwrap();
    let trie = IdentifierTrie::build(&toks).unwrap();
    let model = RecommenderModel::new(tiny_arch(), vocab, 16, &mut rng).unwrap();
    let got = constrained_beam_search(&model, &[BOS], &trie, 5).unwrap();
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].item, 0);
    assert!(matches!(
        constrained_beam_search(&model, &[BOS], &trie, 0),
        Err(Error::Parameter(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn beam_outputs_are_catalog_items(seed in 0u64..1000, width in 1usize..12) {
        let (_, toks, trie, model) = setup(30, seed);
        let prefix = history_tokens(&[(seed % 30) as usize], &toks);
        let got = constrained_beam_search(&model, &prefix, &trie, width).unwrap();
        prop_assert!(got.len() <= width);
        let mut seen = std::collections::HashSet::new();
        for r in &got {
            prop_assert!(r.item < 30);
            prop_assert!(seen.insert(r.item));
        }
        for w in got.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
    }
}

/// Users walk items 0..50 in order (wrapping), so the next item is a
/// deterministic function of the last one.
fn successor_dataset(seed: u64) -> InteractionDataset {
    let mut rng = SeededRng::new(seed);
    let mut ev = Vec::new();
    for u in 0..150 {
        let start = rng.below(50);
        let len = 6 + rng.below(5);
        for t in 0..len {
            ev.push(Interaction {
                user: format!("u{u}"),
                item: ((start + t) % 50).to_string(),
                timestamp: t as i64,
            });
        }
    }
    InteractionDataset::from_interactions(&ev, 1).unwrap()
}

#[test]
fn learns_a_deterministic_successor_rule() {
    for seed in 0..5 {
        let ds = successor_dataset(seed);
        assert_eq!(ds.catalog.len(), 50);
        let mut rng = SeededRng::new(100 + seed);
        let a = random_assignment(50, 2, 8, &mut rng);
        let vocab = TokenVocabulary::for_assignment(&a, 8).unwrap();
        let toks = vocab.item_tokens(&a).unwrap();
        let trie = IdentifierTrie::build(&toks).unwrap();
        let config = RecTrainingConfig {
            arch: RecommenderArch {
                layers: 1,
                width: 32,
                heads: 2,
                ffn_mult: 2,
            },
            epochs: 200,
            batch_size: 32,
            lr: 3e-3,
            beam_width: 10,
            val_every: 10,
            val_users: 50,
            seed,
            ..Default::default()
        };
        let train = build_examples(&ds, &a, config.example_mode, config.history_cap).unwrap();
        let val = eval_examples(&ds, &a, EvalSplit::Validation, config.history_cap).unwrap();
        let model = RecommenderModel::new(
            config.arch.clone(),
            vocab,
            config.max_positions(vocab.max_item_len()),
            &mut rng,
        )
        .unwrap();
        let (_, log) = train_recommender(model, &train, &val, &toks, &trie, &config).unwrap();
        let best = log.records.iter().filter_map(|r| r.val_recall).fold(0.0, f64::max);
        assert_eq!(best, 1.0, "seed {seed}");
        let losses: Vec<f64> = log.records.iter().map(|r| r.loss).collect();
        assert!(losses.iter().all(|l| l.is_finite()));
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head / 2.0, "seed {seed}: {head} -> {tail}");
    }
}

#[test]
fn training_edge_cases_and_determinism() {
    let ds = successor_dataset(0);
    let mut rng = SeededRng::new(1);
    let a = random_assignment(50, 2, 8, &mut rng);
    let vocab = TokenVocabulary::for_assignment(&a, 8).unwrap();
    let toks = vocab.item_tokens(&a).unwrap();
    let trie = IdentifierTrie::build(&toks).unwrap();
    let train = build_examples(&ds, &a, ExampleMode::SlidingWindow, 20).unwrap();
    let model = RecommenderModel::new(tiny_arch(), vocab, 64, &mut rng).unwrap();
    let zero = RecTrainingConfig {
        arch: tiny_arch(),
        epochs: 0,
        ..Default::default()
    };
    let (same, log) = train_recommender(model.clone(), &train, &[], &toks, &trie, &zero).unwrap();
    assert!(log.records.is_empty());
    for (p, q) in same.store.params().iter().zip(model.store.params()) {
        assert_eq!(p.value, q.value);
    }
    assert!(matches!(
        train_recommender(model.clone(), &[], &[], &toks, &trie, &zero),
        Err(Error::Data(_))
    ));
    let cfg = RecTrainingConfig { epochs: 2, ..zero };
    let (m1, l1) = train_recommender(model.clone(), &train, &[], &toks, &trie, &cfg).unwrap();
    let (m2, l2) = train_recommender(model.clone(), &train, &[], &toks, &trie, &cfg).unwrap();
    assert_eq!(l1, l2);
    for (p, q) in m1.store.params().iter().zip(m2.store.params()) {
        assert_eq!(p.value, q.value);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rec.json");
    m1.save(&path).unwrap();
    let back = RecommenderModel::load(&path).unwrap();
    let prefix = history_tokens(&[4, 5], &toks);
    assert_eq!(
        constrained_beam_search(&m1, &prefix, &trie, 5).unwrap(),
        constrained_beam_search(&back, &prefix, &trie, 5).unwrap()
    );
    std::fs::write(&path, "{\"magic\":\"nope\"}").unwrap();
    assert!(RecommenderModel::load(&path).is_err());
}
