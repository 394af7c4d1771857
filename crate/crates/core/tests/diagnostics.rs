use letter_core::cf::{train_bpr, BprMfModel, CfConfig};
use letter_core::cluster::kmeans_restarts;
use letter_core::data::InteractionDataset;
use letter_core::diagnostics::{
    adjusted_rand_index, code_histogram, code_overlap_similarity, embedding_ranking, export_code_embedding_pca,
    generation_by_first_code, generation_frequency, pca, substituted_ranking, OverlapMode,
};
use letter_core::genrec::Recommendation;
use letter_core::metrics::{ndcg_at_k, opauc_single_positive, recall_at_k};
use letter_core::synthetic::{generate_synthetic, SyntheticSpec};
use letter_core::tokenizer::{assign_identifiers, CodebookSet};
use letter_core::{Error, RankingResult, SeededRng, Tensor};
use proptest::prelude::*;

fn at(rank: usize) -> RankingResult {
    RankingResult {
        rank: Some(rank),
        list_len: 100,
    }
}

/// NDCG with graded relevance over a ranked list, in the textbook form.
fn generic_ndcg(relevance: &[f64], k: usize) -> f64 {
    let dcg = |rel: &[f64]| -> f64 {
        rel.iter()
            .take(k)
            .enumerate()
            .map(|(i, r)| (2f64.powf(*r) - 1.0) / ((i + 2) as f64).log2())
            .sum()
    };
    let mut ideal = relevance.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg = dcg(&ideal);
    if idcg == 0.0 {
        0.0
    } else {
        dcg(relevance) / idcg
    }
}

#[test]
fn metric_hand_cases() {
    let all_first = vec![at(1); 7];
    assert_eq!(recall_at_k(&all_first, 5).unwrap(), 1.0);
    assert_eq!(ndcg_at_k(&all_first, 5).unwrap(), 1.0);
    assert_eq!(recall_at_k(&vec![at(6); 7], 5).unwrap(), 0.0);
    assert_eq!(ndcg_at_k(&[at(3)], 5).unwrap(), 0.5);
    assert!(matches!(recall_at_k(&[at(1)], 0), Err(Error::Parameter(_))));
    assert!(matches!(ndcg_at_k(&[], 3), Err(Error::Data(_))));
}

#[test]
fn metrics_match_recount_and_generic_ndcg() {
    let mut rng = SeededRng::new(5);
    let ranks: Vec<Option<usize>> = (0..200)
        .map(|_| if rng.bernoulli(0.1) { None } else { Some(1 + rng.below(50)) })
        .collect();
    let results: Vec<RankingResult> = ranks.iter().map(|&rank| RankingResult { rank, list_len: 50 }).collect();
    for k in 1..=20 {
        let hits = ranks.iter().filter(|r| matches!(r, Some(x) if *x <= k)).count();
        assert_eq!(recall_at_k(&results, k).unwrap(), hits as f64 / 200.0);
        let mean: f64 = ranks
            .iter()
            .map(|r| {
                let mut rel = vec![0.0; 50];
                if let Some(x) = r {
                    rel[x - 1] = 1.0;
                }
                generic_ndcg(&rel, k)
            })
            .sum::<f64>()
            / 200.0;
        assert!((ndcg_at_k(&results, k).unwrap() - mean).abs() < 1e-12);
    }
}

#[test]
fn ranked_lists_give_ranks() {
    let r = RankingResult::from_list(&[4, 9, 2], 2);
    assert_eq!(r.rank, Some(3));
    assert_eq!(RankingResult::from_list(&[4, 9, 2], 7).rank, None);
}

#[test]
fn opauc_positivity_is_the_strict_rank_indicator() {
    for rank in 1..=100 {
        for k in 2..=20 {
            let o = opauc_single_positive(rank, k, 1000).unwrap();
            assert_eq!(o > 0.0, rank < k);
            assert!((0.0..=1.0).contains(&o));
        }
    }
    assert_eq!(opauc_single_positive(1, 10, 1000).unwrap(), 1.0);
    assert!(matches!(opauc_single_positive(3, 1, 1000), Err(Error::Parameter(_))));
}

#[test]
fn histogram_cases() {
    let a = assign_identifiers(&vec![vec![3, 0]; 12]);
    let h = code_histogram(&a, 8, 1).unwrap();
    assert_eq!(h.utilization, 1);
    assert_eq!(h.entropy, 0.0);
    let codes: Vec<Vec<usize>> = (0..40).map(|i| vec![i % 8, i / 8]).collect();
    let a = assign_identifiers(&codes);
    let h = code_histogram(&a, 8, 1).unwrap();
    assert!((h.entropy - 8f64.ln()).abs() < 1e-12);
    assert_eq!(h.utilization, 8);
    assert!(matches!(code_histogram(&a, 8, 3), Err(Error::Parameter(_))));
    assert!(matches!(code_histogram(&a, 8, 0), Err(Error::Parameter(_))));

    let mut rng = SeededRng::new(1);
    let codes: Vec<Vec<usize>> = (0..500).map(|_| vec![rng.below(32), rng.below(32)]).collect();
    let a = assign_identifiers(&codes);
    for level in 1..=2 {
        let h = code_histogram(&a, 32, level).unwrap();
        assert_eq!(h.counts.iter().sum::<usize>(), 500);
        for c in 0..32 {
            let tally = codes.iter().filter(|x| x[level - 1] == c).count();
            assert_eq!(h.counts[c], tally);
        }
        let groups = h.grouped_frequencies(15);
        assert_eq!(groups.len(), 3);
        assert!(groups[0].1 >= groups[1].1 && groups[1].1 >= groups[2].1);
        let total: f64 = groups.iter().enumerate().map(|(g, m)| m.1 * if g < 2 { 15.0 } else { 2.0 }).sum();
        assert!((total - 500.0).abs() < 1e-9);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("groups.csv");
    code_histogram(&a, 32, 1).unwrap().write_grouped_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("group_index,mean_frequency\n"));
}

fn pairwise(t: &Tensor) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..t.rows() {
        for j in i + 1..t.rows() {
            out.push(letter_core::tensor::squared_distance(t.row(i), t.row(j)).sqrt());
        }
    }
    out
}

#[test]
fn pca_of_three_dimensional_points_is_an_isometry() {
    let mut rng = SeededRng::new(2);
    let mut x = rng.normal_tensor(&[20, 3], 1.0);
    for j in 0..3 {
        let m: f64 = (0..20).map(|i| x.get(i, j)).sum::<f64>() / 20.0;
        for i in 0..20 {
            x.set(i, j, x.get(i, j) - m);
        }
    }
    let p = pca(&x, 3).unwrap();
    assert_eq!(p.components(), 3);
    for (a, b) in pairwise(&x).iter().zip(pairwise(&p.coords)) {
        assert!((a - b).abs() < 1e-9);
    }
    // sign convention: the largest-magnitude coordinate per axis is positive
    for c in 0..3 {
        let col: Vec<f64> = (0..20).map(|i| p.coords.get(i, c)).collect();
        let lead = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        assert!(lead > 0.0);
    }
}

#[test]
fn pca_reconstruction_error_equals_discarded_eigenvalues() {
    let mut rng = SeededRng::new(3);
    for _ in 0..5 {
        let x = rng.normal_tensor(&[40, 10], 1.0);
        let p = pca(&x, 3).unwrap();
        let discarded: f64 = p.eigenvalues[3..].iter().sum();
        assert!((p.reconstruction_error(&x) - discarded).abs() < 1e-9);
    }
}

#[test]
fn pca_duplicates_and_low_rank() {
    let mut rng = SeededRng::new(4);
    let mut rows: Vec<Vec<f64>> = (0..8).map(|_| (0..6).map(|_| rng.normal()).collect()).collect();
    rows.push(rows[2].clone());
    let x = Tensor::from_rows(&rows).unwrap();
    let p = pca(&x, 3).unwrap();
    assert_eq!(p.coords.row(2), p.coords.row(8));

    let line: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, 0.0, -(i as f64)]).collect();
    let p = pca(&Tensor::from_rows(&line).unwrap(), 3).unwrap();
    assert_eq!(p.components(), 1);

    let cb = CodebookSet::new(vec![rng.normal_tensor(&[16, 5], 1.0)]).unwrap();
    let a = assign_identifiers(&(0..30).map(|i| vec![i % 16]).collect::<Vec<_>>());
    let e = export_code_embedding_pca(&cb, &a, 1).unwrap();
    assert_eq!(e.pca.coords.rows(), 16);
    assert_eq!(e.counts.iter().sum::<usize>(), 30);
    let dir = tempfile::tempdir().unwrap();
    e.write_csv(&dir.path().join("pca.csv")).unwrap();
    assert!(export_code_embedding_pca(&cb, &a, 2).is_err());
}

fn small_dataset(seed: u64) -> InteractionDataset {
    let spec = SyntheticSpec {
        items: 120,
        users: 150,
        topics: 6,
        semantic_dim: 8,
        seed,
        ..Default::default()
    };
    let data = generate_synthetic(&spec).unwrap();
    InteractionDataset::from_interactions(&data.interactions, 5).unwrap()
}

#[test]
fn substituting_cf_embeddings_reproduces_cf_metrics() {
    let ds = small_dataset(1);
    let cf: BprMfModel = train_bpr(&ds, &CfConfig { epochs: 5, ..Default::default() }, 0).unwrap();
    let own = embedding_ranking(&cf.user_factors, &cf.item_factors, &ds, &[5, 10, 20]).unwrap();
    let sub = substituted_ranking(&cf.item_factors, &cf, &ds, &[5, 10, 20]).unwrap();
    assert_eq!(own, sub);
    // a wider invertible image of the CF embeddings is mapped back exactly
    let mut rng = SeededRng::new(0);
    let a = rng.normal_tensor(&[32, 40], 1.0);
    let wide = cf.item_factors.matmul(&a).unwrap();
    let projected = substituted_ranking(&wide, &cf, &ds, &[5, 10, 20]).unwrap();
    for (x, y) in own.at.iter().zip(&projected.at) {
        assert_eq!(x.0, y.0);
        assert!((x.1 - y.1).abs() < 1e-12 && (x.2 - y.2).abs() < 1e-12);
    }
    let short = Tensor::zeros(&[3, 32]);
    assert!(matches!(substituted_ranking(&short, &cf, &ds, &[10]), Err(Error::Data(_))));
}

#[test]
fn overlap_cases() {
    let a = assign_identifiers(&[vec![1, 2, 3], vec![1, 2, 3], vec![0, 0, 0], vec![3, 1, 2]]);
    assert_eq!(code_overlap_similarity(&a, &[(0, 1)], OverlapMode::Positionwise).unwrap(), 1.0);
    assert_eq!(code_overlap_similarity(&a, &[(0, 2)], OverlapMode::Positionwise).unwrap(), 0.0);
    assert_eq!(code_overlap_similarity(&a, &[(0, 3)], OverlapMode::Positionwise).unwrap(), 0.0);
    assert_eq!(code_overlap_similarity(&a, &[(0, 3)], OverlapMode::Set).unwrap(), 1.0);
    assert!(matches!(
        code_overlap_similarity(&a, &[(0, 9)], OverlapMode::Positionwise),
        Err(Error::Data(_))
    ));
}

proptest! {
    #[test]
    fn overlap_is_symmetric_and_bounded(codes in prop::collection::vec(prop::collection::vec(0usize..4, 3), 2..20), seed in 0u64..100) {
        let a = assign_identifiers(&codes);
        let n = codes.len();
        let mut rng = SeededRng::new(seed);
        let pairs: Vec<(usize, usize)> = (0..10).map(|_| (rng.below(n), rng.below(n))).collect();
        let flipped: Vec<(usize, usize)> = pairs.iter().map(|&(x, y)| (y, x)).collect();
        for mode in [OverlapMode::Positionwise, OverlapMode::Set] {
            let s = code_overlap_similarity(&a, &pairs, mode).unwrap();
            prop_assert_eq!(s, code_overlap_similarity(&a, &flipped, mode).unwrap());
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }
}

#[test]
fn generation_counts() {
    let rec = |item| Recommendation { item, score: 0.0 };
    let lists = vec![vec![rec(0), rec(2)], vec![rec(2)]];
    assert_eq!(generation_frequency(&lists, 3).unwrap(), vec![1, 0, 2]);
    assert!(generation_frequency(&lists, 2).is_err());
    let a = assign_identifiers(&[vec![1, 0], vec![1, 1], vec![0, 0]]);
    let rows = generation_by_first_code(&[1, 0, 2], &a, 2).unwrap();
    assert_eq!(rows, vec![(0, 1, 2), (1, 2, 1)]);
}

#[test]
fn adjusted_rand_index_cases() {
    assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
    // contingency [[2,1],[0,2]]: index 2, rows 4, cols 4, expected 1.6, max 4
    let ari = adjusted_rand_index(&[0, 0, 0, 1, 1], &[0, 0, 1, 1, 1]).unwrap();
    assert!((ari - (2.0 - 1.6) / (4.0 - 1.6)).abs() < 1e-12);
}

#[test]
fn synthetic_topics_are_recoverable_at_low_noise() {
    for seed in 0..3 {
        let spec = SyntheticSpec {
            items: 300,
            users: 50,
            topics: 8,
            semantic_dim: 16,
            noise_scale: 0.1,
            seed,
            ..Default::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let ids: Vec<String> = (0..spec.items).map(|i| i.to_string()).collect();
        let rows: Vec<Vec<f64>> = ids.iter().map(|i| data.semantic.get(i).unwrap().to_vec()).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let km = kmeans_restarts(&x, 8, 100, 5, &mut SeededRng::new(seed)).unwrap();
        let ari = adjusted_rand_index(&km.assignment, &data.topics).unwrap();
        assert!(ari > 0.9, "seed {seed}: ARI {ari}");
    }
}
