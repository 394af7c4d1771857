use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use letter_core::genrec::{constrained_beam_search, history_tokens, RecommenderArch};
use letter_core::regularizers::constrained_kmeans;
use letter_core::tokenizer::{assign_identifiers, residual_quantize};
use letter_core::{IdentifierTrie, RecommenderModel, SeededRng, Tensor, TokenVocabulary};
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let mut rng = SeededRng::new(0);
    let mut g = c.benchmark_group("matmul");
    for n in [64usize, 256] {
        let a = rng.normal_tensor(&[n, n], 1.0);
        let b = rng.normal_tensor(&[n, n], 1.0);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(a.matmul(&b).unwrap()))
        });
    }
    g.finish();
}

fn quantize(c: &mut Criterion) {
    let mut rng = SeededRng::new(1);
    let levels: Vec<Tensor> = (0..3).map(|_| rng.normal_tensor(&[256, 32], 1.0)).collect();
    let zs: Vec<Vec<f64>> = (0..100).map(|_| (0..32).map(|_| rng.normal()).collect()).collect();
    c.bench_function("residual_quantize 100x(L=3,N=256,d=32)", |b| {
        b.iter(|| {
            for z in &zs {
                black_box(residual_quantize(z, &levels).unwrap());
            }
        })
    });
}

fn kmeans(c: &mut Criterion) {
    let pts = SeededRng::new(2).normal_tensor(&[256, 32], 1.0);
    c.bench_function("constrained_kmeans N=256 K=10", |b| {
        b.iter(|| black_box(constrained_kmeans(&pts, 10, 3).unwrap()))
    });
}

fn beam(c: &mut Criterion) {
    let mut rng = SeededRng::new(4);
    let n = 2000;
    let codes: Vec<Vec<usize>> = (0..n).map(|_| (0..3).map(|_| rng.below(256)).collect()).collect();
    let a = assign_identifiers(&codes);
    let vocab = TokenVocabulary::for_assignment(&a, 256).unwrap();
    let toks = vocab.item_tokens(&a).unwrap();
    let trie = IdentifierTrie::build(&toks).unwrap();
    let arch = RecommenderArch {
        layers: 2,
        width: 64,
        heads: 4,
        ffn_mult: 4,
    };
    let model = RecommenderModel::new(arch, vocab, 128, &mut rng).unwrap();
    let hist: Vec<usize> = (0..20).map(|_| rng.below(n)).collect();
    let prefix = history_tokens(&hist, &toks);
    let mut g = c.benchmark_group("beam_search");
    g.sample_size(20);
    for width in [10usize, 20] {
        g.bench_with_input(BenchmarkId::from_parameter(width), &width, |b, &w| {
            b.iter(|| black_box(constrained_beam_search(&model, &prefix, &trie, w).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, matmul, quantize, kmeans, beam);
criterion_main!(benches);
