use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use planweave_core::backends::{FixtureEmbedder, Space};
use planweave_core::metrics::{frechet_distance, meteor, rouge_l, solve_transport, wmd, DistributionMoments};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: &[&str] = &[
    "cut", "fold", "glue", "paper", "stem", "petal", "wrap", "ribbon", "bake", "mix", "flour", "sugar", "oven", "pour",
    "stir", "heat", "slice", "serve", "the", "a",
];

fn sentence(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    (0..n).map(|_| VOCAB.choose(rng).unwrap().to_string()).collect()
}

fn lexical(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = c.benchmark_group("lexical");
    for n in [20, 100, 400] {
        let (a, b) = (sentence(&mut rng, n), sentence(&mut rng, n));
        g.bench_with_input(BenchmarkId::new("rouge_l", n), &(a, b), |bench, (a, b)| {
            bench.iter(|| rouge_l(black_box(a), black_box(b)).unwrap())
        });
    }
    for n in [10, 30, 60] {
        let (a, b) = (sentence(&mut rng, n), sentence(&mut rng, n));
        g.bench_with_input(BenchmarkId::new("meteor", n), &(a, b), |bench, (a, b)| {
            bench.iter(|| meteor(black_box(a), black_box(b)).unwrap())
        });
    }
    g.finish();
}

fn transport(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = c.benchmark_group("transport");
    for n in [8, 32, 96] {
        let weights = |rng: &mut ChaCha8Rng| {
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let (supply, demand) = (weights(&mut rng), weights(&mut rng));
        let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(0.0..5.0)).collect()).collect();
        g.bench_with_input(BenchmarkId::new("solve", n), &(supply, demand, cost), |bench, (s, d, c)| {
            bench.iter(|| solve_transport(black_box(s), black_box(d), black_box(c)).unwrap())
        });
    }

    let mut e = FixtureEmbedder::new("bench");
    for w in VOCAB {
        e.insert(Space::Word, *w, (0..50).map(|_| rng.random_range(-1.0..1.0)).collect());
    }
    let (a, b) = (sentence(&mut rng, 60), sentence(&mut rng, 60));
    g.bench_function("wmd_60_tokens", |bench| bench.iter(|| wmd(black_box(&a), black_box(&b), &e).unwrap()));
    g.finish();
}

fn frechet(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = c.benchmark_group("frechet");
    for d in [16, 64, 256] {
        // 2d samples keep the fitted covariances full rank
        let feats = |rng: &mut ChaCha8Rng| {
            let rows: Vec<Vec<f64>> = (0..2 * d).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            DistributionMoments::from_features(&rows).unwrap()
        };
        let (a, b) = (feats(&mut rng), feats(&mut rng));
        g.bench_with_input(BenchmarkId::new("distance", d), &(a, b), |bench, (a, b)| {
            bench.iter(|| frechet_distance(black_box(a), black_box(b)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, lexical, transport, frechet);
criterion_main!(benches);
