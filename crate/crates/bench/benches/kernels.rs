use std::hint::black_box;

use bolaco_core::linalg::eig_sym_desc;
use bolaco_core::model::synth_weights;
use bolaco_core::surrogate::{expected_improvement, gp_fit, KernelParams, Observation};
use bolaco_core::{AfmBasis, CovAccumulator, LanguageModel, ModelConfig};
use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn covariance(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(4096, 64, &mut rng);
    c.bench_function("welford 4096x64", |b| {
        b.iter(|| {
            let mut acc = CovAccumulator::new(64).unwrap();
            acc.accumulate_rows(black_box(x.view())).unwrap();
            acc.finalize().unwrap()
        })
    });
}

fn eigen(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for dim in [64, 176] {
        let m = random(2 * dim, dim, &mut rng);
        let sym = m.t().dot(&m);
        c.bench_function(&format!("jacobi eig {dim}"), |b| b.iter(|| eig_sym_desc(black_box(&sym)).unwrap()));
    }
}

fn afm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(2048, 176, &mut rng);
    let mut acc = CovAccumulator::new(176).unwrap();
    acc.accumulate_rows(x.view()).unwrap();
    let stats = acc.finalize().unwrap();
    let w = random(176, 64, &mut rng);
    let basis = AfmBasis::from_stats(&stats).unwrap();
    c.bench_function("afm factors 176x64 r32", |b| b.iter(|| basis.factors(black_box(&w), 32).unwrap()));
}

fn forward(c: &mut Criterion) {
    let model = synth_weights(&ModelConfig::default(), 0).unwrap();
    let tokens: Vec<u32> = (0..128).map(|i| (i * 37 % 256) as u32).collect();
    c.bench_function("forward 128 tokens", |b| b.iter(|| model.forward(black_box(&tokens)).unwrap()));
}

fn surrogate(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let obs: Vec<Observation> = (0..50)
        .map(|_| {
            let p: Vec<f64> = (0..5).map(|_| rng.random()).collect();
            let v = p.iter().map(|x| (3.0 * x).sin()).sum();
            Observation::new(p, v)
        })
        .collect();
    let params = KernelParams::new(vec![1.0, 1.0, 0.8, 0.8, 0.8]);
    c.bench_function("gp fit 50 points", |b| b.iter(|| gp_fit(black_box(&obs), &params).unwrap()));
    let gp = gp_fit(&obs, &params).unwrap();
    let queries: Vec<Vec<f64>> = (0..1024).map(|_| (0..5).map(|_| rng.random()).collect()).collect();
    c.bench_function("ei 1024 candidates", |b| {
        b.iter(|| queries.iter().map(|q| expected_improvement(&gp, q, 0.0).unwrap()).sum::<f64>())
    });
}

criterion_group!(benches, covariance, eigen, afm, forward, surrogate);
criterion_main!(benches);
