use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use droplet_core::counting::{card_omega, enumerate_admissible, stirling2, DEFAULT_BUDGET};
use droplet_core::entropy::relative_entropy;
use droplet_core::lde::{exact_probabilities, lde_sweep, reference_family};
use droplet_core::params::CapChoice;
use droplet_core::poisson::{solve_alpha, ALPHA_TOL};
use droplet_core::sample::{sample_exact, sample_rejection};
use droplet_core::ModelParams;

fn big_params() -> ModelParams {
    // 40 sites at density 2: 14264 admissible vectors under the default cap
    ModelParams::new(1, 2, 1, 40, 5).unwrap()
}

fn counting(c: &mut Criterion) {
    let p = big_params();
    c.bench_function("enumerate_admissible_n40", |b| {
        b.iter(|| enumerate_admissible(black_box(&p), DEFAULT_BUDGET).unwrap())
    });
    c.bench_function("card_omega_n40", |b| {
        b.iter(|| card_omega(black_box(&p), DEFAULT_BUDGET).unwrap())
    });
    c.bench_function("stirling2_k120_n40", |b| {
        b.iter(|| stirling2(black_box(120), black_box(40), 1).unwrap())
    });
}

fn solving(c: &mut Criterion) {
    c.bench_function("solve_alpha_b2_c3", |b| {
        b.iter(|| solve_alpha(black_box(2), black_box(3.0), ALPHA_TOL).unwrap())
    });
}

fn entropy(c: &mut Criterion) {
    let p = big_params();
    let rho = reference_family(&p).unwrap();
    let theta = rho.to_measure();
    c.bench_function("relative_entropy_vs_reference", |b| {
        b.iter(|| relative_entropy(black_box(&theta), black_box(&rho)).unwrap())
    });
}

fn lde(c: &mut Criterion) {
    let p = big_params();
    c.bench_function("exact_probabilities_n40", |b| {
        b.iter(|| exact_probabilities(black_box(&p), DEFAULT_BUDGET).unwrap())
    });
    c.bench_function("lde_sweep_to_n24", |b| {
        b.iter(|| {
            lde_sweep(1, 2, 1, &[8, 16, 24], CapChoice::default(), DEFAULT_BUDGET).unwrap()
        })
    });
}

fn samplers(c: &mut Criterion) {
    let p = ModelParams::new(1, 2, 1, 6, 6).unwrap();
    let mut seed = 0u64;
    c.bench_function("sample_exact_1k_n6", |b| {
        b.iter_batched(
            || {
                seed += 1;
                seed
            },
            |s| sample_exact(&p, 1000, s, DEFAULT_BUDGET).unwrap(),
            BatchSize::SmallInput,
        )
    });
    c.bench_function("sample_rejection_1k_n6", |b| {
        b.iter_batched(
            || {
                seed += 1;
                seed
            },
            |s| sample_rejection(&p, 1000, s, DEFAULT_BUDGET).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, counting, solving, entropy, lde, samplers);
criterion_main!(benches);
