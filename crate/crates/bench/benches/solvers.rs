use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hvr_bench::{checkerboard, defect_perturbation, sign_perturbation};
use hvr_core::control_variate::{control_values, DefectCoefficients, DefectKey};
use hvr_core::homog::homogenized_matrix;
use hvr_core::sqs::{sample_exact_sqs1, sqs2_residual, SqsKey, SqsTables};
use hvr_core::stream::{Domain, Streams};
use hvr_core::SolverSettings;
use std::hint::black_box;

fn correctors(c: &mut Criterion) {
    let mut group = c.benchmark_group("homogenized_matrix");
    group.sample_size(10);
    let settings = SolverSettings::default();
    for n in [4, 8, 10] {
        let field = checkerboard(n, 7);
        group.bench_with_input(BenchmarkId::new("checkerboard_r8", n), &field, |b, f| {
            b.iter(|| homogenized_matrix(black_box(f), 8, &settings).unwrap())
        });
    }
    group.finish();
}

fn defect_table(c: &mut Criterion) {
    let mut group = c.benchmark_group("defect_table");
    group.sample_size(10);
    let settings = SolverSettings::default();
    let key = DefectKey::from_spec(&defect_perturbation(), 4, 4, &settings);
    group.bench_function("N4_r4_cutoff2", |b| {
        b.iter(|| DefectCoefficients::build(key.clone(), Some(2.0), &settings, None).unwrap())
    });
    let table = DefectCoefficients::build(key, Some(2.0), &settings, None).unwrap();
    let pairs = table.pair_lookup();
    let bits: Vec<f64> = (0..16).map(|k| (k % 3 == 0) as u8 as f64).collect();
    group.bench_function("controls_N4", |b| b.iter(|| control_values(black_box(&bits), &table, Some(&pairs))));
    group.finish();
}

fn selection(c: &mut Criterion) {
    let mut group = c.benchmark_group("selection");
    let n = 10;
    let tables = SqsTables::build(SqsKey::new(&sign_perturbation(), n, 4, Some(2 * n), &SolverSettings::default())).unwrap();
    let streams = Streams::new(3);
    group.bench_function("sample_exact_sqs1_N10", |b| {
        let mut rng = streams.rng(Domain::Pool, 0);
        b.iter(|| sample_exact_sqs1(n, 2, &mut rng).unwrap())
    });
    let x = sample_exact_sqs1(n, 2, &mut streams.rng(Domain::Pool, 1)).unwrap();
    group.bench_function("sqs2_residual_N10", |b| b.iter(|| sqs2_residual(black_box(&x), &tables).unwrap()));
    group.finish();
}

criterion_group!(benches, correctors, defect_table, selection);
criterion_main!(benches);
