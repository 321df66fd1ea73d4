//! Expansion of `A*_N` in the perturbation amplitude and the reduced
//! selection conditions built on it.

use hvr_core::homog::homogenized_matrix;
use hvr_core::rfield::realize_perturbation;
use hvr_core::sqs::{
    expansion_terms, interaction_direct, interaction_table, sample_exact_sqs1, sqs1_residual, sqs2_lhs, SqsKey,
    SqsTables,
};
use hvr_core::stream::{rng_from_seed, Domain, Streams};
use hvr_core::{PerturbationSpec, SmallMatrix, SolverSettings, UnitCellField, XLaw};
use rand::Rng;

fn tight() -> SolverSettings {
    SolverSettings::with_tol(1e-13)
}

fn unit_spec(eta: f64) -> PerturbationSpec {
    PerturbationSpec::new(
        SmallMatrix::identity(2),
        UnitCellField::constant(SmallMatrix::identity(2)),
        eta,
        XLaw::PlusMinusOne,
    )
    .unwrap()
}

/// `C1` varying inside the unit cell, on a 2x2 sub-grid.
fn layered_spec(eta: f64) -> PerturbationSpec {
    let c1 = UnitCellField::new(
        2,
        2,
        vec![
            SmallMatrix::diag(&[1.0, 0.5]),
            SmallMatrix::diag(&[0.2, 0.2]),
            SmallMatrix::from_rows(&[&[0.6, 0.1], &[0.1, 0.4]]).unwrap(),
            SmallMatrix::diag(&[0.9, 1.0]),
        ],
    )
    .unwrap();
    PerturbationSpec::new(SmallMatrix::diag(&[1.5, 1.0]), c1, eta, XLaw::PlusMinusOne).unwrap()
}

fn random_signs(count: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    (0..count).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

fn log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mx, my) = points.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0.ln() / n, a.1 + p.1.ln() / n));
    let sxy: f64 = points.iter().map(|p| (p.0.ln() - mx) * (p.1.ln() - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0.ln() - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn remainder_after_second_order_is_cubic() {
    for (spec_at, n, r) in [(unit_spec as fn(f64) -> PerturbationSpec, 4, 4), (layered_spec, 3, 4)] {
        let x = random_signs(n * n, 21);
        let terms = expansion_terms(&spec_at(0.5), &x, n, r, &tight()).unwrap();
        let points: Vec<(f64, f64)> = [0.2, 0.1, 0.05]
            .iter()
            .map(|eta| {
                let field = realize_perturbation(&spec_at(*eta), &x, n).unwrap();
                let full = homogenized_matrix(field.field(), r, &tight()).unwrap().matrix;
                (*eta, (full - terms.truncated(*eta)).max_abs())
            })
            .collect();
        let slope = log_slope(&points);
        assert!(slope >= 2.7, "slope {slope}, {points:?}");
    }
}

#[test]
fn zeroth_order_term_is_configuration_independent() {
    let spec = unit_spec(0.5);
    let reference = expansion_terms(&spec, &random_signs(9, 0), 3, 4, &tight()).unwrap().a0;
    assert!((reference - SmallMatrix::identity(2)).max_abs() < 1e-10);
    for seed in 1..10 {
        let a0 = expansion_terms(&spec, &random_signs(9, seed), 3, 4, &tight()).unwrap().a0;
        assert!((a0 - reference).max_abs() < 1e-10);
    }
}

#[test]
fn first_order_term_is_constant_over_balanced_configurations() {
    let spec = unit_spec(0.5);
    let streams = Streams::new(77);
    let mut first = None;
    for i in 0..5 {
        let x = sample_exact_sqs1(4, 2, &mut streams.rng(Domain::Auxiliary, i)).unwrap();
        let a1 = expansion_terms(&spec, &x, 4, 2, &tight()).unwrap().a1;
        let reference = *first.get_or_insert(a1);
        assert!((a1 - reference).max_abs() < 1e-8);
    }
}

#[test]
fn interaction_depends_on_the_offset_only() {
    let spec = unit_spec(0.5);
    let n = 4;
    let (table, _) = interaction_table(spec.c0, &spec.c1, n, 4, &tight()).unwrap();
    let direct = interaction_direct(spec.c0, &spec.c1, n, 4, [1, 0], [2, 1], &tight()).unwrap();
    assert!((direct - table[n + 1]).max_abs() < 1e-8, "{direct:?} vs {:?}", table[n + 1]);
    let layered = layered_spec(0.5);
    let (table, _) = interaction_table(layered.c0, &layered.c1, 3, 4, &tight()).unwrap();
    let direct = interaction_direct(layered.c0, &layered.c1, 3, 4, [2, 2], [0, 1], &tight()).unwrap();
    // (0, 1) - (2, 2) = (1, 2) modulo 3.
    assert!((direct - table[2 * 3 + 1]).max_abs() < 1e-8);
}

#[test]
fn reduced_second_order_sum_equals_the_second_order_term() {
    for (spec, n) in [(unit_spec(0.5), 4), (layered_spec(0.5), 3)] {
        let tables = SqsTables::build(SqsKey::new(&spec, n, 4, Some(n), &tight())).unwrap();
        for seed in [3, 4] {
            let x = random_signs(n * n, seed);
            let a2 = expansion_terms(&spec, &x, n, 4, &tight()).unwrap().a2;
            let lhs = sqs2_lhs(&x, &tables).unwrap();
            assert!((a2 - lhs).max_abs() < 1e-8, "{a2:?} vs {lhs:?}");
        }
    }
}

#[test]
fn reference_interaction_error_estimate_is_self_consistent() {
    let spec = unit_spec(0.5);
    let tables = SqsTables::build(SqsKey::new(&spec, 2, 4, Some(4), &tight())).unwrap();
    let (twice, _) = interaction_table(spec.c0, &spec.c1, 8, 4, &tight()).unwrap();
    let gap = (tables.i_infinity - twice[0]).max_abs();
    assert!(gap < tables.i_infinity_error, "{gap} vs {}", tables.i_infinity_error);
}

#[test]
fn balanced_sampler_is_exchangeable() {
    let streams = Streams::new(2024);
    let draws = 10_000;
    let mut sums = [0.0; 16];
    for i in 0..draws {
        let x = sample_exact_sqs1(4, 2, &mut streams.rng(Domain::Auxiliary, i)).unwrap();
        assert_eq!(sqs1_residual(&x, 4), 0.0);
        for (s, v) in sums.iter_mut().zip(&x) {
            *s += v;
        }
    }
    let sigma = 1.0 / (draws as f64).sqrt();
    for s in sums {
        assert!((s / draws as f64).abs() <= 3.0 * sigma);
    }
}
