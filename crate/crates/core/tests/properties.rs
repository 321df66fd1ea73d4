use hvr_core::control_variate::{canonical_offsets, optimal_rho};
use hvr_core::homog::{homogenized_matrix, reuss_bound, voigt_bound};
use hvr_core::mc::{confidence_interval, mean_and_variance};
use hvr_core::rfield::CoefficientField;
use hvr_core::sqs::{autocorrelation, sqs1_residual};
use hvr_core::SolverSettings;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

fn signs(count: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { 1.0 } else { -1.0 }), count)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn apparent_matrix_lies_between_the_bounds(cells in prop::collection::vec(0.5f64..10.0, 9)) {
        let field = CoefficientField::from_scalars(2, 3, &cells).unwrap();
        let a = homogenized_matrix(&field, 2, &SolverSettings::with_tol(1e-12)).unwrap().matrix;
        let upper = voigt_bound(&field).matrix - a;
        let lower = a - reuss_bound(&field).unwrap().matrix;
        prop_assert!(upper.min_eigenvalue() >= -1e-8);
        prop_assert!(lower.min_eigenvalue() >= -1e-8);
    }
}

proptest! {
    #[test]
    fn mean_residual_ignores_cell_order(x in signs(16), seed in 0u64..1000) {
        let mut shuffled = x.clone();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        prop_assert_eq!(sqs1_residual(&x, 4), sqs1_residual(&shuffled, 4));
    }

    #[test]
    fn autocorrelation_sums(x in signs(25)) {
        let c = autocorrelation(&x, 5, 2);
        prop_assert_eq!(c[0], 25.0);
        let total: f64 = x.iter().sum();
        prop_assert!((c.iter().sum::<f64>() - total * total).abs() < 1e-9);
    }

    #[test]
    fn least_squares_weights_never_increase_variance(
        data in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0), 3..40)
    ) {
        let x: Vec<f64> = data.iter().map(|d| d.0 + 0.5 * d.1).collect();
        let y: Vec<Vec<f64>> = data.iter().map(|d| vec![d.1, d.2]).collect();
        let fit = optimal_rho(&x, &y).unwrap();
        let controlled: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - fit.rho[0] * b[0] - fit.rho[1] * b[1]).collect();
        let (_, raw) = mean_and_variance(&x);
        let (_, after) = mean_and_variance(&controlled);
        prop_assert!(after <= raw * (1.0 + 1e-10) + 1e-12);
    }

    #[test]
    fn offsets_partition_the_nonzero_shifts(n in 1usize..9, dim in 1usize..3) {
        let total: usize = canonical_offsets(dim, n, n as f64).iter().map(|o| o.1).sum();
        prop_assert_eq!(total, n.pow(dim as u32) - 1);
    }
}

#[test]
fn confidence_intervals_cover_at_the_nominal_rate() {
    let normal = Normal::new(2.0, 3.0).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(95);
    let batches = 1000;
    let covered = (0..batches)
        .filter(|_| {
            let xs: Vec<f64> = (0..100).map(|_| normal.sample(&mut rng)).collect();
            let (mean, var) = mean_and_variance(&xs);
            let (lo, hi) = confidence_interval(mean, var, xs.len());
            lo <= 2.0 && 2.0 <= hi
        })
        .count();
    let rate = covered as f64 / batches as f64;
    assert!((rate - 0.95).abs() <= 0.02, "coverage {rate}");
}
