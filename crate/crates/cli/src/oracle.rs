//! Built-in oracle suite: exact 1D harmonic means, the 2D laminate and the
//! Voigt/Reuss bounds.

use std::time::Instant;

use hvr_core::homog::{harmonic_mean_1d, homogenized_matrix, reuss_bound, voigt_bound};
use hvr_core::rfield::{draw_field, CoefficientField};
use hvr_core::stream::{Domain, Streams};
use hvr_core::{FieldSpec, SmallMatrix, SolverSettings};
use serde::Serialize;

pub const ORACLE_SEED: u64 = 1_234_567;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleCheck {
    pub name: String,
    pub passed: bool,
    /// Largest deviation from the oracle (negative slack for bounds).
    pub worst: f64,
    pub tolerance: f64,
    pub cases: usize,
    #[serde(skip)]
    pub seconds: f64,
}

impl OracleCheck {
    pub fn line(&self) -> String {
        format!(
            "{} {}: {} cases, worst {:.3e} (tolerance {:.0e}), {:.2} s",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.worst,
            self.tolerance,
            self.seconds
        )
    }
}

fn settings() -> SolverSettings {
    SolverSettings::with_tol(1e-12)
}

/// `A*_N` against the harmonic mean for `draws` 1D Bernoulli(3, 20) fields.
pub fn harmonic_mean_check(draws: usize, n: usize, seed: u64) -> hvr_core::Result<OracleCheck> {
    let start = Instant::now();
    let spec = FieldSpec::two_state(1, 3.0, 20.0, 0.5)?;
    let streams = Streams::new(seed);
    let mut worst: f64 = 0.0;
    for i in 0..draws {
        let field = draw_field(&spec, n, &mut streams.rng(Domain::Field, i as u64))?;
        let cells: Vec<f64> = field.field().values().iter().map(|v| v.get(0, 0)).collect();
        let exact = harmonic_mean_1d(&cells)?;
        let got = homogenized_matrix(field.field(), 4, &settings())?.get(0, 0);
        worst = worst.max((got - exact).abs());
    }
    let tolerance = 1e-8;
    Ok(OracleCheck {
        name: format!("1D harmonic mean, N = {n}"),
        passed: worst <= tolerance,
        worst,
        tolerance,
        cases: draws,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Layers `{1, 4}` alternating along x: `diag(1.6, 2.5)`.
pub fn laminate_check(r: usize) -> hvr_core::Result<OracleCheck> {
    let start = Instant::now();
    let field = CoefficientField::from_scalars(2, 2, &[1.0, 4.0, 1.0, 4.0])?;
    let got = homogenized_matrix(&field, r, &settings())?.matrix;
    let worst = (got - SmallMatrix::diag(&[1.6, 2.5])).max_abs();
    let tolerance = 1e-4;
    Ok(OracleCheck {
        name: format!("2D laminate, r = {r}"),
        passed: worst <= tolerance,
        worst,
        tolerance,
        cases: 1,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// `Reuss <= A*_N <= Voigt` in the quadratic-form order over 2D
/// checkerboard draws.
pub fn bounds_check(draws: usize, n: usize, r: usize, seed: u64) -> hvr_core::Result<OracleCheck> {
    let start = Instant::now();
    let spec = FieldSpec::two_state(2, 3.0, 20.0, 0.5)?;
    let streams = Streams::new(seed);
    let mut worst = f64::NEG_INFINITY;
    for i in 0..draws {
        let realization = draw_field(&spec, n, &mut streams.rng(Domain::Field, i as u64))?;
        let field = realization.field();
        let a = homogenized_matrix(field, r, &settings())?.matrix;
        let upper = (voigt_bound(field).matrix - a).min_eigenvalue();
        let lower = (a - reuss_bound(field)?.matrix).min_eigenvalue();
        worst = worst.max(-upper.min(lower));
    }
    let tolerance = 1e-8;
    Ok(OracleCheck {
        name: format!("Voigt/Reuss bounds, N = {n}, r = {r}"),
        passed: worst <= tolerance,
        worst,
        tolerance,
        cases: draws,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn suite() -> hvr_core::Result<Vec<OracleCheck>> {
    Ok(vec![
        harmonic_mean_check(100, 8, ORACLE_SEED)?,
        laminate_check(16)?,
        bounds_check(100, 8, 8, ORACLE_SEED)?,
    ])
}
