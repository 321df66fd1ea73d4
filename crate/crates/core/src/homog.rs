//! Corrector problems and homogenized matrices.
//!
//! For a coefficient field on `Q_N` and a direction `e_j`, the corrector
//! `w_j` is the zero-mean periodic solution of `-div(A (e_j + grad w_j)) = 0`.
//! The apparent homogenized matrix is the flux average
//! `[A*_N]_ij = |Q_N|^-1 ∫ e_i . A (e_j + grad w_j)`, evaluated with the
//! assembly quadrature. The energy form `|Q_N|^-1 ∫ (e_i + grad w_i) . A (e_j + grad w_j)`
//! agrees with it up to the solver residual and is kept as a self-check.
//!
//! Directions are 0-based here: `direction = 0` is `e_1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::SmallMatrix;
use crate::pde::{
    assemble_field, constant_gradient_flux, load_from_flux, solve_periodic, DiscreteOperator, Mesh,
    QuadratureField, ScalarField, SolveStats, SolverSettings,
};
use crate::rfield::{CoefficientField, FieldRealization, UnitCellField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    /// Unit-cell problem of a periodic medium.
    Periodic,
    /// Corrector problem of one configuration on `Q_N`.
    Truncated { n: usize, seed: Option<u64> },
    /// Monte Carlo estimate of `E[A*_N]`.
    Estimated,
    /// Closed-form Voigt or Reuss bound.
    Bound,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HomogenizedMatrix {
    pub matrix: SmallMatrix,
    pub provenance: Provenance,
}

impl HomogenizedMatrix {
    pub fn new(matrix: SmallMatrix, provenance: Provenance) -> Self {
        Self { matrix, provenance }
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix.get(i, j)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        if let Provenance::Truncated { n, .. } = self.provenance {
            self.provenance = Provenance::Truncated { n, seed: Some(seed) };
        }
        self
    }
}

#[derive(Debug, Clone)]
pub struct CorrectorSolution {
    pub direction: usize,
    pub potential: ScalarField,
    /// `grad w` at every quadrature point.
    pub gradient: QuadratureField,
    pub stats: SolveStats,
}

/// An assembled corrector problem, reused across directions.
#[derive(Debug, Clone)]
pub struct CellProblem {
    op: DiscreteOperator,
    settings: SolverSettings,
}

pub(crate) fn unit_vector(dim: usize, i: usize) -> [f64; 2] {
    debug_assert!(i < dim);
    let mut p = [0.0; 2];
    p[i] = 1.0;
    p
}

impl CellProblem {
    pub fn new(field: &CoefficientField, resolution: usize, settings: SolverSettings) -> Result<Self> {
        let mesh = Mesh::new(field.dim(), field.n_cells(), resolution)?;
        Ok(Self {
            op: assemble_field(&mesh, field)?,
            settings,
        })
    }

    pub fn operator(&self) -> &DiscreteOperator {
        &self.op
    }

    pub fn mesh(&self) -> &Mesh {
        self.op.mesh()
    }

    pub fn dim(&self) -> usize {
        self.mesh().dim()
    }

    pub fn corrector(&self, direction: usize) -> Result<CorrectorSolution> {
        if direction >= self.dim() {
            return Err(Error::Config(format!(
                "direction {direction} out of range for dimension {}",
                self.dim()
            )));
        }
        let p = unit_vector(self.dim(), direction);
        let rhs = load_from_flux(self.mesh(), &constant_gradient_flux(&self.op, p))?;
        let (values, stats) = solve_periodic(&self.op, &rhs, &self.settings)?;
        let potential = ScalarField::new(*self.mesh(), values);
        let gradient = potential.gradient_at_quadrature();
        Ok(CorrectorSolution {
            direction,
            potential,
            gradient,
            stats,
        })
    }

    pub fn correctors(&self) -> Result<Vec<CorrectorSolution>> {
        (0..self.dim()).map(|i| self.corrector(i)).collect()
    }

    /// `∫_{Q_N} A (e_j + grad w_j)`, not normalized.
    pub fn flux_integral(&self, corrector: &CorrectorSolution) -> [f64; 2] {
        let mesh = self.mesh();
        let nq = mesh.quad_points();
        let p = unit_vector(self.dim(), corrector.direction);
        let coeffs = self.op.coefficients();
        crate::pde::integrate(mesh, |e, q| {
            let g = corrector.gradient[e * nq + q];
            coeffs[e].apply([p[0] + g[0], p[1] + g[1]])
        })
    }

    /// Flux-average matrix from one corrector per direction.
    pub fn flux_average(&self, correctors: &[CorrectorSolution]) -> SmallMatrix {
        let dim = self.dim();
        let volume = self.mesh().volume();
        let mut out = SmallMatrix::zeros(dim);
        for c in correctors {
            let flux = self.flux_integral(c);
            for (i, f) in flux.iter().enumerate().take(dim) {
                out.set(i, c.direction, f / volume);
            }
        }
        out
    }

    /// Energy-form matrix `|Q_N|^-1 ∫ (e_i + grad w_i) . A (e_j + grad w_j)`.
    pub fn energy_average(&self, correctors: &[CorrectorSolution]) -> SmallMatrix {
        let dim = self.dim();
        let mesh = self.mesh();
        let nq = mesh.quad_points();
        let volume = mesh.volume();
        let coeffs = self.op.coefficients();
        let mut out = SmallMatrix::zeros(dim);
        for ci in correctors {
            let pi = unit_vector(dim, ci.direction);
            for cj in correctors {
                let pj = unit_vector(dim, cj.direction);
                let v = crate::pde::integrate(mesh, |e, q| {
                    let gi = ci.gradient[e * nq + q];
                    let gj = cj.gradient[e * nq + q];
                    let a = coeffs[e].apply([pj[0] + gj[0], pj[1] + gj[1]]);
                    [(pi[0] + gi[0]) * a[0] + (pi[1] + gi[1]) * a[1], 0.0]
                })[0];
                out.set(ci.direction, cj.direction, v / volume);
            }
        }
        out
    }

    pub fn solve(&self) -> Result<CellSolution> {
        let correctors = self.correctors()?;
        let flux = self.flux_average(&correctors);
        let energy = self.energy_average(&correctors);
        Ok(CellSolution {
            flux,
            energy,
            correctors,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CellSolution {
    pub flux: SmallMatrix,
    pub energy: SmallMatrix,
    pub correctors: Vec<CorrectorSolution>,
}

impl CellSolution {
    /// Largest entrywise gap between the flux and energy forms.
    pub fn form_gap(&self) -> f64 {
        (self.flux - self.energy).max_abs()
    }
}

/// Corrector `w_{e_i}` for one realization (`direction` is 0-based).
pub fn corrector(
    realization: &FieldRealization,
    resolution: usize,
    direction: usize,
    settings: &SolverSettings,
) -> Result<CorrectorSolution> {
    CellProblem::new(realization.field(), resolution, *settings)?.corrector(direction)
}

/// `A*_N` of one coefficient field on `Q_N`.
pub fn homogenized_matrix(field: &CoefficientField, resolution: usize, settings: &SolverSettings) -> Result<HomogenizedMatrix> {
    let problem = CellProblem::new(field, resolution, *settings)?;
    let correctors = problem.correctors()?;
    Ok(HomogenizedMatrix::new(
        problem.flux_average(&correctors),
        Provenance::Truncated {
            n: field.n_cells(),
            seed: None,
        },
    ))
}

/// `A*_per` of a periodic medium from its unit-cell problem.
pub fn periodic_homogenize(unit: &UnitCellField, resolution: usize, settings: &SolverSettings) -> Result<HomogenizedMatrix> {
    let m = homogenized_matrix(&unit.to_field(), resolution, settings)?;
    Ok(HomogenizedMatrix::new(m.matrix, Provenance::Periodic))
}

/// `(mean of 1/a)^-1`, the exact 1D homogenized coefficient.
pub fn harmonic_mean_1d(cells: &[f64]) -> Result<f64> {
    if cells.is_empty() {
        return Err(Error::Domain("harmonic mean of an empty sequence".into()));
    }
    if let Some(bad) = cells.iter().find(|c| !(**c > 0.0) || !c.is_finite()) {
        return Err(Error::Domain(format!("harmonic mean needs positive entries, got {bad}")));
    }
    let inv: f64 = cells.iter().map(|c| 1.0 / c).sum();
    Ok(cells.len() as f64 / inv)
}

/// Cell average of `A` over `Q_N`.
pub fn voigt_bound(field: &CoefficientField) -> HomogenizedMatrix {
    HomogenizedMatrix::new(field.arithmetic_mean(), Provenance::Bound)
}

/// Inverse of the cell average of `A^-1` over `Q_N`.
pub fn reuss_bound(field: &CoefficientField) -> Result<HomogenizedMatrix> {
    Ok(HomogenizedMatrix::new(field.harmonic_mean()?, Provenance::Bound))
}

/// Ascending eigenvalues (closed form for `d <= 2`).
pub fn matrix_eigenvalues(m: &HomogenizedMatrix) -> Vec<f64> {
    m.matrix.eigenvalues()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rfield::{draw_field, FieldSpec};
    use crate::stream::rng_from_seed;

    fn tight() -> SolverSettings {
        SolverSettings::with_tol(1e-12)
    }

    #[test]
    fn constant_field_has_trivial_corrector() {
        let field = CoefficientField::constant(2, 3, SmallMatrix::scalar(2, 4.0));
        let problem = CellProblem::new(&field, 4, tight()).unwrap();
        let sol = problem.solve().unwrap();
        for c in &sol.correctors {
            assert!(c.potential.values().iter().all(|v| v.abs() < 1e-12));
        }
        assert!((sol.flux - SmallMatrix::scalar(2, 4.0)).max_abs() < 1e-12);
    }

    #[test]
    fn one_dimensional_flux_is_constant_harmonic_mean() {
        let field = CoefficientField::from_scalars(1, 2, &[1.0, 4.0]).unwrap();
        let problem = CellProblem::new(&field, 3, tight()).unwrap();
        let c = problem.corrector(0).unwrap();
        let coeffs = problem.operator().coefficients();
        for (e, g) in c.gradient.iter().enumerate() {
            let flux = coeffs[e].get(0, 0) * (1.0 + g[0]);
            assert!((flux - 1.6).abs() < 1e-10, "element {e}: {flux}");
        }
        let a = homogenized_matrix(&field, 1, &tight()).unwrap();
        assert!((a.get(0, 0) - 1.6).abs() < 1e-12);
        assert_eq!(harmonic_mean_1d(&[1.0, 4.0]).unwrap(), 1.6);
    }

    #[test]
    fn laminate_reduces_to_harmonic_and_arithmetic_means() {
        // Column x in [0,1) has a = 1, column [1,2) has a = 4.
        let field = CoefficientField::from_scalars(2, 2, &[1.0, 4.0, 1.0, 4.0]).unwrap();
        let sol = CellProblem::new(&field, 8, tight()).unwrap().solve().unwrap();
        let expected = SmallMatrix::diag(&[1.6, 2.5]);
        assert!((sol.flux - expected).max_abs() < 1e-6, "{:?}", sol.flux);
        assert!(sol.form_gap() < 1e-9);
    }

    #[test]
    fn periodic_two_material_cell() {
        let (alpha, beta) = (2.0, 7.0);
        let unit = UnitCellField::new(1, 2, vec![SmallMatrix::scalar(1, alpha), SmallMatrix::scalar(1, beta)]).unwrap();
        let a = periodic_homogenize(&unit, 4, &tight()).unwrap();
        assert_eq!(a.provenance, Provenance::Periodic);
        assert!((a.get(0, 0) - 2.0 * alpha * beta / (alpha + beta)).abs() < 1e-12);
        let c = periodic_homogenize(&UnitCellField::constant(SmallMatrix::scalar(2, 3.0)), 2, &tight()).unwrap();
        assert!((c.matrix - SmallMatrix::scalar(2, 3.0)).max_abs() < 1e-12);
    }

    #[test]
    fn periodic_data_is_consistent_across_box_sizes() {
        let unit = UnitCellField::new(
            2,
            2,
            vec![
                SmallMatrix::scalar(2, 1.0),
                SmallMatrix::scalar(2, 5.0),
                SmallMatrix::scalar(2, 2.0),
                SmallMatrix::scalar(2, 1.5),
            ],
        )
        .unwrap();
        let per = periodic_homogenize(&unit, 4, &tight()).unwrap();
        for n in [2, 3] {
            let tiled = homogenized_matrix(&CoefficientField::tile(&unit, n), 4, &tight()).unwrap();
            assert!((tiled.matrix - per.matrix).max_abs() < 1e-9);
        }
    }

    #[test]
    fn solver_agrees_with_harmonic_mean_in_1d() {
        let spec = FieldSpec::two_state(1, 3.0, 20.0, 0.5).unwrap();
        let mut rng = rng_from_seed(2024);
        for _ in 0..100 {
            let r = draw_field(&spec, 8, &mut rng).unwrap();
            let cells: Vec<f64> = r.field().values().iter().map(|m| m.get(0, 0)).collect();
            let a = homogenized_matrix(r.field(), 1, &SolverSettings::default()).unwrap();
            assert!((a.get(0, 0) - harmonic_mean_1d(&cells).unwrap()).abs() < 1e-8);
        }
    }

    #[test]
    fn bounds_bracket_the_checkerboard() {
        let spec = FieldSpec::two_state(2, 3.0, 20.0, 0.5).unwrap();
        let mut rng = rng_from_seed(99);
        for _ in 0..10 {
            let r = draw_field(&spec, 4, &mut rng).unwrap();
            let sol = CellProblem::new(r.field(), 4, SolverSettings::default()).unwrap().solve().unwrap();
            let upper = voigt_bound(r.field()).matrix - sol.flux;
            let lower = sol.flux - reuss_bound(r.field()).unwrap().matrix;
            assert!(upper.min_eigenvalue() >= -1e-8);
            assert!(lower.min_eigenvalue() >= -1e-8);
            assert!(sol.flux.asymmetry() <= 1e-10);
        }
    }

    #[test]
    fn equal_fraction_bounds() {
        let field = CoefficientField::from_scalars(2, 2, &[3.0, 20.0, 20.0, 3.0]).unwrap();
        assert!((voigt_bound(&field).matrix - SmallMatrix::scalar(2, 11.5)).max_abs() < 1e-14);
        let reuss = reuss_bound(&field).unwrap().matrix;
        assert!((reuss - SmallMatrix::scalar(2, 120.0 / 23.0)).max_abs() < 1e-12);
    }

    #[test]
    fn shifted_field_gives_shifted_corrector() {
        let field = CoefficientField::from_scalars(2, 2, &[3.0, 20.0, 20.0, 20.0]).unwrap();
        let shifted = field.shifted([1, 1]);
        let r = 4;
        let a = CellProblem::new(&field, r, tight()).unwrap().corrector(0).unwrap();
        let b = CellProblem::new(&shifted, r, tight()).unwrap().corrector(0).unwrap();
        let mesh = a.potential.mesh();
        let side = mesh.side();
        for y in 0..side {
            for x in 0..side {
                let u = a.potential.values()[mesh.index(x, y)];
                let v = b.potential.values()[mesh.index(x + r, y + r)];
                assert!((u - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn eigenvalue_examples() {
        let c = HomogenizedMatrix::new(SmallMatrix::scalar(2, 2.0), Provenance::Estimated);
        assert_eq!(matrix_eigenvalues(&c), vec![2.0, 2.0]);
        let d = HomogenizedMatrix::new(SmallMatrix::diag(&[2.5, 1.6]), Provenance::Estimated);
        assert_eq!(matrix_eigenvalues(&d), vec![1.6, 2.5]);
    }

    #[test]
    fn harmonic_mean_domain() {
        assert_eq!(harmonic_mean_1d(&[2.5; 4]).unwrap(), 2.5);
        assert!(harmonic_mean_1d(&[1.0, 0.0]).is_err());
        assert!(harmonic_mean_1d(&[]).is_err());
    }

    #[test]
    fn direction_out_of_range() {
        let field = CoefficientField::constant(1, 2, SmallMatrix::scalar(1, 1.0));
        let p = CellProblem::new(&field, 2, tight()).unwrap();
        assert!(matches!(p.corrector(1), Err(Error::Config(_))));
    }

    #[test]
    fn mesh_refinement_converges_on_checkerboard() {
        let field = CoefficientField::from_scalars(2, 2, &[3.0, 20.0, 20.0, 3.0]).unwrap();
        let values: Vec<f64> = [2, 4, 8]
            .iter()
            .map(|r| homogenized_matrix(&field, *r, &tight()).unwrap().get(0, 0))
            .collect();
        assert!((values[1] - values[2]).abs() < (values[0] - values[1]).abs());
    }
}
