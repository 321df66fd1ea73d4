//! Periodic Q1/P1 finite elements for `-div(A (grad v + g)) = div(h)` on `Q_N`.
//!
//! Coefficients are constant per element. The same quadrature rule is used
//! for assembly, loads and every flux or energy average, so discrete
//! variational identities hold to round-off.

mod mesh;
mod operator;
mod solver;

pub use mesh::Mesh;
pub use operator::{
    assemble, assemble_field, constant_gradient_flux, element_coefficients, load_from_flux, CsrMatrix,
    DiscreteOperator, QuadratureField,
};
pub use solver::{check_consistency, solve_periodic, Load, solves_on_this_thread, SolveStats, SolverSettings};

use crate::error::Result;
use crate::matrix::SmallMatrix;

/// Nodal values of a periodic Q1 (2D) or P1 (1D) function.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    mesh: Mesh,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(mesh: Mesh, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), mesh.node_count());
        Self { mesh, values }
    }

    pub fn zeros(mesh: Mesh) -> Self {
        Self::new(mesh, vec![0.0; mesh.node_count()])
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Integral mean over `Q_N`. Nodes carry equal weight on a uniform
    /// periodic grid.
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// `grad v` at every quadrature point, `[e * nq + q]`.
    pub fn gradient_at_quadrature(&self) -> QuadratureField {
        let mesh = &self.mesh;
        let grads = mesh.shape_gradients();
        let nq = mesh.quad_points();
        let na = mesh.nodes_per_element();
        let mut out = Vec::with_capacity(mesh.element_count() * nq);
        for e in 0..mesh.element_count() {
            let nodes = mesh.element_nodes(e);
            for g in grads.iter().take(nq) {
                let mut v = [0.0; 2];
                for a in 0..na {
                    let u = self.values[nodes[a]];
                    v[0] += g[a][0] * u;
                    v[1] += g[a][1] * u;
                }
                out.push(v);
            }
        }
        out
    }
}

/// Solves `K u = b` and wraps the zero-mean result.
pub fn solve_field(op: &DiscreteOperator, rhs: &Load, settings: &SolverSettings) -> Result<ScalarField> {
    let (values, _) = solve_periodic(op, rhs, settings)?;
    Ok(ScalarField::new(*op.mesh(), values))
}

/// `sum_e sum_q w * f(e, q)` for a vector-valued integrand, i.e. the
/// integral over `Q_N` with the assembly quadrature.
pub fn integrate(mesh: &Mesh, mut f: impl FnMut(usize, usize) -> [f64; 2]) -> [f64; 2] {
    let nq = mesh.quad_points();
    let w = mesh.quad_weight();
    let mut acc = [0.0; 2];
    for e in 0..mesh.element_count() {
        for q in 0..nq {
            let v = f(e, q);
            acc[0] += w * v[0];
            acc[1] += w * v[1];
        }
    }
    acc
}

/// Quadrature energy `sum w (grad v)^T A (grad v)`.
pub fn quadrature_energy(op: &DiscreteOperator, grad: &[[f64; 2]]) -> f64 {
    let mesh = op.mesh();
    let nq = mesh.quad_points();
    let w = mesh.quad_weight();
    let coeffs: &[SmallMatrix] = op.coefficients();
    grad.iter()
        .enumerate()
        .map(|(i, g)| {
            let ag = coeffs[i / nq].apply(*g);
            w * (g[0] * ag[0] + g[1] * ag[1])
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::rng_from_seed;
    use nalgebra::DMatrix;
    use rand::Rng;

    fn random_operator(dim: usize, n: usize, r: usize, seed: u64) -> DiscreteOperator {
        let mesh = Mesh::new(dim, n, r).unwrap();
        let mut rng = rng_from_seed(seed);
        let coeffs = (0..mesh.element_count())
            .map(|_| {
                if dim == 1 {
                    SmallMatrix::scalar(1, rng.random_range(0.5..5.0))
                } else {
                    let a = rng.random_range(1.0..5.0);
                    let d = rng.random_range(1.0..5.0);
                    let b = rng.random_range(-0.5..0.5);
                    SmallMatrix::from_rows(&[&[a, b], &[b, d]]).unwrap()
                }
            })
            .collect();
        assemble(&mesh, coeffs).unwrap()
    }

    fn random_consistent_rhs(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        let mut b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mean = b.iter().sum::<f64>() / n as f64;
        b.iter_mut().for_each(|v| *v -= mean);
        b
    }

    fn dense(op: &DiscreteOperator) -> DMatrix<f64> {
        let rows = op.stiffness().to_dense();
        let n = rows.len();
        DMatrix::from_fn(n, n, |i, j| rows[i][j])
    }

    #[test]
    fn spectrum_is_semidefinite_with_one_kernel_mode() {
        for (dim, n, r) in [(1, 3, 2), (2, 2, 3), (2, 1, 4)] {
            let op = random_operator(dim, n, r, 5);
            let eig = dense(&op).symmetric_eigen().eigenvalues;
            let scale = eig.iter().cloned().fold(0.0, f64::max);
            assert!(eig.iter().all(|l| *l >= -1e-12 * scale));
            let near_zero = eig.iter().filter(|l| l.abs() < 1e-10 * scale).count();
            assert_eq!(near_zero, 1, "dim {dim}: {eig}");
        }
    }

    #[test]
    fn matches_dense_pseudo_inverse() {
        for (dim, n, r, seed) in [(1, 5, 4, 1), (2, 2, 5, 2), (2, 3, 7, 3)] {
            let op = random_operator(dim, n, r, seed);
            let nodes = op.mesh().node_count();
            assert!(nodes <= 500);
            let b = random_consistent_rhs(nodes, seed + 100);
            let (x, stats) = solve_periodic(&op, &b.clone().into(), &SolverSettings::with_tol(1e-12)).unwrap();
            assert!(stats.relative_residual <= 1e-12);
            let pinv = dense(&op).pseudo_inverse(1e-10).unwrap();
            let reference = pinv * nalgebra::DVector::from_vec(b);
            let err = x
                .iter()
                .zip(reference.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-8, "max-norm error {err}");
            let mean = x.iter().sum::<f64>() / nodes as f64;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let op = random_operator(2, 2, 2, 9);
        let (x, stats) = solve_periodic(&op, &vec![0.0; 16].into(), &SolverSettings::default()).unwrap();
        assert!(x.iter().all(|v| *v == 0.0));
        assert_eq!(stats.iterations, 0);
    }

    #[test]
    fn inconsistent_rhs_is_rejected() {
        let op = random_operator(2, 2, 2, 9);
        let mut b = vec![0.0; 16];
        b[3] = 1.0;
        assert!(matches!(
            solve_periodic(&op, &b.into(), &SolverSettings::default()),
            Err(crate::Error::InconsistentRhs { .. })
        ));
    }

    #[test]
    fn iteration_cap_reports_residual() {
        let op = random_operator(2, 3, 4, 4);
        let b = random_consistent_rhs(op.mesh().node_count(), 8);
        let settings = SolverSettings {
            tol: 1e-14,
            max_iter: Some(2),
        };
        match solve_periodic(&op, &b.into(), &settings) {
            Err(crate::Error::Solver { iterations, residual, .. }) => {
                assert_eq!(iterations, 2);
                assert!(residual > 1e-14);
            }
            other => panic!("expected a solver error, got {other:?}"),
        }
    }

    #[test]
    fn gradients_are_exact_for_p1_profiles() {
        let mesh = Mesh::new(1, 2, 3).unwrap();
        // Periodic piecewise-linear hat: slopes recovered element by element.
        let values = vec![0.0, 1.0, 3.0, 2.0, 2.5, -1.0];
        let f = ScalarField::new(mesh, values.clone());
        let g = f.gradient_at_quadrature();
        let h = mesh.h();
        for e in 0..6 {
            let slope = (values[(e + 1) % 6] - values[e]) / h;
            assert!((g[e][0] - slope).abs() < 1e-12);
        }
        assert!(ScalarField::zeros(mesh).gradient_at_quadrature().iter().all(|v| *v == [0.0, 0.0]));
    }

    #[test]
    fn stiffness_energy_equals_quadrature_energy() {
        for (dim, seed) in [(1, 21), (2, 22)] {
            let op = random_operator(dim, 3, 3, seed);
            let v = random_consistent_rhs(op.mesh().node_count(), seed);
            let kv = op.stiffness().mul_vec(&v);
            let algebraic: f64 = v.iter().zip(&kv).map(|(a, b)| a * b).sum();
            let field = ScalarField::new(*op.mesh(), v);
            let quad = quadrature_energy(&op, &field.gradient_at_quadrature());
            assert!((algebraic - quad).abs() < 1e-12 * algebraic.abs().max(1.0), "{algebraic} vs {quad}");
        }
    }

    #[test]
    fn cyclic_shift_of_coefficients_shifts_solution() {
        let mesh = Mesh::new(2, 3, 2).unwrap();
        let mut rng = rng_from_seed(77);
        let cells: Vec<f64> = (0..9).map(|_| rng.random_range(1.0..4.0)).collect();
        let field = crate::rfield::CoefficientField::from_scalars(2, 3, &cells).unwrap();
        let shifted = field.shifted([1, 0]);
        let p = [1.0, 0.0];
        let settings = SolverSettings::with_tol(1e-13);
        let solve = |f: &crate::rfield::CoefficientField| {
            let op = assemble_field(&mesh, f).unwrap();
            let b = load_from_flux(&mesh, &constant_gradient_flux(&op, p)).unwrap();
            solve_periodic(&op, &b, &settings).unwrap().0
        };
        let u = solve(&field);
        let v = solve(&shifted);
        let side = mesh.side();
        for y in 0..side {
            for x in 0..side {
                let a = u[mesh.index(x, y)];
                let b = v[mesh.index(x + mesh.resolution(), y)];
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn solve_counter_tracks_calls() {
        let op = random_operator(1, 2, 2, 3);
        let before = solves_on_this_thread();
        solve_periodic(&op, &vec![0.0; 4].into(), &SolverSettings::default()).unwrap();
        assert_eq!(solves_on_this_thread(), before + 1);
    }
}
