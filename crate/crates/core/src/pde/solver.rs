//! Preconditioned conjugate gradients on the zero-mean subspace.
//!
//! The stiffness matrix of a periodic problem is singular with the constants
//! as kernel. The right-hand side is required to be orthogonal to that
//! kernel; every search direction is kept zero-mean, so the iterates never
//! pick up a constant component. The preconditioner is the exact inverse of
//! the stiffness matrix for the mean diagonal coefficient, applied in
//! Fourier space, which makes the iteration count independent of the mesh
//! size and proportional to the square root of the contrast.

use std::cell::Cell;
use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::mesh::Mesh;
use super::operator::DiscreteOperator;

thread_local! {
    static SOLVES: Cell<u64> = const { Cell::new(0) };
}

/// Number of periodic solves performed so far on the calling thread.
pub fn solves_on_this_thread() -> u64 {
    SOLVES.with(|c| c.get())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    /// Target relative residual `|b - K x| / |b|`.
    pub tol: f64,
    /// Iteration cap; `None` means `50 sqrt(nodes) + 1000`.
    pub max_iter: Option<usize>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: None,
        }
    }
}

impl SolverSettings {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, max_iter: None }
    }

    pub fn iteration_cap(&self, nodes: usize) -> usize {
        self.max_iter
            .unwrap_or_else(|| 50 * (nodes as f64).sqrt().ceil() as usize + 1000)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

#[derive(Clone)]
pub(crate) struct FourierPreconditioner {
    dim: usize,
    side: usize,
    /// Reciprocal symbol, zero on the constant mode.
    inv_symbol: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl FourierPreconditioner {
    /// Inverse of the stiffness matrix for the constant coefficient
    /// `diag(mean_diag)`.
    pub(crate) fn new(mesh: &Mesh, mean_diag: &[f64; 2]) -> Self {
        let side = mesh.side();
        let dim = mesh.dim();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(side);
        let inverse = planner.plan_fft_inverse(side);
        let c: Vec<f64> = (0..side).map(|k| (2.0 * PI * k as f64 / side as f64).cos()).collect();
        let h = mesh.h();
        let mut inv_symbol = vec![0.0; mesh.node_count()];
        for (idx, s) in inv_symbol.iter_mut().enumerate() {
            let (kx, ky) = mesh.coords(idx);
            let symbol = if dim == 1 {
                mean_diag[0] * (2.0 - 2.0 * c[kx]) / h
            } else {
                let stiff_x = 2.0 - 2.0 * c[kx];
                let stiff_y = 2.0 - 2.0 * c[ky];
                let mass_x = (4.0 + 2.0 * c[kx]) / 6.0;
                let mass_y = (4.0 + 2.0 * c[ky]) / 6.0;
                mean_diag[0] * stiff_x * mass_y + mean_diag[1] * mass_x * stiff_y
            };
            *s = if idx == 0 || symbol <= 0.0 { 0.0 } else { 1.0 / symbol };
        }
        Self {
            dim,
            side,
            inv_symbol,
            forward,
            inverse,
        }
    }

    fn transform(&self, buf: &mut [Complex64], fft: &Arc<dyn Fft<f64>>, column: &mut [Complex64]) {
        let s = self.side;
        if self.dim == 1 {
            fft.process(buf);
            return;
        }
        for row in buf.chunks_exact_mut(s) {
            fft.process(row);
        }
        for x in 0..s {
            for y in 0..s {
                column[y] = buf[y * s + x];
            }
            fft.process(column);
            for y in 0..s {
                buf[y * s + x] = column[y];
            }
        }
    }

    pub(crate) fn apply(&self, r: &[f64], z: &mut [f64], work: &mut PrecondWork) {
        let buf = &mut work.buf;
        for (b, v) in buf.iter_mut().zip(r) {
            *b = Complex64::new(*v, 0.0);
        }
        self.transform(buf, &self.forward, &mut work.column);
        for (b, s) in buf.iter_mut().zip(&self.inv_symbol) {
            *b *= *s;
        }
        self.transform(buf, &self.inverse, &mut work.column);
        let scale = 1.0 / self.inv_symbol.len() as f64;
        for (zi, b) in z.iter_mut().zip(buf.iter()) {
            *zi = b.re * scale;
        }
    }
}

pub(crate) struct PrecondWork {
    buf: Vec<Complex64>,
    column: Vec<Complex64>,
}

impl PrecondWork {
    fn new(mesh: &Mesh) -> Self {
        Self {
            buf: vec![Complex64::new(0.0, 0.0); mesh.node_count()],
            column: vec![Complex64::new(0.0, 0.0); mesh.side()],
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn remove_mean(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    for x in v.iter_mut() {
        *x -= mean;
    }
}

/// A right-hand side together with the magnitude of the contributions it was
/// summed from, which sets the scale for the consistency check.
#[derive(Debug, Clone, PartialEq)]
pub struct Load {
    pub values: Vec<f64>,
    pub magnitude: f64,
}

impl Load {
    /// A load whose magnitude is its own 1-norm.
    pub fn new(values: Vec<f64>) -> Self {
        let magnitude = values.iter().map(|v| v.abs()).sum();
        Self { values, magnitude }
    }
}

impl From<Vec<f64>> for Load {
    fn from(values: Vec<f64>) -> Self {
        Self::new(values)
    }
}

/// Checks `rhs ⟂ constants` to `1e-12` relative to the load magnitude.
pub fn check_consistency(rhs: &Load) -> Result<()> {
    let sum: f64 = rhs.values.iter().sum();
    let scale = rhs.magnitude;
    if sum.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::InconsistentRhs { sum, scale });
    }
    Ok(())
}

/// Zero-mean solution of `K x = rhs`.
pub fn solve_periodic(op: &DiscreteOperator, rhs: &Load, settings: &SolverSettings) -> Result<(Vec<f64>, SolveStats)> {
    SOLVES.with(|c| c.set(c.get() + 1));
    let mesh = op.mesh();
    let n = mesh.node_count();
    if rhs.values.len() != n {
        return Err(Error::Assembly(format!("rhs has {} entries for {} nodes", rhs.values.len(), n)));
    }
    check_consistency(rhs)?;
    let mut b = rhs.values.clone();
    remove_mean(&mut b);
    let b_norm = dot(&b, &b).sqrt();
    let mut x = vec![0.0; n];
    // Loads that cancel to round-off are the zero load.
    if b_norm <= 1e-15 * rhs.magnitude || b_norm == 0.0 {
        return Ok((
            x,
            SolveStats {
                iterations: 0,
                relative_residual: 0.0,
            },
        ));
    }

    let k = op.stiffness();
    let pre = op.preconditioner();
    let cap = settings.iteration_cap(n);
    let target = settings.tol * b_norm;
    let mut work = PrecondWork::new(mesh);
    let mut r = b.clone();
    let mut z = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut iterations = 0;

    // Restart from the true residual whenever the recurrence claims convergence
    // but the recomputed residual disagrees.
    loop {
        pre.apply(&r, &mut z, &mut work);
        remove_mean(&mut z);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut r_norm = dot(&r, &r).sqrt();
        while r_norm > target && iterations < cap {
            k.mul_vec_into(&p, &mut q);
            let pq = dot(&p, &q);
            if pq <= 0.0 {
                break;
            }
            let alpha = rz / pq;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * q[i];
            }
            iterations += 1;
            r_norm = dot(&r, &r).sqrt();
            if r_norm <= target {
                break;
            }
            pre.apply(&r, &mut z, &mut work);
            remove_mean(&mut z);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        remove_mean(&mut x);
        k.mul_vec_into(&x, &mut q);
        for i in 0..n {
            r[i] = b[i] - q[i];
        }
        let true_norm = dot(&r, &r).sqrt();
        if true_norm <= target {
            return Ok((
                x,
                SolveStats {
                    iterations,
                    relative_residual: true_norm / b_norm,
                },
            ));
        }
        if iterations >= cap || r_norm > target {
            return Err(Error::Solver {
                iterations,
                residual: true_norm / b_norm,
                tol: settings.tol,
            });
        }
    }
}
