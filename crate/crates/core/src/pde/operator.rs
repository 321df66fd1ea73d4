use crate::error::{Error, Result};
use crate::matrix::SmallMatrix;
use crate::rfield::CoefficientField;

use super::mesh::Mesh;
use super::solver::{FourierPreconditioner, Load};

/// Compressed sparse row storage.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Pattern of the periodic nearest-neighbour stencil, values zeroed.
    fn stencil_pattern(mesh: &Mesh) -> Self {
        let n = mesh.node_count();
        let side = mesh.side();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::with_capacity(n * 9);
        row_ptr.push(0);
        let mut row = Vec::with_capacity(9);
        for node in 0..n {
            let (x, y) = mesh.coords(node);
            row.clear();
            let shifts: &[usize] = &[side - 1, 0, 1];
            if mesh.dim() == 1 {
                for dx in shifts {
                    row.push(mesh.index(x + dx, 0));
                }
            } else {
                for dy in shifts {
                    for dx in shifts {
                        row.push(mesh.index(x + dx, y + dy));
                    }
                }
            }
            row.sort_unstable();
            row.dedup();
            cols.extend_from_slice(&row);
            row_ptr.push(cols.len());
        }
        let vals = vec![0.0; cols.len()];
        Self {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    #[inline]
    fn add(&mut self, row: usize, col: usize, v: f64) {
        let start = self.row_ptr[row];
        let end = self.row_ptr[row + 1];
        let pos = self.cols[start..end]
            .iter()
            .position(|c| *c == col)
            .expect("stencil pattern covers every element coupling");
        self.vals[start + pos] += v;
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.cols[s..e].iter().copied().zip(self.vals[s..e].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|(c, _)| *c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
            let mut acc = 0.0;
            for k in s..e {
                acc += self.vals[k] * x[self.cols[k]];
            }
            *yi = acc;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n]; self.n];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] += v;
            }
        }
        out
    }
}

/// Galerkin stiffness matrix of `v -> -div(A grad v)` with periodic
/// boundary conditions, plus the per-element coefficients it was built from.
///
/// The kernel is the constant vector: rows sum to zero.
#[derive(Clone)]
pub struct DiscreteOperator {
    mesh: Mesh,
    coefficients: Vec<SmallMatrix>,
    stiffness: CsrMatrix,
    preconditioner: FourierPreconditioner,
}

impl std::fmt::Debug for DiscreteOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiscreteOperator")
            .field("mesh", &self.mesh)
            .field("nnz", &self.stiffness.nnz())
            .finish()
    }
}

impl DiscreteOperator {
    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn stiffness(&self) -> &CsrMatrix {
        &self.stiffness
    }

    pub fn coefficients(&self) -> &[SmallMatrix] {
        &self.coefficients
    }

    pub(crate) fn preconditioner(&self) -> &FourierPreconditioner {
        &self.preconditioner
    }
}

/// Assembles the stiffness matrix for one coercive coefficient per element.
pub fn assemble(mesh: &Mesh, coefficients: Vec<SmallMatrix>) -> Result<DiscreteOperator> {
    if coefficients.len() != mesh.element_count() {
        return Err(Error::Assembly(format!(
            "{} element coefficients for {} elements",
            coefficients.len(),
            mesh.element_count()
        )));
    }
    for (e, a) in coefficients.iter().enumerate() {
        if a.dim() != mesh.dim() || !a.is_coercive() {
            return Err(Error::Assembly(format!(
                "element {e} has non-coercive coefficient {:?}",
                a
            )));
        }
    }
    let mut stiffness = CsrMatrix::stencil_pattern(mesh);
    let grads = mesh.shape_gradients();
    let nq = mesh.quad_points();
    let na = mesh.nodes_per_element();
    let w = mesh.quad_weight();
    let mut local = [[0.0; 4]; 4];
    for (e, a) in coefficients.iter().enumerate() {
        for row in local.iter_mut() {
            *row = [0.0; 4];
        }
        for g in grads.iter().take(nq) {
            for b in 0..na {
                let ag = a.apply(g[b]);
                for (i, row) in local.iter_mut().enumerate().take(na) {
                    row[b] += w * (g[i][0] * ag[0] + g[i][1] * ag[1]);
                }
            }
        }
        let nodes = mesh.element_nodes(e);
        for i in 0..na {
            for j in 0..na {
                stiffness.add(nodes[i], nodes[j], local[i][j]);
            }
        }
    }
    let preconditioner = FourierPreconditioner::new(mesh, &mean_diagonal(&coefficients, mesh.dim()));
    Ok(DiscreteOperator {
        mesh: *mesh,
        coefficients,
        stiffness,
        preconditioner,
    })
}

fn mean_diagonal(coefficients: &[SmallMatrix], dim: usize) -> [f64; 2] {
    let mut out = [0.0; 2];
    for a in coefficients {
        for (i, o) in out.iter_mut().enumerate().take(dim) {
            *o += a.get(i, i);
        }
    }
    out.map(|v| v / coefficients.len() as f64)
}

/// Samples a sub-cell coefficient field onto the elements of `mesh`.
pub fn element_coefficients(mesh: &Mesh, field: &CoefficientField) -> Result<Vec<SmallMatrix>> {
    if field.dim() != mesh.dim() || field.n_cells() != mesh.n_cells() {
        return Err(Error::Config(format!(
            "field on a {}-cell box in {}D does not match the mesh ({} cells, {}D)",
            field.n_cells(),
            field.dim(),
            mesh.n_cells(),
            mesh.dim()
        )));
    }
    if mesh.resolution() % field.sub() != 0 {
        return Err(Error::Config(format!(
            "resolution {} is not a multiple of the coefficient sub-grid {}",
            mesh.resolution(),
            field.sub()
        )));
    }
    Ok((0..mesh.element_count())
        .map(|e| {
            let (gx, gy) = mesh.element_sub_cell(e, field.sub());
            field.sub_cell(gx, gy)
        })
        .collect())
}

pub fn assemble_field(mesh: &Mesh, field: &CoefficientField) -> Result<DiscreteOperator> {
    assemble(mesh, element_coefficients(mesh, field)?)
}

/// A vector field sampled at every quadrature point, `[e * nq + q]`.
pub type QuadratureField = Vec<[f64; 2]>;

/// Load vector `b_a = -sum_e sum_q w grad(phi_a)(q) . flux(e, q)`, the weak
/// form of `div(flux)`.
pub fn load_from_flux(mesh: &Mesh, flux: &[[f64; 2]]) -> Result<Load> {
    let nq = mesh.quad_points();
    if flux.len() != mesh.element_count() * nq {
        return Err(Error::Assembly(format!(
            "flux sampled at {} points, expected {}",
            flux.len(),
            mesh.element_count() * nq
        )));
    }
    let grads = mesh.shape_gradients();
    let na = mesh.nodes_per_element();
    let w = mesh.quad_weight();
    let mut b = vec![0.0; mesh.node_count()];
    let mut magnitude = 0.0;
    for e in 0..mesh.element_count() {
        let nodes = mesh.element_nodes(e);
        for (q, g) in grads.iter().enumerate().take(nq) {
            let f = flux[e * nq + q];
            for a in 0..na {
                let c = w * (g[a][0] * f[0] + g[a][1] * f[1]);
                b[nodes[a]] -= c;
                magnitude += c.abs();
            }
        }
    }
    Ok(Load { values: b, magnitude })
}

/// The flux `A_e p` at every quadrature point.
pub fn constant_gradient_flux(op: &DiscreteOperator, p: [f64; 2]) -> QuadratureField {
    let nq = op.mesh.quad_points();
    op.coefficients
        .iter()
        .flat_map(|a| std::iter::repeat(a.apply(p)).take(nq))
        .collect()
}
