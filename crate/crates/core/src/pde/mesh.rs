use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform periodic grid of `(N r)^d` square elements on `Q_N`.
///
/// Nodes on opposite faces are identified, so the node count equals the
/// element count. Elements and nodes are numbered row-major in `(y, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mesh {
    dim: usize,
    n_cells: usize,
    resolution: usize,
}

const GAUSS_LO: f64 = 0.5 - 0.288_675_134_594_812_9;
const GAUSS_HI: f64 = 0.5 + 0.288_675_134_594_812_9;

/// Element-local node order: `(0,0), (1,0), (1,1), (0,1)` in 2D, `0, 1` in 1D.
pub const MAX_ELEMENT_NODES: usize = 4;
pub const MAX_QUAD_POINTS: usize = 4;

impl Mesh {
    pub fn new(dim: usize, n_cells: usize, resolution: usize) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::Config(format!("dimension {dim} not in {{1, 2}}")));
        }
        if n_cells == 0 || resolution == 0 {
            return Err(Error::Config(format!(
                "box side ({n_cells}) and resolution ({resolution}) must be positive"
            )));
        }
        Ok(Self {
            dim,
            n_cells,
            resolution,
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    #[inline]
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Nodes (and elements) per side.
    #[inline]
    pub fn side(&self) -> usize {
        self.n_cells * self.resolution
    }

    #[inline]
    pub fn h(&self) -> f64 {
        1.0 / self.resolution as f64
    }

    pub fn node_count(&self) -> usize {
        self.side().pow(self.dim as u32)
    }

    pub fn element_count(&self) -> usize {
        self.node_count()
    }

    /// `|Q_N|`.
    pub fn volume(&self) -> f64 {
        (self.n_cells as f64).powi(self.dim as i32)
    }

    pub fn nodes_per_element(&self) -> usize {
        1 << self.dim
    }

    pub fn quad_points(&self) -> usize {
        // 1D: midpoint; 2D: 2x2 Gauss. Both integrate gradient products of
        // the element shape functions exactly.
        if self.dim == 1 {
            1
        } else {
            4
        }
    }

    pub fn quad_weight(&self) -> f64 {
        self.h().powi(self.dim as i32) / self.quad_points() as f64
    }

    /// Integer coordinates of element (or node) `e`.
    #[inline]
    pub fn coords(&self, e: usize) -> (usize, usize) {
        if self.dim == 1 {
            (e, 0)
        } else {
            (e % self.side(), e / self.side())
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        let s = self.side();
        if self.dim == 1 {
            x % s
        } else {
            (y % s) * s + (x % s)
        }
    }

    pub fn element_nodes(&self, e: usize) -> [usize; MAX_ELEMENT_NODES] {
        let (x, y) = self.coords(e);
        if self.dim == 1 {
            [self.index(x, 0), self.index(x + 1, 0), 0, 0]
        } else {
            [
                self.index(x, y),
                self.index(x + 1, y),
                self.index(x + 1, y + 1),
                self.index(x, y + 1),
            ]
        }
    }

    /// Unit cell containing element `e`, as a row-major cell index.
    pub fn element_cell(&self, e: usize) -> usize {
        let (x, y) = self.coords(e);
        let (cx, cy) = (x / self.resolution, y / self.resolution);
        if self.dim == 1 {
            cx
        } else {
            cy * self.n_cells + cx
        }
    }

    /// Sub-cell of a `sub`-refined cell grid containing element `e`.
    pub fn element_sub_cell(&self, e: usize, sub: usize) -> (usize, usize) {
        let (x, y) = self.coords(e);
        (x * sub / self.resolution, y * sub / self.resolution)
    }

    /// Physical shape-function gradients, `grads[q][a]`.
    pub fn shape_gradients(&self) -> [[[f64; 2]; MAX_ELEMENT_NODES]; MAX_QUAD_POINTS] {
        let inv_h = 1.0 / self.h();
        let mut g = [[[0.0; 2]; MAX_ELEMENT_NODES]; MAX_QUAD_POINTS];
        if self.dim == 1 {
            g[0][0] = [-inv_h, 0.0];
            g[0][1] = [inv_h, 0.0];
            return g;
        }
        let pts = [GAUSS_LO, GAUSS_HI];
        for (q, grads) in g.iter_mut().enumerate() {
            let xi = pts[q % 2];
            let eta = pts[q / 2];
            grads[0] = [-(1.0 - eta) * inv_h, -(1.0 - xi) * inv_h];
            grads[1] = [(1.0 - eta) * inv_h, -xi * inv_h];
            grads[2] = [eta * inv_h, xi * inv_h];
            grads[3] = [-eta * inv_h, (1.0 - xi) * inv_h];
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn periodic_identification() {
        let m = Mesh::new(2, 2, 3).unwrap();
        assert_eq!(m.side(), 6);
        assert_eq!(m.node_count(), 36);
        // Last element wraps to the first column and row.
        let nodes = m.element_nodes(35);
        assert_eq!(nodes, [35, 30, 0, 5]);
        assert_eq!(m.element_cell(35), 3);
        assert_eq!(m.element_cell(2), 0);
        assert_eq!(m.element_cell(3), 1);
        assert!(Mesh::new(3, 1, 1).is_err());
        assert!(Mesh::new(2, 0, 1).is_err());
    }

    #[test]
    fn shape_gradients_sum_to_zero_and_reproduce_linears() {
        let m = Mesh::new(2, 1, 4).unwrap();
        let g = m.shape_gradients();
        let h = m.h();
        for grads in g.iter() {
            let sum: [f64; 2] = [0, 1].map(|c| grads.iter().map(|v| v[c]).sum());
            assert!(sum[0].abs() < 1e-12 && sum[1].abs() < 1e-12);
            // Nodal values of x -> gradient (1, 0).
            let xs = [0.0, h, h, 0.0];
            let gx: f64 = grads.iter().zip(xs).map(|(v, x)| v[0] * x).sum();
            let gy: f64 = grads.iter().zip(xs).map(|(v, x)| v[1] * x).sum();
            assert!((gx - 1.0).abs() < 1e-12 && gy.abs() < 1e-12);
        }
    }
}
