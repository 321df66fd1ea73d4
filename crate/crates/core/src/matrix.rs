//! Dense matrices of dimension one or two.
//!
//! Every coefficient, effective matrix and defect correction in this crate
//! lives in `d <= 2`, so a fixed-size array avoids heap traffic in the
//! per-element assembly loops.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported spatial dimension.
pub const MAX_DIM: usize = 2;

#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct SmallMatrix {
    dim: usize,
    m: [[f64; MAX_DIM]; MAX_DIM],
}

impl SmallMatrix {
    pub fn zeros(dim: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&dim), "dimension must be 1 or 2");
        Self {
            dim,
            m: [[0.0; MAX_DIM]; MAX_DIM],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::scalar(dim, 1.0)
    }

    /// `c` times the identity.
    pub fn scalar(dim: usize, c: f64) -> Self {
        let mut out = Self::zeros(dim);
        for i in 0..dim {
            out.m[i][i] = c;
        }
        out
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut out = Self::zeros(values.len());
        for (i, v) in values.iter().enumerate() {
            out.m[i][i] = *v;
        }
        out
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let dim = rows.len();
        if !(1..=MAX_DIM).contains(&dim) || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Config(format!(
                "expected a square matrix of size 1 or 2, got {} rows",
                dim
            )));
        }
        let mut out = Self::zeros(dim);
        for (i, row) in rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                out.m[i][j] = *v;
            }
        }
        Ok(out)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.dim && j < self.dim);
        self.m[i][j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.dim && j < self.dim);
        self.m[i][j] = v;
    }

    /// Matrix-vector product on the first `dim` components of `v`.
    #[inline]
    pub fn apply(&self, v: [f64; MAX_DIM]) -> [f64; MAX_DIM] {
        let mut out = [0.0; MAX_DIM];
        for (i, o) in out.iter_mut().enumerate().take(self.dim) {
            for (j, vj) in v.iter().enumerate().take(self.dim) {
                *o += self.m[i][j] * vj;
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut out = *self;
        for i in 0..self.dim {
            for j in 0..self.dim {
                out.m[i][j] = self.m[j][i];
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.entries().map(|(_, _, v)| v.abs()).fold(0.0, f64::max)
    }

    /// Largest entrywise difference between `self` and `self^T`.
    pub fn asymmetry(&self) -> f64 {
        if self.dim == 1 {
            0.0
        } else {
            (self.m[0][1] - self.m[1][0]).abs()
        }
    }

    /// Row-major iterator over `(i, j, value)`.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.dim).flat_map(move |i| (0..self.dim).map(move |j| (i, j, self.m[i][j])))
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.entries().map(|(_, _, v)| v).collect()
    }

    pub fn from_entries(dim: usize, values: &[f64]) -> Self {
        assert_eq!(values.len(), dim * dim);
        let mut out = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                out.m[i][j] = values[i * dim + j];
            }
        }
        out
    }

    pub fn determinant(&self) -> f64 {
        match self.dim {
            1 => self.m[0][0],
            _ => self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0],
        }
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(Error::Domain("singular matrix".into()));
        }
        let mut out = Self::zeros(self.dim);
        match self.dim {
            1 => out.m[0][0] = 1.0 / self.m[0][0],
            _ => {
                out.m[0][0] = self.m[1][1] / det;
                out.m[1][1] = self.m[0][0] / det;
                out.m[0][1] = -self.m[0][1] / det;
                out.m[1][0] = -self.m[1][0] / det;
            }
        }
        Ok(out)
    }

    /// Ascending eigenvalues of the symmetric part.
    pub fn symmetric_eigenvalues(&self) -> [f64; MAX_DIM] {
        match self.dim {
            1 => [self.m[0][0], f64::NAN],
            _ => {
                let a = self.m[0][0];
                let d = self.m[1][1];
                let b = 0.5 * (self.m[0][1] + self.m[1][0]);
                let mean = 0.5 * (a + d);
                let radius = (0.5 * (a - d)).hypot(b);
                let det = a * d - b * b;
                // Take the root without cancellation, recover the other from det.
                if mean >= 0.0 {
                    let hi = mean + radius;
                    let lo = if hi != 0.0 { det / hi } else { mean - radius };
                    [lo.min(hi), hi]
                } else {
                    let lo = mean - radius;
                    [lo, (det / lo).max(lo)]
                }
            }
        }
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.symmetric_eigenvalues()[..self.dim].to_vec()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.symmetric_eigenvalues()[0]
    }

    /// Symmetric with strictly positive spectrum.
    pub fn is_coercive(&self) -> bool {
        self.asymmetry() <= 1e-12 * self.max_abs().max(1.0) && self.min_eigenvalue() > 0.0
    }
}

impl fmt::Debug for SmallMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<Vec<f64>> = (*self).into();
        write!(f, "{:?}", rows)
    }
}

impl From<SmallMatrix> for Vec<Vec<f64>> {
    fn from(m: SmallMatrix) -> Self {
        (0..m.dim).map(|i| m.m[i][..m.dim].to_vec()).collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for SmallMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        Self::from_rows(&refs)
    }
}

impl Add for SmallMatrix {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl AddAssign for SmallMatrix {
    fn add_assign(&mut self, rhs: Self) {
        assert_eq!(self.dim, rhs.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                self.m[i][j] += rhs.m[i][j];
            }
        }
    }
}

impl Sub for SmallMatrix {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self + (-rhs)
    }
}

impl Neg for SmallMatrix {
    type Output = Self;
    fn neg(self) -> Self {
        self * -1.0
    }
}

impl Mul<f64> for SmallMatrix {
    type Output = Self;
    fn mul(mut self, c: f64) -> Self {
        for row in self.m.iter_mut() {
            for v in row.iter_mut() {
                *v *= c;
            }
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigenvalues_match_characteristic_polynomial() {
        let m = SmallMatrix::from_rows(&[&[4.0, 1.5], &[1.5, -2.0]]).unwrap();
        let [lo, hi] = m.symmetric_eigenvalues();
        // Roots of x^2 - tr x + det via the textbook formula.
        let tr: f64 = 2.0;
        let det: f64 = -8.0 - 2.25;
        let disc = (tr * tr - 4.0 * det).sqrt();
        assert!((lo - (tr - disc) / 2.0).abs() < 1e-12);
        assert!((hi - (tr + disc) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_and_serde_shape() {
        let m = SmallMatrix::from_rows(&[&[2.0, 1.0], &[1.0, 3.0]]).unwrap();
        let inv = m.inverse().unwrap();
        let prod = inv.apply(m.apply([1.0, 0.0]));
        assert!((prod[0] - 1.0).abs() < 1e-15 && prod[1].abs() < 1e-15);
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, "[[2.0,1.0],[1.0,3.0]]");
        let back: SmallMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        assert!(serde_json::from_str::<SmallMatrix>("[[1.0,2.0]]").is_err());
    }

    #[test]
    fn one_dimensional_matrices() {
        let m = SmallMatrix::scalar(1, 5.0);
        assert_eq!(m.eigenvalues(), vec![5.0]);
        assert_eq!(m.inverse().unwrap().get(0, 0), 0.2);
        assert!(SmallMatrix::scalar(1, 0.0).inverse().is_err());
        assert!(!SmallMatrix::scalar(1, -1.0).is_coercive());
    }
}
