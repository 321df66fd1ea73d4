//! Stationary random coefficient fields on the box `Q_N = (0, N)^d`.
//!
//! Every cell of the box carries one independent draw. Each draw is kept in
//! latent form (a uniform variate, or the scalar `x_k` of a perturbation
//! law) next to the coefficient values it produced, so that the antithetic
//! map and the configuration statistics work from the same numbers that built
//! the field.
//!
//! The antithetic map acts on latent uniforms as `u -> 1 - u`. For the fair
//! two-state law this swaps the two phases cell by cell; for the `±1` law it
//! flips every sign. For an asymmetric law (`p != 1/2`) the map still
//! preserves the law, since `1 - U` is uniform, but it no longer swaps
//! phases one-for-one.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::SmallMatrix;

/// A `Z^d`-periodic matrix field, piecewise constant on an `s^d` sub-grid of
/// the unit cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitCellField {
    dim: usize,
    sub: usize,
    /// Row-major in `(y, x)`, `sub^dim` entries.
    values: Vec<SmallMatrix>,
}

impl UnitCellField {
    pub fn constant(m: SmallMatrix) -> Self {
        Self {
            dim: m.dim(),
            sub: 1,
            values: vec![m],
        }
    }

    pub fn new(dim: usize, sub: usize, values: Vec<SmallMatrix>) -> Result<Self> {
        if sub == 0 || values.len() != sub.pow(dim as u32) {
            return Err(Error::Config(format!(
                "unit-cell field needs {}^{} values, got {}",
                sub,
                dim,
                values.len()
            )));
        }
        if values.iter().any(|v| v.dim() != dim) {
            return Err(Error::Config("unit-cell values have mixed dimensions".into()));
        }
        Ok(Self { dim, sub, values })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sub(&self) -> usize {
        self.sub
    }

    pub fn values(&self) -> &[SmallMatrix] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| v.max_abs() == 0.0)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            dim: self.dim,
            sub: self.sub,
            values: self.values.iter().map(|v| *v * c).collect(),
        }
    }

    /// The same field on a finer sub-grid; `sub` must be a multiple of the
    /// current one.
    pub fn refined(&self, sub: usize) -> Result<Self> {
        if sub == 0 || sub % self.sub != 0 {
            return Err(Error::Config(format!(
                "cannot refine a {}-sub-grid to {}",
                self.sub, sub
            )));
        }
        let f = sub / self.sub;
        let values = (0..sub.pow(self.dim as u32))
            .map(|idx| {
                let (gx, gy) = if self.dim == 1 { (idx, 0) } else { (idx % sub, idx / sub) };
                let (cx, cy) = (gx / f, gy / f);
                self.values[if self.dim == 1 { cx } else { cy * self.sub + cx }]
            })
            .collect();
        Ok(Self {
            dim: self.dim,
            sub,
            values,
        })
    }

    /// The same data as a one-cell coefficient field.
    pub fn to_field(&self) -> CoefficientField {
        CoefficientField {
            dim: self.dim,
            n_cells: 1,
            sub: self.sub,
            values: self.values.clone(),
        }
    }
}

/// Law of the scalar `x_k` multiplying the perturbation in cell `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum XLaw {
    /// `x_k ∈ {0, 1}` with `P(x_k = 1) = prob`.
    Bernoulli01 { prob: f64 },
    /// Fair `x_k ∈ {-1, +1}`.
    PlusMinusOne,
}

impl XLaw {
    pub fn support(&self) -> [f64; 2] {
        match self {
            XLaw::Bernoulli01 { .. } => [0.0, 1.0],
            XLaw::PlusMinusOne => [-1.0, 1.0],
        }
    }

    /// Inverse-CDF sampling from a latent uniform.
    pub fn from_uniform(&self, u: f64) -> f64 {
        match self {
            XLaw::Bernoulli01 { prob } => {
                if u < *prob {
                    1.0
                } else {
                    0.0
                }
            }
            XLaw::PlusMinusOne => {
                if u < 0.5 {
                    -1.0
                } else {
                    1.0
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            XLaw::Bernoulli01 { prob } => *prob,
            XLaw::PlusMinusOne => 0.0,
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            XLaw::Bernoulli01 { prob } => prob * (1.0 - prob),
            XLaw::PlusMinusOne => 1.0,
        }
    }
}

/// `A(x) = C0 + eta * x_k * C1(x)` on cell `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub c0: SmallMatrix,
    pub c1: UnitCellField,
    pub eta: f64,
    pub x_law: XLaw,
}

impl PerturbationSpec {
    pub fn new(c0: SmallMatrix, c1: UnitCellField, eta: f64, x_law: XLaw) -> Result<Self> {
        let spec = Self { c0, c1, eta, x_law };
        spec.validate()?;
        Ok(spec)
    }

    pub fn dim(&self) -> usize {
        self.c0.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.c1.dim() != self.c0.dim() {
            return Err(Error::Config("C0 and C1 dimensions differ".into()));
        }
        if !self.eta.is_finite() {
            return Err(Error::Config("eta must be finite".into()));
        }
        if !self.c0.is_coercive() {
            return Err(Error::Config(format!("C0 = {:?} is not coercive", self.c0)));
        }
        if let XLaw::Bernoulli01 { prob } = self.x_law {
            if !(0.0..=1.0).contains(&prob) {
                return Err(Error::Config(format!("Bernoulli parameter {prob} outside [0, 1]")));
            }
        }
        for x in self.x_law.support() {
            for v in self.c1.values() {
                let m = self.c0 + *v * (self.eta * x);
                if !m.is_coercive() {
                    return Err(Error::Config(format!(
                        "C0 + eta*x*C1 = {:?} is not coercive for x = {x}",
                        m
                    )));
                }
            }
        }
        Ok(())
    }

    /// Whether `C0 - C1` is coercive, which makes every `|eta| <= 1` admissible.
    pub fn has_unit_perturbation_margin(&self) -> bool {
        self.c1.values().iter().all(|v| (self.c0 - *v).is_coercive())
    }

    /// Sub-cell values of one cell with scalar `x`.
    pub fn cell_values(&self, x: f64) -> impl Iterator<Item = SmallMatrix> + '_ {
        self.c1.values().iter().map(move |v| self.c0 + *v * (self.eta * x))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Law {
    /// Isotropic cells equal to `alpha * Id` with probability `p`, else `beta * Id`.
    TwoState { alpha: f64, beta: f64, p: f64 },
    Perturbation(PerturbationSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub dim: usize,
    pub law: Law,
}

impl FieldSpec {
    pub fn two_state(dim: usize, alpha: f64, beta: f64, p: f64) -> Result<Self> {
        let spec = Self {
            dim,
            law: Law::TwoState { alpha, beta, p },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn perturbation(spec: PerturbationSpec) -> Result<Self> {
        let out = Self {
            dim: spec.dim(),
            law: Law::Perturbation(spec),
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.dim) {
            return Err(Error::Config(format!("dimension {} not in {{1, 2}}", self.dim)));
        }
        match &self.law {
            Law::TwoState { alpha, beta, p } => {
                if !(*alpha > 0.0 && *beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
                    return Err(Error::Config(format!(
                        "two-state conductivities must be positive, got alpha = {alpha}, beta = {beta}"
                    )));
                }
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::Config(format!("probability {p} outside [0, 1]")));
                }
            }
            Law::Perturbation(spec) => {
                if spec.dim() != self.dim {
                    return Err(Error::Config("perturbation dimension mismatch".into()));
                }
                spec.validate()?;
            }
        }
        Ok(())
    }

    /// Sub-cells per unit-cell side.
    pub fn sub(&self) -> usize {
        match &self.law {
            Law::TwoState { .. } => 1,
            Law::Perturbation(spec) => spec.c1.sub(),
        }
    }

    /// Smallest eigenvalue any realization can carry.
    pub fn coercivity_floor(&self) -> f64 {
        match &self.law {
            Law::TwoState { alpha, beta, .. } => alpha.min(*beta),
            Law::Perturbation(spec) => spec
                .x_law
                .support()
                .iter()
                .flat_map(|x| spec.cell_values(*x).map(|m| m.min_eigenvalue()).collect::<Vec<_>>())
                .fold(f64::INFINITY, f64::min),
        }
    }

    fn cell_from_uniform(&self, u: f64) -> CellDraw {
        match &self.law {
            Law::TwoState { alpha, beta, p } => {
                let c = if u < *p { *alpha } else { *beta };
                CellDraw::Scalar(c)
            }
            Law::Perturbation(spec) => CellDraw::X(spec.x_law.from_uniform(u)),
        }
    }
}

enum CellDraw {
    Scalar(f64),
    X(f64),
}

/// Piecewise-constant coefficients on the `(N * sub)^d` sub-cells of `Q_N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientField {
    dim: usize,
    n_cells: usize,
    sub: usize,
    /// Row-major in `(y, x)` over the sub-cell grid.
    values: Vec<SmallMatrix>,
}

impl CoefficientField {
    pub fn constant(dim: usize, n_cells: usize, m: SmallMatrix) -> Self {
        assert_eq!(m.dim(), dim);
        Self {
            dim,
            n_cells,
            sub: 1,
            values: vec![m; n_cells.pow(dim as u32)],
        }
    }

    /// One matrix per unit cell, row-major in `(y, x)`.
    pub fn from_cells(dim: usize, n_cells: usize, cells: Vec<SmallMatrix>) -> Result<Self> {
        if n_cells == 0 || cells.len() != n_cells.pow(dim as u32) {
            return Err(Error::Config(format!(
                "expected {}^{} cell values, got {}",
                n_cells,
                dim,
                cells.len()
            )));
        }
        if cells.iter().any(|m| m.dim() != dim) {
            return Err(Error::Config("cell matrices have the wrong dimension".into()));
        }
        Ok(Self {
            dim,
            n_cells,
            sub: 1,
            values: cells,
        })
    }

    /// Scalar isotropic cells `c_k * Id`.
    pub fn from_scalars(dim: usize, n_cells: usize, cells: &[f64]) -> Result<Self> {
        Self::from_cells(
            dim,
            n_cells,
            cells.iter().map(|c| SmallMatrix::scalar(dim, *c)).collect(),
        )
    }

    /// Periodic tiling of a unit cell over `Q_N`.
    pub fn tile(unit: &UnitCellField, n_cells: usize) -> Self {
        let per_cell: Vec<&[SmallMatrix]> = vec![unit.values(); n_cells.pow(unit.dim() as u32)];
        Self::assemble_cells(unit.dim(), n_cells, unit.sub(), &per_cell)
    }

    /// Builds the sub-cell grid from per-cell blocks of `sub^dim` values.
    pub(crate) fn assemble_cells(dim: usize, n_cells: usize, sub: usize, cells: &[&[SmallMatrix]]) -> Self {
        let side = n_cells * sub;
        let mut values = vec![SmallMatrix::zeros(dim); side.pow(dim as u32)];
        for (k, block) in cells.iter().enumerate() {
            let (kx, ky) = (k % n_cells, k / n_cells);
            for (s, v) in block.iter().enumerate() {
                let (sx, sy) = (s % sub, s / sub);
                let (gx, gy) = (kx * sub + sx, ky * sub + sy);
                let idx = if dim == 1 { gx } else { gy * side + gx };
                values[idx] = *v;
            }
        }
        Self {
            dim,
            n_cells,
            sub,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn sub(&self) -> usize {
        self.sub
    }

    pub fn cell_count(&self) -> usize {
        self.n_cells.pow(self.dim as u32)
    }

    /// Sub-cell values, row-major in `(y, x)`.
    pub fn values(&self) -> &[SmallMatrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [SmallMatrix] {
        &mut self.values
    }

    /// Value on sub-cell `(gx, gy)` of the sub-cell grid.
    #[inline]
    pub fn sub_cell(&self, gx: usize, gy: usize) -> SmallMatrix {
        let side = self.n_cells * self.sub;
        if self.dim == 1 {
            self.values[gx]
        } else {
            self.values[gy * side + gx]
        }
    }

    /// The value of cell `k` when the field is constant per cell.
    pub fn cell(&self, k: usize) -> SmallMatrix {
        let (kx, ky) = (k % self.n_cells, k / self.n_cells);
        self.sub_cell(kx * self.sub, ky * self.sub)
    }

    /// Cyclic shift by whole cells: the value at cell `k + shift` becomes the
    /// value formerly at `k`.
    pub fn shifted(&self, shift: [usize; 2]) -> Self {
        let side = self.n_cells * self.sub;
        let mut out = self.clone();
        for (idx, v) in self.values.iter().enumerate() {
            let (gx, gy) = if self.dim == 1 { (idx, 0) } else { (idx % side, idx / side) };
            let nx = (gx + shift[0] * self.sub) % side;
            let ny = (gy + shift[1] * self.sub) % side;
            let target = if self.dim == 1 { nx } else { ny * side + nx };
            out.values[target] = *v;
        }
        out
    }

    /// Volume average over `Q_N` (the Voigt bound).
    pub fn arithmetic_mean(&self) -> SmallMatrix {
        let mut acc = SmallMatrix::zeros(self.dim);
        for v in &self.values {
            acc += *v;
        }
        acc * (1.0 / self.values.len() as f64)
    }

    /// Inverse of the volume average of the inverse (the Reuss bound).
    pub fn harmonic_mean(&self) -> Result<SmallMatrix> {
        let mut acc = SmallMatrix::zeros(self.dim);
        for v in &self.values {
            acc += v.inverse()?;
        }
        (acc * (1.0 / self.values.len() as f64)).inverse()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.values
            .iter()
            .map(|v| v.min_eigenvalue())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn validate_coercive(&self) -> Result<()> {
        for (i, v) in self.values.iter().enumerate() {
            if !v.is_coercive() {
                return Err(Error::Config(format!(
                    "sub-cell {i} carries the non-coercive matrix {:?}",
                    v
                )));
            }
        }
        Ok(())
    }
}

/// The draws behind a realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "snake_case")]
pub enum Latent {
    /// One uniform variate per cell, mapped through the law's inverse CDF.
    Uniform(Vec<f64>),
    /// Prescribed perturbation scalars `x_k`.
    Scalars(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldRealization {
    spec: FieldSpec,
    latent: Latent,
    field: CoefficientField,
}

impl FieldRealization {
    /// Rebuilds a realization from stored latent uniforms.
    pub fn from_uniforms(spec: &FieldSpec, n_cells: usize, uniforms: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let count = cell_count(spec.dim, n_cells)?;
        if uniforms.len() != count {
            return Err(Error::Config(format!(
                "expected {count} latent uniforms, got {}",
                uniforms.len()
            )));
        }
        if uniforms.iter().any(|u| !(0.0..=1.0).contains(u)) {
            return Err(Error::Config("latent uniforms must lie in [0, 1]".into()));
        }
        let field = build_field(spec, n_cells, uniforms.iter().map(|u| spec.cell_from_uniform(*u)));
        Ok(Self {
            spec: spec.clone(),
            latent: Latent::Uniform(uniforms),
            field,
        })
    }

    pub fn spec(&self) -> &FieldSpec {
        &self.spec
    }

    pub fn latent(&self) -> &Latent {
        &self.latent
    }

    pub fn field(&self) -> &CoefficientField {
        &self.field
    }

    pub fn into_field(self) -> CoefficientField {
        self.field
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn n_cells(&self) -> usize {
        self.field.n_cells()
    }

    /// The per-cell scalars `x_k` of a perturbation law.
    pub fn perturbation_scalars(&self) -> Option<Vec<f64>> {
        let Law::Perturbation(p) = &self.spec.law else {
            return None;
        };
        Some(match &self.latent {
            Latent::Uniform(u) => u.iter().map(|u| p.x_law.from_uniform(*u)).collect(),
            Latent::Scalars(x) => x.clone(),
        })
    }
}

fn cell_count(dim: usize, n_cells: usize) -> Result<usize> {
    if n_cells == 0 {
        return Err(Error::Config("box side N must be at least 1".into()));
    }
    Ok(n_cells.pow(dim as u32))
}

fn build_field(spec: &FieldSpec, n_cells: usize, draws: impl Iterator<Item = CellDraw>) -> CoefficientField {
    let dim = spec.dim;
    match &spec.law {
        Law::TwoState { .. } => {
            let cells = draws
                .map(|d| match d {
                    CellDraw::Scalar(c) => SmallMatrix::scalar(dim, c),
                    CellDraw::X(_) => unreachable!("two-state law draws scalars"),
                })
                .collect();
            CoefficientField {
                dim,
                n_cells,
                sub: 1,
                values: cells,
            }
        }
        Law::Perturbation(p) => {
            let blocks: Vec<Vec<SmallMatrix>> = draws
                .map(|d| match d {
                    CellDraw::X(x) => p.cell_values(x).collect(),
                    CellDraw::Scalar(_) => unreachable!("perturbation law draws x values"),
                })
                .collect();
            let refs: Vec<&[SmallMatrix]> = blocks.iter().map(|b| b.as_slice()).collect();
            CoefficientField::assemble_cells(dim, n_cells, p.c1.sub(), &refs)
        }
    }
}

/// Draws one realization, cells filled in row-major order from `rng`.
pub fn draw_field<R: Rng + ?Sized>(spec: &FieldSpec, n_cells: usize, rng: &mut R) -> Result<FieldRealization> {
    spec.validate()?;
    let count = cell_count(spec.dim, n_cells)?;
    let uniforms: Vec<f64> = (0..count).map(|_| rng.random::<f64>()).collect();
    FieldRealization::from_uniforms(spec, n_cells, uniforms)
}

/// The antithetic realization `u -> 1 - u`, cell by cell.
pub fn antithetic_of(realization: &FieldRealization) -> Result<FieldRealization> {
    let spec = &realization.spec;
    let n = realization.n_cells();
    match &realization.latent {
        Latent::Uniform(u) => {
            FieldRealization::from_uniforms(spec, n, u.iter().map(|u| 1.0 - u).collect())
        }
        Latent::Scalars(x) => {
            let Law::Perturbation(p) = &spec.law else {
                return Err(Error::Unsupported("scalar latent without a perturbation law".into()));
            };
            let flipped: Vec<f64> = match p.x_law {
                XLaw::PlusMinusOne => x.iter().map(|x| -x).collect(),
                XLaw::Bernoulli01 { prob } if prob == 0.5 => x.iter().map(|x| 1.0 - x).collect(),
                XLaw::Bernoulli01 { prob } => {
                    return Err(Error::Unsupported(format!(
                        "prescribed Bernoulli({prob}) scalars have no law-preserving reflection; draw the field from uniforms instead"
                    )))
                }
            };
            realize_perturbation(p, &flipped, n)
        }
    }
}

/// The field `C0 + eta * x_k * C1` for prescribed cell scalars.
pub fn realize_perturbation(spec: &PerturbationSpec, x_values: &[f64], n_cells: usize) -> Result<FieldRealization> {
    let dim = spec.dim();
    let count = cell_count(dim, n_cells)?;
    if x_values.len() != count {
        return Err(Error::Config(format!(
            "expected {count} cell scalars, got {}",
            x_values.len()
        )));
    }
    let support = spec.x_law.support();
    if let Some(bad) = x_values.iter().find(|x| !support.contains(x)) {
        return Err(Error::Config(format!(
            "cell scalar {bad} outside the law's support {support:?}"
        )));
    }
    let field_spec = FieldSpec {
        dim,
        law: Law::Perturbation(spec.clone()),
    };
    field_spec.validate()?;
    let field = build_field(&field_spec, n_cells, x_values.iter().map(|x| CellDraw::X(*x)));
    field.validate_coercive()?;
    Ok(FieldRealization {
        spec: field_spec,
        latent: Latent::Scalars(x_values.to_vec()),
        field,
    })
}
