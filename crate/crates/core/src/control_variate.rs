//! Control variates built from defect coefficients.
//!
//! The medium is `A = A_per + B_k C_per` on cell `k` with i.i.d. Bernoulli
//! `B_k`. The one-defect coefficient is the unnormalized integral
//!
//! `𝓐1 e_i = ∫_{Q_N} (A_per + 1_Q C_per)(e_i + grad w_i^N) - A_per (e_i + grad w_i^0)`,
//!
//! which equals `|Q_N| (A*_N(one defect) - A*_per)`. The pair surplus of two
//! defects at offset `l` is `D_l = |Q_N| (A*_N(defects at 0, l) - A*_per) - 2 𝓐1`.
//! Both are stored unnormalized; the factor `1/|Q_N|` is applied once, when
//! the controls are formed:
//!
//! - `Y1 = A*_per + |Q_N|^-1 Σ_k B_k 𝓐1`, with `E[Y1] = A*_per + η_B 𝓐1`;
//! - `Y2 = |Q_N|^-1 Σ_{k<j} B_k B_j D_{j-k}`, with `E[Y2] = (η_B^2 / 2) Σ_{l≠0} D_l`.
//!
//! `Y2` is a reconstruction of the second-order control. Forming either
//! control from the drawn `B_k` performs no PDE solve.
//!
//! The weights are fitted per matrix entry by least squares. A control whose
//! sample variance vanishes gets weight zero and the entry is flagged.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache;
use crate::error::{Error, Result};
use crate::homog::{homogenized_matrix, periodic_homogenize};
use crate::matrix::SmallMatrix;
use crate::mc::{
    counted, matrix_columns, par_indexed, sample_stats, Details, EstimatorReport,
    Method, RunParams, SampleRow, SampleTable,
};
use crate::pde::SolverSettings;
use crate::rfield::{draw_field, CoefficientField, FieldSpec, Law, PerturbationSpec, UnitCellField, XLaw};
use crate::stream::{rng_from_seed, Domain, Streams};

/// Everything a defect table depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectKey {
    pub a_per: UnitCellField,
    pub c_per: UnitCellField,
    #[serde(rename = "N")]
    pub n: usize,
    pub r: usize,
    pub solver_tol: f64,
}

impl DefectKey {
    /// `A_per = C0`, `C_per = eta * C1` for a Bernoulli perturbation law.
    pub fn from_spec(spec: &PerturbationSpec, n: usize, r: usize, settings: &SolverSettings) -> Self {
        Self {
            a_per: UnitCellField::constant(spec.c0),
            c_per: spec.c1.scaled(spec.eta),
            n,
            r,
            solver_tol: table_settings(settings).tol,
        }
    }

    pub fn dim(&self) -> usize {
        self.a_per.dim()
    }
}

/// Tables are built at least as tightly as `1e-12`, since the defect
/// surpluses are small differences of `A*_N` values.
fn table_settings(settings: &SolverSettings) -> SolverSettings {
    SolverSettings {
        tol: settings.tol.min(1e-12),
        max_iter: settings.max_iter,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoDefectEntry {
    /// Canonical representative of `{l, -l}` modulo `N`.
    pub offset: [usize; 2],
    /// Number of nonzero offsets the entry stands for (1 or 2).
    pub multiplicity: usize,
    pub value: SmallMatrix,
    /// Periodic solves the entry costs when built from scratch.
    pub solves: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectCoefficients {
    pub key: DefectKey,
    pub a_star_per: SmallMatrix,
    pub one_defect: SmallMatrix,
    /// Sup-norm radius of the tabulated minimal-image offsets; `None` when
    /// no two-defect table was built.
    pub cutoff: Option<f64>,
    pub two_defect: Vec<TwoDefectEntry>,
    /// Solves behind `a_star_per` and `one_defect`.
    pub base_solves: u64,
    /// Solves spent by this call; zero for entries read from a cache.
    #[serde(skip)]
    pub fresh_solves: u64,
}

fn dim_offsets(dim: usize, n: usize) -> impl Iterator<Item = [usize; 2]> {
    let ny = if dim == 1 { 1 } else { n };
    (0..ny).flat_map(move |y| (0..n).map(move |x| [x, y]))
}

fn negate(l: [usize; 2], n: usize, dim: usize) -> [usize; 2] {
    let y = if dim == 1 { 0 } else { (n - l[1]) % n };
    [(n - l[0]) % n, y]
}

/// Canonical member of `{l, -l}`: the smaller in `(y, x)` order.
pub fn canonical_offset(l: [usize; 2], n: usize, dim: usize) -> [usize; 2] {
    let m = negate(l, n, dim);
    if (m[1], m[0]) < (l[1], l[0]) {
        m
    } else {
        l
    }
}

/// Sup norm of the minimal periodic image of `l`.
pub fn offset_radius(l: [usize; 2], n: usize, dim: usize) -> usize {
    let comp = |c: usize| c.min(n - c);
    if dim == 1 {
        comp(l[0])
    } else {
        comp(l[0]).max(comp(l[1]))
    }
}

/// Canonical nonzero offsets within `cutoff`, with multiplicities.
pub fn canonical_offsets(dim: usize, n: usize, cutoff: f64) -> Vec<([usize; 2], usize)> {
    let mut out = BTreeMap::new();
    for l in dim_offsets(dim, n) {
        if l == [0, 0] || offset_radius(l, n, dim) as f64 > cutoff {
            continue;
        }
        *out.entry(canonical_offset(l, n, dim)).or_insert(0) += 1;
    }
    let mut v: Vec<_> = out.into_iter().collect();
    v.sort_by_key(|(l, _)| (l[1], l[0]));
    v
}

fn cell_index(l: [usize; 2], n: usize, dim: usize) -> usize {
    if dim == 1 {
        l[0]
    } else {
        l[1] * n + l[0]
    }
}

/// `A_per` tiled on `Q_N` with `C_per` added on the listed cells.
pub fn defect_field(a_per: &UnitCellField, c_per: &UnitCellField, n: usize, cells: &[usize]) -> Result<CoefficientField> {
    if a_per.dim() != c_per.dim() {
        return Err(Error::Config("A_per and C_per dimensions differ".into()));
    }
    let sub = a_per.sub().max(c_per.sub());
    let a = a_per.refined(sub)?;
    let c = c_per.refined(sub)?;
    let dim = a.dim();
    let plain: Vec<SmallMatrix> = a.values().to_vec();
    let perturbed: Vec<SmallMatrix> = a.values().iter().zip(c.values()).map(|(x, y)| *x + *y).collect();
    let count = n.pow(dim as u32);
    if let Some(bad) = cells.iter().find(|k| **k >= count) {
        return Err(Error::Config(format!("defect cell {bad} outside a box of {count} cells")));
    }
    let blocks: Vec<&[SmallMatrix]> = (0..count)
        .map(|k| {
            if cells.contains(&k) {
                perturbed.as_slice()
            } else {
                plain.as_slice()
            }
        })
        .collect();
    let field = CoefficientField::assemble_cells(dim, n, sub, &blocks);
    field.validate_coercive()?;
    Ok(field)
}

fn defect_integral(
    a_per: &UnitCellField,
    c_per: &UnitCellField,
    a_star_per: &SmallMatrix,
    n: usize,
    r: usize,
    cells: &[usize],
    settings: &SolverSettings,
) -> Result<SmallMatrix> {
    let field = defect_field(a_per, c_per, n, cells)?;
    let volume = n.pow(a_per.dim() as u32) as f64;
    let a = homogenized_matrix(&field, r, settings)?;
    Ok((a.matrix - *a_star_per) * volume)
}

/// `𝓐1` with the defect in cell `cell` (row-major index).
pub fn one_defect_coefficient_at(
    a_per: &UnitCellField,
    c_per: &UnitCellField,
    n: usize,
    r: usize,
    cell: usize,
    settings: &SolverSettings,
) -> Result<SmallMatrix> {
    if c_per.is_zero() {
        return Ok(SmallMatrix::zeros(a_per.dim()));
    }
    let a_star = periodic_homogenize(a_per, r, settings)?.matrix;
    defect_integral(a_per, c_per, &a_star, n, r, &[cell], settings)
}

/// `𝓐1`, the unnormalized one-defect coefficient.
pub fn one_defect_coefficient(
    a_per: &UnitCellField,
    c_per: &UnitCellField,
    n: usize,
    r: usize,
    settings: &SolverSettings,
) -> Result<SmallMatrix> {
    one_defect_coefficient_at(a_per, c_per, n, r, 0, settings)
}

/// `D_l` for defects at cell 0 and at offset `l`.
pub fn two_defect_coefficient(
    a_per: &UnitCellField,
    c_per: &UnitCellField,
    n: usize,
    r: usize,
    offset: [usize; 2],
    settings: &SolverSettings,
) -> Result<SmallMatrix> {
    let dim = a_per.dim();
    let l = [offset[0] % n, if dim == 1 { 0 } else { offset[1] % n }];
    if l == [0, 0] {
        return Err(Error::Config("two-defect offset must be nonzero modulo N".into()));
    }
    if c_per.is_zero() {
        return Ok(SmallMatrix::zeros(dim));
    }
    let a_star = periodic_homogenize(a_per, r, settings)?.matrix;
    let one = defect_integral(a_per, c_per, &a_star, n, r, &[0], settings)?;
    let two = defect_integral(a_per, c_per, &a_star, n, r, &[0, cell_index(l, n, dim)], settings)?;
    Ok(two - one * 2.0)
}

impl DefectCoefficients {
    /// Builds the table; `cutoff = None` skips the two-defect part. Entries
    /// already present in `reuse` (same key) are not recomputed.
    pub fn build(
        key: DefectKey,
        cutoff: Option<f64>,
        settings: &SolverSettings,
        reuse: Option<&DefectCoefficients>,
    ) -> Result<Self> {
        let settings = table_settings(settings);
        let reuse = reuse.filter(|t| t.key == key);
        let dim = key.dim();
        let (n, r) = (key.n, key.r);
        if n == 0 || r == 0 {
            return Err(Error::Config("defect table needs N >= 1 and r >= 1".into()));
        }
        let mut solves = 0;
        let (a_star_per, one_defect, base_solves) = match reuse {
            Some(t) => (t.a_star_per, t.one_defect, t.base_solves),
            None => {
                let (res, s) = counted(|| -> Result<_> {
                    let a_star = periodic_homogenize(&key.a_per, r, &settings)?.matrix;
                    let one = if key.c_per.is_zero() {
                        SmallMatrix::zeros(dim)
                    } else {
                        defect_integral(&key.a_per, &key.c_per, &a_star, n, r, &[0], &settings)?
                    };
                    Ok((a_star, one))
                });
                solves += s;
                let (a_star, one) = res?;
                (a_star, one, s)
            }
        };
        let mut two_defect = Vec::new();
        if let Some(radius) = cutoff {
            let offsets = canonical_offsets(dim, n, radius);
            let known: BTreeMap<[usize; 2], &TwoDefectEntry> = reuse
                .map(|t| t.two_defect.iter().map(|e| (e.offset, e)).collect())
                .unwrap_or_default();
            let computed: Vec<Result<(TwoDefectEntry, u64)>> = offsets
                .par_iter()
                .map(|(l, mult)| {
                    if let Some(e) = known.get(l) {
                        return Ok((
                            TwoDefectEntry {
                                offset: *l,
                                multiplicity: *mult,
                                value: e.value,
                                solves: e.solves,
                            },
                            0,
                        ));
                    }
                    let (v, s) = counted(|| -> Result<SmallMatrix> {
                        if key.c_per.is_zero() {
                            return Ok(SmallMatrix::zeros(dim));
                        }
                        let cells = [0, cell_index(*l, n, dim)];
                        let two = defect_integral(&key.a_per, &key.c_per, &a_star_per, n, r, &cells, &settings)?;
                        Ok(two - one_defect * 2.0)
                    });
                    Ok((
                        TwoDefectEntry {
                            offset: *l,
                            multiplicity: *mult,
                            value: v?,
                            solves: s,
                        },
                        s,
                    ))
                })
                .collect();
            for c in computed {
                let (entry, s) = c?;
                solves += s;
                two_defect.push(entry);
            }
        }
        Ok(Self {
            key,
            a_star_per,
            one_defect,
            cutoff,
            two_defect,
            base_solves,
            fresh_solves: solves,
        })
    }

    /// Reads the table from `path` when its key matches, completes missing
    /// offsets, and writes the result back.
    pub fn load_or_build(path: &Path, key: DefectKey, cutoff: Option<f64>, settings: &SolverSettings) -> Result<Self> {
        let cached: Option<DefectCoefficients> = cache::load(path, &key)?;
        let built = Self::build(key, cutoff, settings, cached.as_ref())?;
        if cached.as_ref() != Some(&built) {
            cache::store(path, &built.key, &built)?;
        }
        Ok(built)
    }

    /// Solves needed to build the table from scratch, cached or not.
    pub fn build_solves(&self) -> u64 {
        self.base_solves + self.two_defect.iter().map(|e| e.solves).sum::<u64>()
    }

    pub fn dim(&self) -> usize {
        self.key.dim()
    }

    /// `D_l` for any nonzero offset, zero beyond the cutoff.
    pub fn pair_lookup(&self) -> Vec<SmallMatrix> {
        let (dim, n) = (self.dim(), self.key.n);
        let mut out = vec![SmallMatrix::zeros(dim); n.pow(dim as u32)];
        let by_offset: BTreeMap<[usize; 2], SmallMatrix> =
            self.two_defect.iter().map(|e| (e.offset, e.value)).collect();
        for l in dim_offsets(dim, n) {
            if let Some(v) = by_offset.get(&canonical_offset(l, n, dim)) {
                out[cell_index(l, n, dim)] = *v;
            }
        }
        out
    }

    fn check_complete(&self) -> Result<()> {
        let Some(radius) = self.cutoff else {
            return Err(Error::Config("the defect table has no two-defect entries".into()));
        };
        let have: Vec<[usize; 2]> = self.two_defect.iter().map(|e| e.offset).collect();
        let missing: Vec<[usize; 2]> = canonical_offsets(self.dim(), self.key.n, radius)
            .into_iter()
            .map(|(l, _)| l)
            .filter(|l| !have.contains(l))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!("two-defect table is missing offsets {missing:?}")));
        }
        Ok(())
    }
}

fn bernoulli_prob(spec: &PerturbationSpec) -> Result<f64> {
    match spec.x_law {
        XLaw::Bernoulli01 { prob } => Ok(prob),
        XLaw::PlusMinusOne => Err(Error::Config(
            "control variates need the Bernoulli {0, 1} defect law".into(),
        )),
    }
}

/// `E[Y1]` and, for order 2, `E[Y2]`.
pub fn control_expectations(spec: &PerturbationSpec, defects: &DefectCoefficients, order: u8) -> Result<Vec<SmallMatrix>> {
    let prob = bernoulli_prob(spec)?;
    let mut out = vec![defects.a_star_per + defects.one_defect * prob];
    if order >= 2 {
        defects.check_complete()?;
        let mut sum = SmallMatrix::zeros(defects.dim());
        for e in &defects.two_defect {
            sum += e.value * e.multiplicity as f64;
        }
        out.push(sum * (0.5 * prob * prob));
    }
    Ok(out)
}

/// `E[Y1]` for order 1, `E[Y1] + E[Y2]` for order 2.
pub fn control_expectation(spec: &PerturbationSpec, defects: &DefectCoefficients, order: u8) -> Result<SmallMatrix> {
    if !(1..=2).contains(&order) {
        return Err(Error::Config(format!("control order {order} not in {{1, 2}}")));
    }
    let parts = control_expectations(spec, defects, order)?;
    Ok(parts.into_iter().fold(SmallMatrix::zeros(defects.dim()), |a, b| a + b))
}

/// The controls of one draw from its defect indicators `b_k`.
pub fn control_values(b: &[f64], defects: &DefectCoefficients, pairs: Option<&[SmallMatrix]>) -> Vec<SmallMatrix> {
    let (dim, n) = (defects.dim(), defects.key.n);
    let volume = n.pow(dim as u32) as f64;
    let count: f64 = b.iter().sum();
    let mut out = vec![defects.a_star_per + defects.one_defect * (count / volume)];
    if let Some(table) = pairs {
        let sites: Vec<(usize, usize)> = b
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(k, _)| if dim == 1 { (k, 0) } else { (k % n, k / n) })
            .collect();
        let weights: Vec<f64> = b.iter().copied().filter(|v| *v != 0.0).collect();
        let mut y2 = SmallMatrix::zeros(dim);
        for (a, (kx, ky)) in sites.iter().enumerate() {
            for (c, (jx, jy)) in sites.iter().enumerate().skip(a + 1) {
                let l = [(jx + n - kx) % n, (jy + n - ky) % n];
                y2 += table[cell_index(l, n, dim)] * (weights[a] * weights[c]);
            }
        }
        out.push(y2 * (1.0 / volume));
    }
    out
}

/// Least-squares weights of one matrix entry.
#[derive(Debug, Clone, PartialEq)]
pub struct RhoFit {
    pub rho: Vec<f64>,
    /// Some control had (numerically) zero variance or the covariance was singular.
    pub degenerate: bool,
}

/// Regression weights minimizing the sample variance of `x - Σ_c rho_c y_c`.
/// `y[s]` holds the controls of sample `s`.
pub fn optimal_rho(x: &[f64], y: &[Vec<f64>]) -> Result<RhoFit> {
    let m = x.len();
    if m < 2 || y.len() != m {
        return Err(Error::Config(format!(
            "need at least 2 paired samples, got {} and {}",
            m,
            y.len()
        )));
    }
    let k = y[0].len();
    if k == 0 || k > 2 || y.iter().any(|r| r.len() != k) {
        return Err(Error::Config("one or two controls per sample".into()));
    }
    let mx = x.iter().sum::<f64>() / m as f64;
    let my: Vec<f64> = (0..k).map(|c| y.iter().map(|r| r[c]).sum::<f64>() / m as f64).collect();
    let mut sxy = vec![0.0; k];
    let mut syy = [[0.0; 2]; 2];
    for (xs, ys) in x.iter().zip(y) {
        for a in 0..k {
            let da = ys[a] - my[a];
            sxy[a] += (xs - mx) * da;
            for b in 0..k {
                syy[a][b] += da * (ys[b] - my[b]);
            }
        }
    }
    let active: Vec<usize> = (0..k)
        .filter(|&c| {
            let floor = 1e-9 * my[c].abs().max(1.0);
            syy[c][c] / (m - 1) as f64 > floor * floor
        })
        .collect();
    let mut rho = vec![0.0; k];
    let mut degenerate = active.len() < k;
    match active.as_slice() {
        [] => {}
        [c] => rho[*c] = sxy[*c] / syy[*c][*c],
        _ => {
            let det = syy[0][0] * syy[1][1] - syy[0][1] * syy[1][0];
            if det <= 1e-12 * syy[0][0] * syy[1][1] {
                degenerate = true;
            } else {
                rho[0] = (syy[1][1] * sxy[0] - syy[0][1] * sxy[1]) / det;
                rho[1] = (syy[0][0] * sxy[1] - syy[1][0] * sxy[0]) / det;
            }
        }
    }
    Ok(RhoFit { rho, degenerate })
}

/// How the control weights are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RhoMode {
    /// Fitted on the samples they control (small bias, disclosed).
    SameSample,
    /// Fitted on the first `size` samples, applied to the rest.
    Pilot { size: usize },
    /// Prescribed weights, one per control, shared by all entries.
    Fixed { rho: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvOptions {
    pub order: u8,
    pub rho_mode: RhoMode,
    /// Sup-norm radius of two-defect offsets; `None` means `N / 2`.
    pub cutoff: Option<f64>,
}

impl CvOptions {
    pub fn new(order: u8) -> Self {
        Self {
            order,
            rho_mode: RhoMode::SameSample,
            cutoff: None,
        }
    }

    pub fn cutoff_for(&self, n: usize) -> Option<f64> {
        (self.order >= 2).then(|| self.cutoff.unwrap_or(n as f64 / 2.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvDetails {
    pub order: u8,
    pub rho_mode: RhoMode,
    /// Weight of each control, entrywise.
    pub rho: Vec<SmallMatrix>,
    /// Entries `[i, j]` (0-based) whose fit was degenerate.
    pub degenerate_entries: Vec<[usize; 2]>,
    pub raw_mean: SmallMatrix,
    pub raw_variance: SmallMatrix,
    pub control_expectation: Vec<SmallMatrix>,
    pub control_sample_mean: Vec<SmallMatrix>,
    pub a_star_per: SmallMatrix,
    pub one_defect: SmallMatrix,
    pub two_defect_offsets: usize,
    pub cutoff: Option<f64>,
    /// Solves spent on the defect table, not counted in `corrector_solves`.
    pub precomputation_solves: u64,
    /// Solves performed while forming controls (zero by construction).
    pub control_solves: u64,
    /// Samples used to fit the weights and excluded from the estimate.
    pub pilot_samples: usize,
    pub variance_not_increased: bool,
}

fn perturbation_of(spec: &FieldSpec) -> Result<&PerturbationSpec> {
    match &spec.law {
        Law::Perturbation(p) => {
            bernoulli_prob(p)?;
            Ok(p)
        }
        Law::TwoState { .. } => Err(Error::Config(
            "control variates need a perturbation law A_per + B_k C_per".into(),
        )),
    }
}

/// Builds the defect table for `spec` and runs [`run_cv_with_table`].
pub fn run_cv(spec: &FieldSpec, params: &RunParams, options: &CvOptions) -> Result<(EstimatorReport, SampleTable)> {
    let p = perturbation_of(spec)?;
    let key = DefectKey::from_spec(p, params.n, params.r, &params.solver);
    let defects = DefectCoefficients::build(key, options.cutoff_for(params.n), &params.solver, None)?;
    run_cv_with_table(spec, params, options, &defects)
}

pub fn run_cv_with_table(
    spec: &FieldSpec,
    params: &RunParams,
    options: &CvOptions,
    defects: &DefectCoefficients,
) -> Result<(EstimatorReport, SampleTable)> {
    params.validate(spec)?;
    let p = perturbation_of(spec)?;
    let order = options.order;
    if !(1..=2).contains(&order) {
        return Err(Error::Config(format!("control order {order} not in {{1, 2}}")));
    }
    let expected_key = DefectKey::from_spec(p, params.n, params.r, &params.solver);
    if defects.key != expected_key {
        return Err(Error::Config("defect table was built for a different medium, box or mesh".into()));
    }
    let expectations = control_expectations(p, defects, order)?;
    let pairs = (order >= 2).then(|| defects.pair_lookup());
    let dim = spec.dim;

    let streams = Streams::new(params.master_seed);
    let draws = par_indexed(params.m, |i| {
        let seed = streams.seed(Domain::Field, i as u64);
        let realization = draw_field(spec, params.n, &mut rng_from_seed(seed))?;
        let (raw, solves) = counted(|| homogenized_matrix(realization.field(), params.r, &params.solver));
        let b = realization
            .perturbation_scalars()
            .ok_or_else(|| Error::Internal("perturbation draw without scalars".into()))?;
        let (controls, control_solves) = counted(|| control_values(&b, defects, pairs.as_deref()));
        Ok((seed, raw?.matrix, controls, solves, control_solves))
    })?;

    let m = draws.len();
    let pilot = match &options.rho_mode {
        RhoMode::Pilot { size } => {
            if *size < 2 || *size + 2 > m {
                return Err(Error::Config(format!(
                    "pilot size {size} must be at least 2 and leave 2 of {m} samples"
                )));
            }
            *size
        }
        _ => 0,
    };
    if let RhoMode::Fixed { rho } = &options.rho_mode {
        if rho.len() != order as usize {
            return Err(Error::Config(format!("{} fixed weights for {order} controls", rho.len())));
        }
    }

    let mut rho = vec![SmallMatrix::zeros(dim); order as usize];
    let mut degenerate_entries = Vec::new();
    for i in 0..dim {
        for j in 0..dim {
            let fitted: Vec<f64> = match &options.rho_mode {
                RhoMode::Fixed { rho } => rho.clone(),
                mode => {
                    let fit_range = if matches!(mode, RhoMode::Pilot { .. }) { 0..pilot } else { 0..m };
                    let x: Vec<f64> = draws[fit_range.clone()].iter().map(|d| d.1.get(i, j)).collect();
                    let y: Vec<Vec<f64>> = draws[fit_range]
                        .iter()
                        .map(|d| d.2.iter().map(|c| c.get(i, j)).collect())
                        .collect();
                    let fit = optimal_rho(&x, &y)?;
                    if fit.degenerate {
                        degenerate_entries.push([i, j]);
                    }
                    fit.rho
                }
            };
            for (c, v) in fitted.iter().enumerate() {
                rho[c].set(i, j, *v);
            }
        }
    }

    let mut aux_names = matrix_columns("raw", dim);
    aux_names.extend(matrix_columns("y1", dim));
    if order >= 2 {
        aux_names.extend(matrix_columns("y2", dim));
    }
    let mut table = SampleTable::new(dim, aux_names);
    let mut solves = 0;
    let mut control_solves = 0;
    let mut raw_values = Vec::with_capacity(m);
    let mut control_sums = vec![SmallMatrix::zeros(dim); order as usize];
    for (index, (seed, raw, controls, s, cs)) in draws.iter().enumerate() {
        solves += s;
        control_solves += cs;
        if index < pilot {
            continue;
        }
        let mut value = *raw;
        for (c, y) in controls.iter().enumerate() {
            control_sums[c] += *y;
            let centered = *y - expectations[c];
            for a in 0..dim {
                for b in 0..dim {
                    value.set(a, b, value.get(a, b) - rho[c].get(a, b) * centered.get(a, b));
                }
            }
        }
        let mut aux = raw.to_vec();
        for y in controls {
            aux.extend(y.to_vec());
        }
        raw_values.push(*raw);
        table.rows.push(SampleRow {
            index,
            seed: *seed,
            value,
            aux,
        });
    }
    let kept = table.len() as f64;
    let raw_stats = sample_stats(&raw_values)?;
    let controlled = sample_stats(&table.values())?;
    let variance_not_increased = (0..dim).all(|i| {
        (0..dim).all(|j| {
            let raw = raw_stats.variance.get(i, j);
            controlled.variance.get(i, j) <= raw * (1.0 + 1e-10) + 1e-300
        })
    });

    let details = CvDetails {
        order,
        rho_mode: options.rho_mode.clone(),
        rho,
        degenerate_entries,
        raw_mean: raw_stats.mean,
        raw_variance: raw_stats.variance,
        control_expectation: expectations,
        control_sample_mean: control_sums.into_iter().map(|s| s * (1.0 / kept)).collect(),
        a_star_per: defects.a_star_per,
        one_defect: defects.one_defect,
        two_defect_offsets: defects.two_defect.len(),
        cutoff: defects.cutoff,
        precomputation_solves: defects.build_solves(),
        control_solves,
        pilot_samples: pilot,
        variance_not_increased,
    };
    let method = if order == 1 { Method::Cv1 } else { Method::Cv2 };
    let report = EstimatorReport::from_samples(method, spec, params, &table.values(), solves, Details::ControlVariate(details))?;
    Ok((report, table))
}

/// Sample mean and variance of `Y1` over `count` cheap draws of the defect
/// indicators (no PDE solves).
pub fn sample_first_control(
    spec: &PerturbationSpec,
    defects: &DefectCoefficients,
    count: usize,
    master_seed: u64,
) -> Result<(SmallMatrix, SmallMatrix)> {
    bernoulli_prob(spec)?;
    let cells = defects.key.n.pow(defects.dim() as u32);
    let streams = Streams::new(master_seed);
    let values: Vec<SmallMatrix> = (0..count)
        .map(|i| {
            let mut rng = streams.rng(Domain::Auxiliary, i as u64);
            let b: Vec<f64> = (0..cells)
                .map(|_| spec.x_law.from_uniform(rng.random::<f64>()))
                .collect();
            control_values(&b, defects, None)[0]
        })
        .collect();
    let stats = sample_stats(&values)?;
    Ok((stats.mean, stats.variance))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_unit(c: f64) -> UnitCellField {
        UnitCellField::constant(SmallMatrix::scalar(1, c))
    }

    fn tight() -> SolverSettings {
        SolverSettings::with_tol(1e-12)
    }

    #[test]
    fn one_defect_in_one_dimension_is_four_sevenths() {
        // N * harmonic mean of {2, 1, 1, 1} - N * 1 = 32/7 - 4.
        let v = one_defect_coefficient(&scalar_unit(1.0), &scalar_unit(1.0), 4, 4, &tight()).unwrap();
        assert!((v.get(0, 0) - 4.0 / 7.0).abs() < 1e-10, "{v:?}");
    }

    #[test]
    fn zero_perturbation_gives_zero_coefficients() {
        let a = UnitCellField::constant(SmallMatrix::scalar(2, 3.0));
        let c = UnitCellField::constant(SmallMatrix::zeros(2));
        assert_eq!(one_defect_coefficient(&a, &c, 3, 2, &tight()).unwrap(), SmallMatrix::zeros(2));
        assert_eq!(two_defect_coefficient(&a, &c, 3, 2, [1, 0], &tight()).unwrap(), SmallMatrix::zeros(2));
    }

    #[test]
    fn one_defect_is_independent_of_position() {
        let a = UnitCellField::constant(SmallMatrix::scalar(2, 3.0));
        let c = UnitCellField::constant(SmallMatrix::scalar(2, 20.0));
        let at0 = one_defect_coefficient_at(&a, &c, 3, 4, 0, &tight()).unwrap();
        let at11 = one_defect_coefficient_at(&a, &c, 3, 4, 4, &tight()).unwrap();
        assert!((at0 - at11).max_abs() < 1e-8);
    }

    #[test]
    fn pair_surplus_is_symmetric_in_the_offset() {
        let a = UnitCellField::constant(SmallMatrix::scalar(2, 3.0));
        let c = UnitCellField::constant(SmallMatrix::scalar(2, 20.0));
        let plus = two_defect_coefficient(&a, &c, 4, 2, [1, 2], &tight()).unwrap();
        let minus = two_defect_coefficient(&a, &c, 4, 2, [3, 2], &tight()).unwrap();
        assert!((plus - minus).max_abs() < 1e-8);
        assert!(two_defect_coefficient(&a, &c, 4, 2, [4, 0], &tight()).is_err());
    }

    #[test]
    fn offsets_cover_every_nonzero_class() {
        for (dim, n) in [(1, 5), (1, 6), (2, 4), (2, 5)] {
            let offs = canonical_offsets(dim, n, n as f64 / 2.0);
            let total: usize = offs.iter().map(|(_, m)| m).sum();
            assert_eq!(total, n.pow(dim as u32) - 1);
        }
        // N = 10 in 2D: 99 nonzero offsets, 3 of them self-inverse.
        assert_eq!(canonical_offsets(2, 10, 5.0).len(), 51);
    }

    #[test]
    fn rho_examples() {
        let fit = optimal_rho(&[1.0, 2.0, 3.0], &[vec![2.0], vec![4.0], vec![6.0]]).unwrap();
        assert!((fit.rho[0] - 0.5).abs() < 1e-15 && !fit.degenerate);
        let same = optimal_rho(&[1.0, 5.0, 2.0, 7.0], &[vec![1.0], vec![5.0], vec![2.0], vec![7.0]]).unwrap();
        assert!((same.rho[0] - 1.0).abs() < 1e-15);
        let flat = optimal_rho(&[1.0, 2.0, 3.0], &[vec![4.0], vec![4.0], vec![4.0]]).unwrap();
        assert_eq!(flat.rho, vec![0.0]);
        assert!(flat.degenerate);
        let collinear = optimal_rho(&[1.0, 2.0, 4.0], &[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        assert!(collinear.degenerate);
        assert_eq!(collinear.rho, vec![0.0, 0.0]);
    }

    #[test]
    fn expectation_limits() {
        let a = scalar_unit(1.0);
        let c = scalar_unit(1.0);
        let key = DefectKey {
            a_per: a.clone(),
            c_per: c.clone(),
            n: 4,
            r: 2,
            solver_tol: 1e-12,
        };
        let table = DefectCoefficients::build(key, Some(2.0), &tight(), None).unwrap();
        let spec = |prob: f64| {
            PerturbationSpec::new(SmallMatrix::identity(1), c.clone(), 1.0, XLaw::Bernoulli01 { prob }).unwrap()
        };
        assert_eq!(control_expectation(&spec(0.0), &table, 1).unwrap(), table.a_star_per);
        assert_eq!(
            control_expectation(&spec(1.0), &table, 1).unwrap(),
            table.a_star_per + table.one_defect
        );
        let mut partial = table.clone();
        partial.two_defect.pop();
        assert!(matches!(control_expectation(&spec(0.5), &partial, 2), Err(Error::Config(_))));
    }

    #[test]
    fn controls_need_no_solves() {
        let key = DefectKey {
            a_per: scalar_unit(1.0),
            c_per: scalar_unit(2.0),
            n: 5,
            r: 2,
            solver_tol: 1e-12,
        };
        let table = DefectCoefficients::build(key, Some(2.5), &tight(), None).unwrap();
        let lookup = table.pair_lookup();
        let (_, solves) = counted(|| control_values(&[1.0, 0.0, 1.0, 1.0, 0.0], &table, Some(&lookup)));
        assert_eq!(solves, 0);
    }

    #[test]
    fn table_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("defects.json");
        let key = DefectKey {
            a_per: scalar_unit(1.0),
            c_per: scalar_unit(1.0),
            n: 4,
            r: 2,
            solver_tol: 1e-12,
        };
        let first = DefectCoefficients::load_or_build(&path, key.clone(), Some(2.0), &tight()).unwrap();
        assert!(first.fresh_solves > 0);
        let again = DefectCoefficients::load_or_build(&path, key.clone(), Some(2.0), &tight()).unwrap();
        assert_eq!(again.fresh_solves, 0);
        assert_eq!(again.build_solves(), first.build_solves());
        assert_eq!(again.two_defect, first.two_defect);
        let mut other = key;
        other.n = 5;
        let rebuilt = DefectCoefficients::load_or_build(&path, other, Some(2.0), &tight()).unwrap();
        assert!(rebuilt.fresh_solves > 0);
    }
}
