//! Special quasirandom structures.
//!
//! For `A = C0 + η χ C1` with `χ = Σ_k x_k 1_{Q+k}`, constant `C0` and i.i.d.
//! `x_k = ±1`, the apparent matrix expands as `A*_N = A*0 + η A*1 + η² A*2 + O(η³)`:
//!
//! - `A*0 = C0`, configuration independent on any integer box;
//! - `A*1 = |Q_N|^-1 Σ_k x_k ∫_Q C1`, constant over balanced configurations;
//! - `A*2 p = |Q_N|^-1 Σ_{k,j} x_k x_j I_{j-k} p`, where `I_l p = ∫_{Q+l} C1 ∇φ_p`
//!   and `φ_p` solves `-div(C0 ∇φ_p) = div(1_Q C1 p)` on `Q_N`.
//!
//! A configuration satisfies the first reduced condition when `Σ_k x_k = 0`,
//! and the second when its `A*2` matches `Var(x) I^∞_0`, the one-cell
//! interaction of the whole-space problem. `I^∞_0` is approximated on a
//! larger periodic box.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache;
use crate::error::{Error, Result};
use crate::homog::{homogenized_matrix, unit_vector};
use crate::matrix::SmallMatrix;
use crate::mc::{
    counted, mean_and_variance, par_indexed, Details, EstimatorReport, Method, RunParams, SampleRow,
    SampleTable, Z_95,
};
use crate::pde::{assemble, load_from_flux, solve_field, DiscreteOperator, Mesh, QuadratureField, ScalarField, SolverSettings};
use crate::rfield::{realize_perturbation, FieldSpec, Law, PerturbationSpec, UnitCellField, XLaw};
use crate::stream::{Domain, StreamRng, Streams};

/// Terms of the expansion of `A*_N` in powers of `η` and the fields behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionTerms {
    pub a0: SmallMatrix,
    pub a1: SmallMatrix,
    pub a2: SmallMatrix,
    /// One field per direction.
    pub w0: Vec<ScalarField>,
    pub u1: Vec<ScalarField>,
    pub u2: Vec<ScalarField>,
}

impl ExpansionTerms {
    /// `A*0 + η A*1 + η² A*2`.
    pub fn truncated(&self, eta: f64) -> SmallMatrix {
        self.a0 + self.a1 * eta + self.a2 * (eta * eta)
    }
}

fn check_resolution(c1: &UnitCellField, r: usize) -> Result<()> {
    if r == 0 || r % c1.sub() != 0 {
        return Err(Error::Config(format!(
            "resolution r = {r} must be a positive multiple of the C1 sub-grid {}",
            c1.sub()
        )));
    }
    Ok(())
}

/// `C1` on every element of `mesh`.
fn element_c1(mesh: &Mesh, c1: &UnitCellField) -> Vec<SmallMatrix> {
    let sub = c1.sub();
    (0..mesh.element_count())
        .map(|e| {
            let (gx, gy) = mesh.element_sub_cell(e, sub);
            let (lx, ly) = (gx % sub, gy % sub);
            c1.values()[if mesh.dim() == 1 { lx } else { ly * sub + lx }]
        })
        .collect()
}

fn constant_operator(mesh: &Mesh, c0: SmallMatrix) -> Result<DiscreteOperator> {
    assemble(mesh, vec![c0; mesh.element_count()])
}

fn solve_flux(op: &DiscreteOperator, flux: &[[f64; 2]], settings: &SolverSettings) -> Result<ScalarField> {
    let load = load_from_flux(op.mesh(), flux)?;
    solve_field(op, &load, settings)
}

/// `M_e v(e, q)` sampled at every quadrature point.
fn pointwise(mesh: &Mesh, coeff: impl Fn(usize) -> SmallMatrix, v: impl Fn(usize, usize) -> [f64; 2]) -> QuadratureField {
    let nq = mesh.quad_points();
    (0..mesh.element_count())
        .flat_map(|e| {
            let m = coeff(e);
            (0..nq).map(move |q| (e, q, m))
        })
        .map(|(e, q, m)| m.apply(v(e, q)))
        .collect()
}

fn average(mesh: &Mesh, flux: &[[f64; 2]]) -> [f64; 2] {
    let nq = mesh.quad_points();
    let v = crate::pde::integrate(mesh, |e, q| flux[e * nq + q]);
    let vol = mesh.volume();
    [v[0] / vol, v[1] / vol]
}

/// Solves the three cascaded problems of the expansion for the cell scalars `x`.
pub fn expansion_terms(
    spec: &PerturbationSpec,
    x: &[f64],
    n: usize,
    r: usize,
    settings: &SolverSettings,
) -> Result<ExpansionTerms> {
    let dim = spec.dim();
    check_resolution(&spec.c1, r)?;
    let mesh = Mesh::new(dim, n, r)?;
    if x.len() != mesh.n_cells().pow(dim as u32) {
        return Err(Error::Config(format!("expected {} cell scalars, got {}", mesh.n_cells().pow(dim as u32), x.len())));
    }
    let op = constant_operator(&mesh, spec.c0)?;
    let c1 = element_c1(&mesh, &spec.c1);
    let chi_c1 = |e: usize| c1[e] * x[mesh.element_cell(e)];
    let nq = mesh.quad_points();
    let mut terms = ExpansionTerms {
        a0: SmallMatrix::zeros(dim),
        a1: SmallMatrix::zeros(dim),
        a2: SmallMatrix::zeros(dim),
        w0: Vec::new(),
        u1: Vec::new(),
        u2: Vec::new(),
    };
    for dir in 0..dim {
        let p = unit_vector(dim, dir);
        let w0 = solve_flux(&op, &pointwise(&mesh, |_| spec.c0, |_, _| p), settings)?;
        let gw0 = w0.gradient_at_quadrature();
        let shifted = |e: usize, q: usize| {
            let g = gw0[e * nq + q];
            [p[0] + g[0], p[1] + g[1]]
        };
        let source1 = pointwise(&mesh, chi_c1, shifted);
        let u1 = solve_flux(&op, &source1, settings)?;
        let gu1 = u1.gradient_at_quadrature();
        let source2 = pointwise(&mesh, chi_c1, |e, q| gu1[e * nq + q]);
        let u2 = solve_flux(&op, &source2, settings)?;
        let gu2 = u2.gradient_at_quadrature();

        let f0 = average(&mesh, &pointwise(&mesh, |_| spec.c0, shifted));
        let c0_u1 = average(&mesh, &pointwise(&mesh, |_| spec.c0, |e, q| gu1[e * nq + q]));
        let c0_u2 = average(&mesh, &pointwise(&mesh, |_| spec.c0, |e, q| gu2[e * nq + q]));
        let s1 = average(&mesh, &source1);
        let s2 = average(&mesh, &source2);
        for i in 0..dim {
            terms.a0.set(i, dir, f0[i]);
            terms.a1.set(i, dir, s1[i] + c0_u1[i]);
            terms.a2.set(i, dir, s2[i] + c0_u2[i]);
        }
        terms.w0.push(w0);
        terms.u1.push(u1);
        terms.u2.push(u2);
    }
    Ok(terms)
}

/// Everything an interaction table depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqsKey {
    pub c0: SmallMatrix,
    pub c1: UnitCellField,
    #[serde(rename = "N")]
    pub n: usize,
    pub r: usize,
    #[serde(rename = "N_ref")]
    pub n_ref: usize,
    pub solver_tol: f64,
}

impl SqsKey {
    pub fn new(spec: &PerturbationSpec, n: usize, r: usize, n_ref: Option<usize>, settings: &SolverSettings) -> Self {
        Self {
            c0: spec.c0,
            c1: spec.c1.clone(),
            n,
            r,
            n_ref: n_ref.unwrap_or(3 * n),
            solver_tol: settings.tol.min(1e-12),
        }
    }

    pub fn dim(&self) -> usize {
        self.c0.dim()
    }
}

/// Interaction integrals `I_l` on `Q_N` and the reference value `I^∞_0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqsTables {
    pub key: SqsKey,
    /// `I_l` for every offset `l`, row-major; column `p` is `∫_{Q+l} C1 ∇φ_p`.
    pub offsets: Vec<SmallMatrix>,
    /// Nodal values of `φ_p` on `Q_N`, one vector per direction.
    pub phi: Vec<Vec<f64>>,
    /// `Σ_l I_l`, i.e. `∫_{Q_N} C1 ∇φ_p`.
    pub offset_sum: SmallMatrix,
    /// `I_0` on the `N_ref` box.
    pub i_infinity: SmallMatrix,
    /// `|I_0(N_ref) - I_0(⌈N_ref / 2⌉)|`, largest entry.
    pub i_infinity_error: f64,
    /// Solves needed to build the tables from scratch.
    pub solves: u64,
    /// Set when the tables were read from a cache.
    #[serde(skip)]
    pub cached: bool,
}

/// `I_l` on a box of side `n`, with the potentials.
pub fn interaction_table(
    c0: SmallMatrix,
    c1: &UnitCellField,
    n: usize,
    r: usize,
    settings: &SolverSettings,
) -> Result<(Vec<SmallMatrix>, Vec<ScalarField>)> {
    let dim = c0.dim();
    check_resolution(c1, r)?;
    let mesh = Mesh::new(dim, n, r)?;
    let op = constant_operator(&mesh, c0)?;
    let c1e = element_c1(&mesh, c1);
    let nq = mesh.quad_points();
    let w = mesh.quad_weight();
    let mut table = vec![SmallMatrix::zeros(dim); mesh.n_cells().pow(dim as u32)];
    let mut phis = Vec::with_capacity(dim);
    for dir in 0..dim {
        let p = unit_vector(dim, dir);
        let source = pointwise(
            &mesh,
            |e| if mesh.element_cell(e) == 0 { c1e[e] } else { SmallMatrix::zeros(dim) },
            |_, _| p,
        );
        let phi = solve_flux(&op, &source, settings)?;
        let g = phi.gradient_at_quadrature();
        for e in 0..mesh.element_count() {
            let k = mesh.element_cell(e);
            for q in 0..nq {
                let f = c1e[e].apply(g[e * nq + q]);
                for (i, fi) in f.iter().enumerate().take(dim) {
                    let v = table[k].get(i, dir) + w * fi;
                    table[k].set(i, dir, v);
                }
            }
        }
        phis.push(phi);
    }
    Ok((table, phis))
}

/// `∫_{Q+target} C1 ∇φ` for the source placed on cell `source` rather than
/// cell 0; equals `I_{target - source}` by translation invariance.
pub fn interaction_direct(
    c0: SmallMatrix,
    c1: &UnitCellField,
    n: usize,
    r: usize,
    source: [usize; 2],
    target: [usize; 2],
    settings: &SolverSettings,
) -> Result<SmallMatrix> {
    let dim = c0.dim();
    check_resolution(c1, r)?;
    let mesh = Mesh::new(dim, n, r)?;
    let cell = |c: [usize; 2]| if dim == 1 { c[0] % n } else { (c[1] % n) * n + c[0] % n };
    let (src, tgt) = (cell(source), cell(target));
    let op = constant_operator(&mesh, c0)?;
    let c1e = element_c1(&mesh, c1);
    let nq = mesh.quad_points();
    let w = mesh.quad_weight();
    let mut out = SmallMatrix::zeros(dim);
    for dir in 0..dim {
        let p = unit_vector(dim, dir);
        let source = pointwise(
            &mesh,
            |e| if mesh.element_cell(e) == src { c1e[e] } else { SmallMatrix::zeros(dim) },
            |_, _| p,
        );
        let g = solve_flux(&op, &source, settings)?.gradient_at_quadrature();
        for e in (0..mesh.element_count()).filter(|e| mesh.element_cell(*e) == tgt) {
            for q in 0..nq {
                let f = c1e[e].apply(g[e * nq + q]);
                for (i, fi) in f.iter().enumerate().take(dim) {
                    out.set(i, dir, out.get(i, dir) + w * fi);
                }
            }
        }
    }
    Ok(out)
}

impl SqsTables {
    pub fn build(key: SqsKey) -> Result<Self> {
        let (n, n_ref) = (key.n, key.n_ref);
        if n == 0 {
            return Err(Error::Config("N must be at least 1".into()));
        }
        if n_ref < n {
            return Err(Error::Config(format!("N_ref = {n_ref} must be at least N = {n}")));
        }
        let settings = SolverSettings::with_tol(key.solver_tol);
        let boxes = [n, n_ref, n_ref.div_ceil(2)];
        let results: Vec<Result<((Vec<SmallMatrix>, Vec<ScalarField>), u64)>> = boxes
            .par_iter()
            .map(|side| {
                let (t, s) = counted(|| interaction_table(key.c0, &key.c1, *side, key.r, &settings));
                Ok((t?, s))
            })
            .collect();
        let mut solves = 0;
        let mut tables = Vec::with_capacity(3);
        for r in results {
            let (t, s) = r?;
            solves += s;
            tables.push(t);
        }
        let (offsets, phis) = tables.remove(0);
        let i_infinity = tables[0].0[0];
        let i_half = tables[1].0[0];
        let offset_sum = offsets.iter().fold(SmallMatrix::zeros(key.dim()), |a, b| a + *b);
        Ok(Self {
            i_infinity_error: (i_infinity - i_half).max_abs(),
            key,
            offsets,
            phi: phis.into_iter().map(|f| f.values().to_vec()).collect(),
            offset_sum,
            i_infinity,
            solves,
            cached: false,
        })
    }

    pub fn load_or_build(path: &std::path::Path, key: SqsKey) -> Result<Self> {
        if let Some(t) = cache::load::<SqsKey, SqsTables>(path, &key)? {
            return Ok(Self { cached: true, ..t });
        }
        let built = Self::build(key)?;
        cache::store(path, &built.key, &built)?;
        Ok(built)
    }

    pub fn dim(&self) -> usize {
        self.key.dim()
    }

    pub fn n(&self) -> usize {
        self.key.n
    }
}

/// `|Q_N|^-1 Σ_k x_k`.
pub fn sqs1_residual(x: &[f64], _n: usize) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// `c(l) = Σ_k x_k x_{k+l}` over periodic offsets, row-major in `l`.
pub fn autocorrelation(x: &[f64], n: usize, dim: usize) -> Vec<f64> {
    let count = x.len();
    let ny = if dim == 1 { 1 } else { n };
    let mut out = vec![0.0; count];
    for ly in 0..ny {
        for lx in 0..n {
            let mut acc = 0.0;
            for ky in 0..ny {
                for kx in 0..n {
                    let j = ((ky + ly) % n) * n + (kx + lx) % n;
                    acc += x[ky * n + kx] * x[j];
                }
            }
            out[ly * n + lx] = acc;
        }
    }
    out
}

/// `|Q_N|^-1 Σ_{k,j} x_k x_j I_{j-k}`, which equals `A*2` of the configuration.
pub fn sqs2_lhs(x: &[f64], tables: &SqsTables) -> Result<SmallMatrix> {
    if x.len() != tables.offsets.len() {
        return Err(Error::Internal(format!(
            "interaction table has {} offsets for {} cells",
            tables.offsets.len(),
            x.len()
        )));
    }
    let c = autocorrelation(x, tables.n(), tables.dim());
    let mut out = SmallMatrix::zeros(tables.dim());
    for (cl, il) in c.iter().zip(&tables.offsets) {
        out += *il * *cl;
    }
    Ok(out * (1.0 / x.len() as f64))
}

/// Per direction `p`, `|A*2 p - Var(x) I^∞_0 p|` with `Var(x) = 1`.
pub fn sqs2_residuals(x: &[f64], tables: &SqsTables) -> Result<Vec<f64>> {
    let diff = sqs2_lhs(x, tables)? - tables.i_infinity;
    let dim = tables.dim();
    Ok((0..dim)
        .map(|p| (0..dim).map(|i| diff.get(i, p).powi(2)).sum::<f64>().sqrt())
        .collect())
}

/// Largest per-direction residual.
pub fn sqs2_residual(x: &[f64], tables: &SqsTables) -> Result<f64> {
    Ok(sqs2_residuals(x, tables)?.into_iter().fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqsConfiguration {
    pub x_values: Vec<f64>,
    pub sqs1_residual: f64,
    pub sqs2_residual: Option<f64>,
    /// Index of the stream the configuration was drawn from.
    pub stream_index: usize,
    pub seed: u64,
    /// `|Σ x_k| = 1` because `N^d` is odd.
    pub minimal_residual: bool,
}

/// A uniformly shuffled balanced `±1` configuration. With `allow_minimal`,
/// odd cell counts get one surplus cell of random sign.
pub fn sample_sqs1(n: usize, dim: usize, rng: &mut StreamRng, allow_minimal: bool) -> Result<(Vec<f64>, bool)> {
    if n == 0 || !(1..=2).contains(&dim) {
        return Err(Error::Config(format!("invalid box N = {n}, d = {dim}")));
    }
    let count = n.pow(dim as u32);
    let odd = count % 2 == 1;
    if odd && !allow_minimal {
        return Err(Error::Config(format!(
            "N^d = {count} is odd so no configuration has zero sum; enable the minimal-residual mode"
        )));
    }
    let mut plus = count / 2;
    if odd && rng.random::<bool>() {
        plus += 1;
    }
    let mut x: Vec<f64> = (0..count).map(|k| if k < plus { 1.0 } else { -1.0 }).collect();
    x.shuffle(rng);
    Ok((x, odd))
}

/// A balanced configuration; errors when `N^d` is odd.
pub fn sample_exact_sqs1(n: usize, dim: usize, rng: &mut StreamRng) -> Result<Vec<f64>> {
    Ok(sample_sqs1(n, dim, rng, false)?.0)
}

/// How order-2 configurations are chosen from the pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selection {
    /// The `M` smallest residuals; ties go to the earlier draw.
    BestOfPool,
    /// The first `M` draws with residual at most `tol`.
    Tolerance { tol: f64 },
}

/// Draws `pool` candidates from the pool streams and keeps `keep` of them.
/// Also returns every candidate residual in draw order and the solves spent.
pub fn select_sqs2(
    dim: usize,
    master_seed: u64,
    pool: usize,
    keep: usize,
    tables: &SqsTables,
    selection: Selection,
    allow_minimal: bool,
) -> Result<(Vec<SqsConfiguration>, Vec<f64>, u64)> {
    if keep == 0 || pool < keep {
        return Err(Error::Config(format!("pool P = {pool} must satisfy P >= M = {keep} >= 1")));
    }
    if tables.dim() != dim {
        return Err(Error::Config("interaction table dimension differs".into()));
    }
    let n = tables.n();
    let streams = Streams::new(master_seed);
    let evaluated: Vec<(SqsConfiguration, u64)> = par_indexed(pool, |i| {
        let seed = streams.seed(Domain::Pool, i as u64);
        let (config, s) = counted(|| -> Result<SqsConfiguration> {
            let mut rng = crate::stream::rng_from_seed(seed);
            let (x, minimal) = sample_sqs1(n, dim, &mut rng, allow_minimal)?;
            Ok(SqsConfiguration {
                sqs1_residual: sqs1_residual(&x, n),
                sqs2_residual: Some(sqs2_residual(&x, tables)?),
                x_values: x,
                stream_index: i,
                seed,
                minimal_residual: minimal,
            })
        });
        Ok((config?, s))
    })?;
    let solves = evaluated.iter().map(|e| e.1).sum();
    let candidates: Vec<SqsConfiguration> = evaluated.into_iter().map(|e| e.0).collect();
    let residuals: Vec<f64> = candidates.iter().map(|c| c.sqs2_residual.unwrap_or(0.0)).collect();
    let chosen: Vec<SqsConfiguration> = match selection {
        Selection::BestOfPool => {
            let mut order: Vec<usize> = (0..pool).collect();
            order.sort_by(|a, b| residuals[*a].total_cmp(&residuals[*b]).then(a.cmp(b)));
            order.into_iter().take(keep).map(|i| candidates[i].clone()).collect()
        }
        Selection::Tolerance { tol } => {
            let within: Vec<SqsConfiguration> = candidates
                .iter()
                .filter(|c| c.sqs2_residual.unwrap_or(0.0) <= tol)
                .take(keep)
                .cloned()
                .collect();
            if within.len() < keep {
                return Err(Error::Config(format!(
                    "only {} of {pool} candidates have residual <= {tol}, {keep} needed",
                    within.len()
                )));
            }
            within
        }
    };
    Ok((chosen, residuals, solves))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SqsOptions {
    pub order: u8,
    /// Candidates drawn for order 2.
    pub pool: usize,
    pub selection: Selection,
    /// Reference box for `I^∞_0`; `None` means `3N`.
    pub n_ref: Option<usize>,
    pub allow_minimal_residual: bool,
}

impl SqsOptions {
    pub fn new(order: u8, pool: usize) -> Self {
        Self {
            order,
            pool,
            selection: Selection::BestOfPool,
            n_ref: None,
            allow_minimal_residual: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqsDetails {
    pub order: u8,
    pub pool_size: Option<usize>,
    pub selection: Option<Selection>,
    /// Solves spent choosing configurations.
    pub selection_solves: u64,
    /// Solves spent on interaction tables, not counted in `corrector_solves`.
    pub table_solves: u64,
    pub sqs1_residual_max_abs: f64,
    pub sqs2_residual_min: Option<f64>,
    pub sqs2_residual_mean: Option<f64>,
    pub sqs2_residual_max: Option<f64>,
    pub pool_residual_median: Option<f64>,
    #[serde(rename = "N_ref")]
    pub n_ref: Option<usize>,
    pub i_infinity: Option<SmallMatrix>,
    pub i_infinity_error: Option<f64>,
    /// Some configuration had `|Σ x_k| = 1`.
    pub minimal_residual_mode: bool,
    /// `(mean - baseline mean) / half-width` on entry (1, 1), when a
    /// plain Monte Carlo baseline was supplied.
    pub bias_indicator: Option<f64>,
}

fn pm1_spec(spec: &FieldSpec) -> Result<&PerturbationSpec> {
    match &spec.law {
        Law::Perturbation(p) if p.x_law == XLaw::PlusMinusOne => Ok(p),
        _ => Err(Error::Config("selection sampling needs a perturbation law with ±1 cell scalars".into())),
    }
}

/// Builds the interaction tables when needed and runs [`run_sqs_with_tables`].
pub fn run_sqs(spec: &FieldSpec, params: &RunParams, options: &SqsOptions) -> Result<(EstimatorReport, SampleTable)> {
    let p = pm1_spec(spec)?;
    let tables = if options.order >= 2 {
        Some(SqsTables::build(SqsKey::new(p, params.n, params.r, options.n_ref, &params.solver))?)
    } else {
        None
    };
    run_sqs_with_tables(spec, params, options, tables.as_ref())
}

pub fn run_sqs_with_tables(
    spec: &FieldSpec,
    params: &RunParams,
    options: &SqsOptions,
    tables: Option<&SqsTables>,
) -> Result<(EstimatorReport, SampleTable)> {
    params.validate(spec)?;
    let p = pm1_spec(spec)?;
    let dim = spec.dim;
    let (configs, pool_residuals, selection_solves) = match options.order {
        1 => {
            let streams = Streams::new(params.master_seed);
            let configs = par_indexed(params.m, |i| {
                let seed = streams.seed(Domain::Field, i as u64);
                let mut rng = crate::stream::rng_from_seed(seed);
                let (x, minimal) = sample_sqs1(params.n, dim, &mut rng, options.allow_minimal_residual)?;
                Ok(SqsConfiguration {
                    sqs1_residual: sqs1_residual(&x, params.n),
                    sqs2_residual: tables.map(|t| sqs2_residual(&x, t)).transpose()?,
                    x_values: x,
                    stream_index: i,
                    seed,
                    minimal_residual: minimal,
                })
            })?;
            (configs, None, 0)
        }
        2 => {
            let t = tables.ok_or_else(|| Error::Config("order 2 needs interaction tables".into()))?;
            let expected = SqsKey::new(p, params.n, params.r, Some(t.key.n_ref), &params.solver);
            if t.key != expected {
                return Err(Error::Config("interaction tables were built for a different medium, box or mesh".into()));
            }
            let (configs, residuals, solves) = select_sqs2(
                dim,
                params.master_seed,
                options.pool,
                params.m,
                t,
                options.selection,
                options.allow_minimal_residual,
            )?;
            (configs, Some(residuals), solves)
        }
        o => return Err(Error::Config(format!("selection order {o} not in {{1, 2}}"))),
    };

    let solved = par_indexed(configs.len(), |i| {
        let c = &configs[i];
        let field = realize_perturbation(p, &c.x_values, params.n)?;
        let (a, s) = counted(|| homogenized_matrix(field.field(), params.r, &params.solver));
        Ok((a?.matrix, s))
    })?;

    let mut aux_names = vec!["stream_index".to_string(), "sqs1_residual".to_string()];
    let with_sqs2 = configs.iter().all(|c| c.sqs2_residual.is_some());
    if with_sqs2 {
        aux_names.push("sqs2_residual".into());
    }
    let mut table = SampleTable::new(dim, aux_names);
    let mut solves = 0;
    for (index, (c, (value, s))) in configs.iter().zip(&solved).enumerate() {
        solves += s;
        let mut aux = vec![c.stream_index as f64, c.sqs1_residual];
        if with_sqs2 {
            aux.push(c.sqs2_residual.unwrap_or(f64::NAN));
        }
        table.rows.push(SampleRow {
            index,
            seed: c.seed,
            value: *value,
            aux,
        });
    }

    let sqs2: Vec<f64> = configs.iter().filter_map(|c| c.sqs2_residual).collect();
    let pool_residual_median = pool_residuals.map(|mut r| {
        r.sort_by(f64::total_cmp);
        let k = r.len();
        if k % 2 == 1 {
            r[k / 2]
        } else {
            0.5 * (r[k / 2 - 1] + r[k / 2])
        }
    });
    let details = SqsDetails {
        order: options.order,
        pool_size: (options.order == 2).then_some(options.pool),
        selection: (options.order == 2).then_some(options.selection),
        selection_solves,
        table_solves: tables.map_or(0, |t| t.solves),
        sqs1_residual_max_abs: configs.iter().map(|c| c.sqs1_residual.abs()).fold(0.0, f64::max),
        sqs2_residual_min: (!sqs2.is_empty()).then(|| sqs2.iter().copied().fold(f64::INFINITY, f64::min)),
        sqs2_residual_mean: (!sqs2.is_empty()).then(|| mean_and_variance(&sqs2).0),
        sqs2_residual_max: (!sqs2.is_empty()).then(|| sqs2.iter().copied().fold(0.0, f64::max)),
        pool_residual_median,
        n_ref: tables.map(|t| t.key.n_ref),
        i_infinity: tables.map(|t| t.i_infinity),
        i_infinity_error: tables.map(|t| t.i_infinity_error),
        minimal_residual_mode: configs.iter().any(|c| c.minimal_residual),
        bias_indicator: None,
    };
    let method = if options.order == 1 { Method::Sqs1 } else { Method::Sqs2 };
    let report = EstimatorReport::from_samples(method, spec, params, &table.values(), solves, Details::Sqs(details))?;
    Ok((report, table))
}

/// Stores `(mean - baseline mean) / h` on entry (1, 1) of a selection
/// report, with `h` the 95% half-width of the difference of the two means.
pub fn attach_baseline(report: &mut EstimatorReport, baseline: &EstimatorReport) -> Result<f64> {
    if !report.same_target(baseline) {
        return Err(Error::Config("baseline estimates a different quantity".into()));
    }
    let diff = report.mean.get(0, 0) - baseline.mean.get(0, 0);
    let half = Z_95 * (report.estimator_variance(0, 0) + baseline.estimator_variance(0, 0)).sqrt();
    let indicator = if half > 0.0 { diff / half } else { 0.0 };
    let Details::Sqs(details) = &mut report.details else {
        return Err(Error::Config("bias indicators apply to selection reports".into()));
    };
    details.bias_indicator = Some(indicator);
    Ok(indicator)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::rng_from_seed;

    fn iso(dim: usize, c0: f64, c1: f64, eta: f64) -> PerturbationSpec {
        PerturbationSpec::new(
            SmallMatrix::scalar(dim, c0),
            UnitCellField::constant(SmallMatrix::scalar(dim, c1)),
            eta,
            XLaw::PlusMinusOne,
        )
        .unwrap()
    }

    fn tight() -> SolverSettings {
        SolverSettings::with_tol(1e-12)
    }

    #[test]
    fn sqs1_residual_examples() {
        assert_eq!(sqs1_residual(&[1.0, -1.0, -1.0, 1.0], 2), 0.0);
        assert_eq!(sqs1_residual(&[1.0; 4], 2), 1.0);
        assert_eq!(sqs1_residual(&[1.0, 1.0, -1.0, 1.0], 2), sqs1_residual(&[-1.0, 1.0, 1.0, 1.0], 2));
    }

    #[test]
    fn balanced_sampling() {
        let mut rng = rng_from_seed(3);
        let x = sample_exact_sqs1(2, 2, &mut rng).unwrap();
        assert_eq!(x.iter().filter(|v| **v == 1.0).count(), 2);
        assert_eq!(sqs1_residual(&x, 2), 0.0);
        assert!(matches!(sample_exact_sqs1(3, 2, &mut rng), Err(Error::Config(_))));
        let (odd, minimal) = sample_sqs1(3, 2, &mut rng, true).unwrap();
        assert!(minimal);
        assert_eq!(odd.iter().sum::<f64>().abs(), 1.0);
    }

    #[test]
    fn zero_perturbation_has_trivial_terms() {
        let spec = PerturbationSpec::new(
            SmallMatrix::scalar(2, 2.0),
            UnitCellField::constant(SmallMatrix::zeros(2)),
            0.5,
            XLaw::PlusMinusOne,
        )
        .unwrap();
        let x = [1.0, -1.0, 1.0, 1.0];
        let t = expansion_terms(&spec, &x, 2, 2, &tight()).unwrap();
        assert!((t.a0 - SmallMatrix::scalar(2, 2.0)).max_abs() < 1e-12);
        assert!(t.a1.max_abs() < 1e-14 && t.a2.max_abs() < 1e-14);
        let tables = SqsTables::build(SqsKey::new(&spec, 2, 2, Some(4), &tight())).unwrap();
        assert!(tables.offsets.iter().all(|m| m.max_abs() == 0.0));
        assert_eq!(sqs2_residual(&x, &tables).unwrap(), 0.0);
    }

    #[test]
    fn first_order_term_is_the_cell_average() {
        let spec = iso(2, 1.0, 1.0, 0.5);
        let x = [1.0, 1.0, 1.0, -1.0, 1.0, -1.0, -1.0, 1.0, 1.0];
        let t = expansion_terms(&spec, &x, 3, 2, &tight()).unwrap();
        let expected = SmallMatrix::scalar(2, 3.0 / 9.0);
        assert!((t.a1 - expected).max_abs() < 1e-10, "{:?}", t.a1);
    }

    #[test]
    fn residual_symmetries() {
        let spec = iso(2, 1.0, 1.0, 0.5);
        let tables = SqsTables::build(SqsKey::new(&spec, 4, 2, Some(4), &tight())).unwrap();
        let mut rng = rng_from_seed(8);
        let x = sample_exact_sqs1(4, 2, &mut rng).unwrap();
        let base = sqs2_residual(&x, &tables).unwrap();
        let flipped: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((sqs2_residual(&flipped, &tables).unwrap() - base).abs() < 1e-14);
        let shifted: Vec<f64> = (0..16).map(|k| x[(k / 4) * 4 + (k % 4 + 1) % 4]).collect();
        assert!((sqs2_residual(&shifted, &tables).unwrap() - base).abs() < 1e-10);
    }

    #[test]
    fn selection_ordering_and_ties() {
        let spec = iso(2, 1.0, 1.0, 0.5);
        let tables = SqsTables::build(SqsKey::new(&spec, 4, 2, Some(4), &tight())).unwrap();
        let (all, residuals, _) = select_sqs2(2, 5, 6, 6, &tables, Selection::BestOfPool, false).unwrap();
        assert_eq!(all.len(), 6);
        assert!(all.windows(2).all(|w| w[0].sqs2_residual <= w[1].sqs2_residual));
        let (half, _, _) = select_sqs2(2, 5, 6, 3, &tables, Selection::BestOfPool, false).unwrap();
        let mut sorted = residuals.clone();
        sorted.sort_by(f64::total_cmp);
        let median = 0.5 * (sorted[2] + sorted[3]);
        assert!(half.last().unwrap().sqs2_residual.unwrap() <= median);
        assert!(select_sqs2(2, 5, 2, 3, &tables, Selection::BestOfPool, false).is_err());

        let zero = PerturbationSpec::new(
            SmallMatrix::identity(2),
            UnitCellField::constant(SmallMatrix::zeros(2)),
            0.5,
            XLaw::PlusMinusOne,
        )
        .unwrap();
        let flat = SqsTables::build(SqsKey::new(&zero, 4, 2, Some(4), &tight())).unwrap();
        let (first, _, _) = select_sqs2(2, 5, 6, 3, &flat, Selection::BestOfPool, false).unwrap();
        assert_eq!(first.iter().map(|c| c.stream_index).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn tolerance_mode_keeps_draw_order() {
        let spec = iso(2, 1.0, 1.0, 0.5);
        let tables = SqsTables::build(SqsKey::new(&spec, 4, 2, Some(4), &tight())).unwrap();
        let (picked, residuals, _) = select_sqs2(2, 1, 20, 2, &tables, Selection::Tolerance { tol: f64::INFINITY }, false).unwrap();
        assert_eq!(picked[0].stream_index, 0);
        assert_eq!(picked[1].stream_index, 1);
        let tight_tol = residuals.iter().copied().fold(f64::INFINITY, f64::min) * 0.5;
        assert!(select_sqs2(2, 1, 20, 2, &tables, Selection::Tolerance { tol: tight_tol }, false).is_err());
    }

    #[test]
    fn n_ref_below_n_is_rejected() {
        let spec = iso(2, 1.0, 1.0, 0.5);
        assert!(matches!(SqsTables::build(SqsKey::new(&spec, 4, 2, Some(3), &tight())), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_law_is_rejected() {
        let spec = FieldSpec::two_state(2, 1.0, 2.0, 0.5).unwrap();
        assert!(run_sqs(&spec, &RunParams::new(2, 2, 4, 1), &SqsOptions::new(1, 0)).is_err());
    }
}
