//! Monte Carlo estimation of `E[A*_N]`.
//!
//! Realization `i` draws its field from stream `i` of the master seed, so a
//! run is a pure function of its parameters. Realizations execute in
//! parallel; results are collected by index and reduced in index order.
//!
//! Cost is counted in corrector solves. Variance ratios compare the
//! variances of the estimators (sample variance over sample count), which is
//! the comparison at equal cost when both runs consumed the same number of
//! solves.

use std::io;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::antithetic::AntitheticDetails;
use crate::control_variate::CvDetails;
use crate::error::{Error, Result};
use crate::homog::{homogenized_matrix, HomogenizedMatrix, Provenance};
use crate::matrix::SmallMatrix;
use crate::pde::{solves_on_this_thread, SolverSettings};
use crate::rfield::{draw_field, FieldSpec};
use crate::sqs::SqsDetails;
use crate::stream::{rng_from_seed, Domain, Streams};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;
/// Two-sided 99% normal quantile.
pub const Z_99: f64 = 2.575_829_303_548_901;

/// Relative cost difference tolerated before a comparison is flagged.
pub const COST_MATCH_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mc,
    Antithetic,
    Cv1,
    Cv2,
    Sqs1,
    Sqs2,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Mc => "mc",
            Method::Antithetic => "antithetic",
            Method::Cv1 => "cv1",
            Method::Cv2 => "cv2",
            Method::Sqs1 => "sqs1",
            Method::Sqs2 => "sqs2",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Box, mesh, sample count, seed and solver settings of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunParams {
    pub n: usize,
    pub r: usize,
    /// Estimator samples (pairs for the antithetic estimator).
    pub m: usize,
    pub master_seed: u64,
    pub solver: SolverSettings,
}

impl RunParams {
    pub fn new(n: usize, r: usize, m: usize, master_seed: u64) -> Self {
        Self {
            n,
            r,
            m,
            master_seed,
            solver: SolverSettings::default(),
        }
    }

    pub fn with_solver(mut self, solver: SolverSettings) -> Self {
        self.solver = solver;
        self
    }

    pub fn validate(&self, spec: &FieldSpec) -> Result<()> {
        spec.validate()?;
        if self.n == 0 {
            return Err(Error::Config("N must be at least 1".into()));
        }
        if self.r == 0 || self.r % spec.sub() != 0 {
            return Err(Error::Config(format!(
                "resolution r = {} must be a positive multiple of the coefficient sub-grid {}",
                self.r,
                spec.sub()
            )));
        }
        if self.m < 2 {
            return Err(Error::Config(format!("M = {} but at least 2 samples are needed", self.m)));
        }
        if !(self.solver.tol > 0.0 && self.solver.tol < 1.0) {
            return Err(Error::Config(format!("solver tolerance {} outside (0, 1)", self.solver.tol)));
        }
        Ok(())
    }
}

/// Mean and unbiased (`1/(M-1)`) variance.
pub fn mean_and_variance(values: &[f64]) -> (f64, f64) {
    let m = values.len();
    if m == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / m as f64;
    if m == 1 {
        return (mean, f64::NAN);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, ss / (m - 1) as f64)
}

pub fn ci_half_width(variance: f64, m: usize) -> f64 {
    Z_95 * (variance / m as f64).sqrt()
}

/// `mean ∓ 1.96 sqrt(variance / M)`.
pub fn confidence_interval(mean: f64, variance: f64, m: usize) -> (f64, f64) {
    let h = ci_half_width(variance, m);
    (mean - h, mean + h)
}

/// Entrywise sample statistics of matrix-valued samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleStats {
    pub mean: SmallMatrix,
    pub variance: SmallMatrix,
    pub ci_half_width: SmallMatrix,
}

pub fn sample_stats(samples: &[SmallMatrix]) -> Result<SampleStats> {
    let Some(first) = samples.first() else {
        return Err(Error::Config("no samples".into()));
    };
    let dim = first.dim();
    let m = samples.len();
    let mut mean = SmallMatrix::zeros(dim);
    let mut variance = SmallMatrix::zeros(dim);
    let mut half = SmallMatrix::zeros(dim);
    let mut column = Vec::with_capacity(m);
    for i in 0..dim {
        for j in 0..dim {
            column.clear();
            column.extend(samples.iter().map(|s| s.get(i, j)));
            let (mu, var) = mean_and_variance(&column);
            mean.set(i, j, mu);
            variance.set(i, j, var);
            half.set(i, j, ci_half_width(var, m));
        }
    }
    Ok(SampleStats {
        mean,
        variance,
        ci_half_width: half,
    })
}

/// Method-specific diagnostics carried by a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Details {
    Plain,
    Antithetic(AntitheticDetails),
    ControlVariate(CvDetails),
    Sqs(SqsDetails),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub method: Method,
    #[serde(rename = "N")]
    pub n: usize,
    pub r: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub mean: SmallMatrix,
    pub variance: SmallMatrix,
    pub ci_half_width: SmallMatrix,
    pub corrector_solves: u64,
    pub master_seed: u64,
    /// The field law whose `E[A*_N]` is estimated.
    pub target: FieldSpec,
    pub details: Details,
}

impl EstimatorReport {
    pub fn from_samples(
        method: Method,
        spec: &FieldSpec,
        params: &RunParams,
        samples: &[SmallMatrix],
        corrector_solves: u64,
        details: Details,
    ) -> Result<Self> {
        let stats = sample_stats(samples)?;
        Ok(Self {
            method,
            n: params.n,
            r: params.r,
            m: samples.len(),
            mean: stats.mean,
            variance: stats.variance,
            ci_half_width: stats.ci_half_width,
            corrector_solves,
            master_seed: params.master_seed,
            target: spec.clone(),
            details,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.dim()
    }

    pub fn estimate(&self) -> HomogenizedMatrix {
        HomogenizedMatrix::new(self.mean, Provenance::Estimated)
    }

    /// Variance of the estimator (the mean), entry `(i, j)`.
    pub fn estimator_variance(&self, i: usize, j: usize) -> f64 {
        self.variance.get(i, j) / self.m as f64
    }

    pub fn confidence_interval(&self, i: usize, j: usize) -> (f64, f64) {
        confidence_interval(self.mean.get(i, j), self.variance.get(i, j), self.m)
    }

    /// Whether `(i, j)` of both reports estimate the same quantity.
    pub fn same_target(&self, other: &EstimatorReport) -> bool {
        self.n == other.n && self.r == other.r && self.target == other.target
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRatio {
    pub entry: [usize; 2],
    /// Baseline estimator variance over reduced estimator variance.
    pub ratio: f64,
    /// Reduced-run solves over baseline-run solves.
    pub cost_ratio: f64,
    pub cost_matched: bool,
    pub warning: Option<String>,
}

fn cost_check(baseline_solves: u64, reduced_solves: u64) -> (f64, bool, Option<String>) {
    let cost_ratio = reduced_solves as f64 / baseline_solves as f64;
    let matched = (cost_ratio - 1.0).abs() <= COST_MATCH_TOLERANCE;
    let warning = (!matched).then(|| {
        format!(
            "cost mismatch: {reduced_solves} corrector solves against {baseline_solves} (ratio {cost_ratio:.3})"
        )
    });
    (cost_ratio, matched, warning)
}

/// Ratio of estimator variances on entry `(i, j)` (0-based). A cost mismatch
/// beyond 5% is reported in the result, not raised.
pub fn variance_ratio(baseline: &EstimatorReport, reduced: &EstimatorReport, entry: [usize; 2]) -> Result<VarianceRatio> {
    if !baseline.same_target(reduced) {
        return Err(Error::Config(format!(
            "reports estimate different targets (N {} vs {}, r {} vs {}, or different laws)",
            baseline.n, reduced.n, baseline.r, reduced.r
        )));
    }
    let d = baseline.dim();
    if entry[0] >= d || entry[1] >= d {
        return Err(Error::Config(format!("entry {entry:?} out of range for dimension {d}")));
    }
    let [i, j] = entry;
    let ratio = baseline.estimator_variance(i, j) / reduced.estimator_variance(i, j);
    let (cost_ratio, cost_matched, warning) = cost_check(baseline.corrector_solves, reduced.corrector_solves);
    Ok(VarianceRatio {
        entry,
        ratio,
        cost_ratio,
        cost_matched,
        warning,
    })
}

/// The same ratio recomputed from the per-sample values.
pub fn variance_ratio_from_tables(baseline: &SampleTable, reduced: &SampleTable, entry: [usize; 2]) -> Result<f64> {
    let var = |t: &SampleTable| -> Result<f64> {
        let column = t.entry_column(entry)?;
        let (_, v) = mean_and_variance(&column);
        Ok(v / column.len() as f64)
    };
    Ok(var(baseline)? / var(reduced)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub index: usize,
    /// Seed of the stream that produced this sample.
    pub seed: u64,
    /// The estimator sample (what the reported mean averages).
    pub value: SmallMatrix,
    pub aux: Vec<f64>,
}

/// Per-sample record of a run, in index order.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTable {
    pub dim: usize,
    pub aux_names: Vec<String>,
    pub rows: Vec<SampleRow>,
}

fn entry_names(dim: usize) -> Vec<String> {
    let mut out = Vec::new();
    for i in 1..=dim {
        for j in 1..=dim {
            out.push(format!("entry_{i}{j}"));
        }
    }
    out
}

/// Column names `prefix_11, prefix_12, ...` for a matrix-valued aux field.
pub fn matrix_columns(prefix: &str, dim: usize) -> Vec<String> {
    entry_names(dim)
        .into_iter()
        .map(|n| n.replacen("entry", prefix, 1))
        .collect()
}

impl SampleTable {
    pub fn new(dim: usize, aux_names: Vec<String>) -> Self {
        Self {
            dim,
            aux_names,
            rows: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn values(&self) -> Vec<SmallMatrix> {
        self.rows.iter().map(|r| r.value).collect()
    }

    pub fn entry_column(&self, entry: [usize; 2]) -> Result<Vec<f64>> {
        if entry[0] >= self.dim || entry[1] >= self.dim {
            return Err(Error::Config(format!("entry {entry:?} out of range for dimension {}", self.dim)));
        }
        Ok(self.rows.iter().map(|r| r.value.get(entry[0], entry[1])).collect())
    }

    pub fn aux_column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.aux_names.iter().position(|n| n == name)?;
        Some(self.rows.iter().map(|r| r.aux[k]).collect())
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["index".to_string(), "seed".to_string()];
        h.extend(entry_names(self.dim));
        h.extend(self.aux_names.iter().cloned());
        h
    }

    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.header())?;
        for row in &self.rows {
            let mut rec = vec![row.index.to_string(), row.seed.to_string()];
            rec.extend(row.value.to_vec().iter().map(|v| v.to_string()));
            rec.extend(row.aux.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv<R: io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let entries = header.iter().filter(|h| h.starts_with("entry_")).count();
        let dim = match entries {
            1 => 1,
            4 => 2,
            _ => return Err(Error::Config(format!("sample table has {entries} entry columns"))),
        };
        let aux_names = header[2 + entries..].to_vec();
        let mut table = SampleTable::new(dim, aux_names);
        for rec in rdr.records() {
            let rec = rec?;
            let num = |k: usize| -> Result<f64> {
                rec[k]
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("column {}: {e}", header[k])))
            };
            let index = rec[0]
                .parse()
                .map_err(|e| Error::Config(format!("index: {e}")))?;
            let seed = rec[1].parse().map_err(|e| Error::Config(format!("seed: {e}")))?;
            let vals: Vec<f64> = (2..2 + entries).map(num).collect::<Result<_>>()?;
            let aux: Vec<f64> = (2 + entries..rec.len()).map(num).collect::<Result<_>>()?;
            table.rows.push(SampleRow {
                index,
                seed,
                value: SmallMatrix::from_entries(dim, &vals),
                aux,
            });
        }
        Ok(table)
    }
}

/// Runs `f` and returns its result with the number of periodic solves it
/// performed on this thread.
pub(crate) fn counted<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = solves_on_this_thread();
    let out = f();
    (out, solves_on_this_thread() - before)
}

/// Maps `0..count` in parallel, collecting by index. The first failing index
/// is reported.
pub(crate) fn par_indexed<T: Send>(count: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let results: Vec<Result<T>> = (0..count).into_par_iter().map(&f).collect();
    results
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| e.at_realization(i)))
        .collect()
}

/// One plain realization: stream seed, `A*_N` and solves consumed.
pub(crate) fn plain_sample(spec: &FieldSpec, params: &RunParams, index: usize) -> Result<(u64, SmallMatrix, u64)> {
    let seed = Streams::new(params.master_seed).seed(Domain::Field, index as u64);
    let mut rng = rng_from_seed(seed);
    let realization = draw_field(spec, params.n, &mut rng)?;
    let (a, solves) = counted(|| homogenized_matrix(realization.field(), params.r, &params.solver));
    Ok((seed, a?.matrix, solves))
}

/// Plain Monte Carlo over `M` independent realizations.
pub fn run_mc(spec: &FieldSpec, params: &RunParams) -> Result<(EstimatorReport, SampleTable)> {
    params.validate(spec)?;
    let samples = par_indexed(params.m, |i| plain_sample(spec, params, i))?;
    let mut table = SampleTable::new(spec.dim, Vec::new());
    let mut solves = 0;
    for (index, (seed, value, s)) in samples.into_iter().enumerate() {
        solves += s;
        table.rows.push(SampleRow {
            index,
            seed,
            value,
            aux: Vec::new(),
        });
    }
    let report = EstimatorReport::from_samples(Method::Mc, spec, params, &table.values(), solves, Details::Plain)?;
    Ok((report, table))
}
