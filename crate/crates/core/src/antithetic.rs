//! Antithetic variables.
//!
//! Pair `m` draws `A^m` from stream `m` and derives `B^m = T(A^m)` from the
//! same latent uniforms. The estimator sample is the pair average
//! `(A*_N(A^m) + A*_N(B^m)) / 2`, which has the law-level mean of `A*_N`
//! because `B^m` has the law of `A^m`. One pair costs two corrector problems,
//! so `M` pairs match plain Monte Carlo with `2M` samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homog::{homogenized_matrix, HomogenizedMatrix, Provenance};
use crate::matrix::SmallMatrix;
use crate::mc::{counted, matrix_columns, par_indexed, sample_stats, Details, EstimatorReport, Method, RunParams, SampleRow, SampleTable};
use crate::rfield::{antithetic_of, draw_field, FieldSpec};
use crate::stream::{rng_from_seed, Domain, Streams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AntitheticSample {
    pub index: usize,
    pub a: HomogenizedMatrix,
    pub b: HomogenizedMatrix,
    pub average: HomogenizedMatrix,
}

/// Statistics of the two members of each pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AntitheticDetails {
    pub a_mean: SmallMatrix,
    pub a_variance: SmallMatrix,
    pub b_mean: SmallMatrix,
    pub b_variance: SmallMatrix,
    /// Empirical correlation between `A*_N(A^m)` and `A*_N(B^m)`, per entry.
    pub pair_correlation: SmallMatrix,
}

/// Entrywise mean of two homogenized matrices.
pub fn pair_average(a: &HomogenizedMatrix, b: &HomogenizedMatrix) -> Result<HomogenizedMatrix> {
    if a.dim() != b.dim() {
        return Err(Error::Config(format!(
            "cannot average a {}x{} and a {}x{} matrix",
            a.dim(),
            a.dim(),
            b.dim(),
            b.dim()
        )));
    }
    let provenance = if a.provenance == b.provenance {
        a.provenance
    } else {
        Provenance::Estimated
    };
    Ok(HomogenizedMatrix::new((a.matrix + b.matrix) * 0.5, provenance))
}

/// Draws and solves pair `index`; returns the sample, its stream seed and
/// the solves consumed.
pub fn antithetic_sample(spec: &FieldSpec, params: &RunParams, index: usize) -> Result<(AntitheticSample, u64, u64)> {
    let seed = Streams::new(params.master_seed).seed(Domain::Field, index as u64);
    let mut rng = rng_from_seed(seed);
    let a_field = draw_field(spec, params.n, &mut rng)?;
    let b_field = antithetic_of(&a_field)?;
    let (pair, solves) = counted(|| -> Result<_> {
        let a = homogenized_matrix(a_field.field(), params.r, &params.solver)?.with_seed(seed);
        let b = homogenized_matrix(b_field.field(), params.r, &params.solver)?.with_seed(seed);
        Ok((a, b))
    });
    let (a, b) = pair?;
    let average = pair_average(&a, &b)?;
    Ok((AntitheticSample { index, a, b, average }, seed, solves))
}

fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// `params.m` antithetic pairs.
pub fn run_antithetic(spec: &FieldSpec, params: &RunParams) -> Result<(EstimatorReport, SampleTable)> {
    params.validate(spec)?;
    let dim = spec.dim;
    let pairs = par_indexed(params.m, |i| antithetic_sample(spec, params, i))?;

    let mut aux_names = matrix_columns("a", dim);
    aux_names.extend(matrix_columns("b", dim));
    let mut table = SampleTable::new(dim, aux_names);
    let mut solves = 0;
    let mut a_values = Vec::with_capacity(pairs.len());
    let mut b_values = Vec::with_capacity(pairs.len());
    for (sample, seed, s) in pairs {
        solves += s;
        let mut aux = sample.a.matrix.to_vec();
        aux.extend(sample.b.matrix.to_vec());
        a_values.push(sample.a.matrix);
        b_values.push(sample.b.matrix);
        table.rows.push(SampleRow {
            index: sample.index,
            seed,
            value: sample.average.matrix,
            aux,
        });
    }

    let a_stats = sample_stats(&a_values)?;
    let b_stats = sample_stats(&b_values)?;
    let mut rho = SmallMatrix::zeros(dim);
    for i in 0..dim {
        for j in 0..dim {
            let x: Vec<f64> = a_values.iter().map(|m| m.get(i, j)).collect();
            let y: Vec<f64> = b_values.iter().map(|m| m.get(i, j)).collect();
            rho.set(i, j, correlation(&x, &y));
        }
    }
    let details = AntitheticDetails {
        a_mean: a_stats.mean,
        a_variance: a_stats.variance,
        b_mean: b_stats.mean,
        b_variance: b_stats.variance,
        pair_correlation: rho,
    };
    let report = EstimatorReport::from_samples(
        Method::Antithetic,
        spec,
        params,
        &table.values(),
        solves,
        Details::Antithetic(details),
    )?;
    Ok((report, table))
}
