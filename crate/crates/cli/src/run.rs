//! Dispatch from a resolved experiment to the estimators, and the files a
//! run leaves behind.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use hvr_core::control_variate::{run_cv_with_table, CvOptions, DefectCoefficients, DefectKey, RhoMode};
use hvr_core::mc::VarianceRatio;
use hvr_core::rfield::Law;
use hvr_core::sqs::{attach_baseline, run_sqs_with_tables, SqsKey};
use hvr_core::{run_antithetic, run_mc, variance_ratio, EstimatorReport, SampleTable, SqsOptions, SqsTables};
use serde::Serialize;
use serde_json::Value;

use crate::config::{Baseline, Experiment, ExperimentConfig, MethodName};
use crate::oracle::{self, OracleCheck};

pub const REPORT_FILE: &str = "report.json";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const TIMING_FILE: &str = "timing.json";
pub const ORACLE_FILE: &str = "oracle.json";

/// Run facts that vary between otherwise identical runs.
#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub wall_seconds: f64,
    pub threads: usize,
    /// Table solves actually performed; zero when every table came from the cache.
    pub table_solves_this_run: u64,
}

#[derive(Debug)]
pub enum Outcome {
    Estimate {
        report: EstimatorReport,
        table: SampleTable,
        baseline: Option<VarianceRatio>,
    },
    Oracle {
        checks: Vec<OracleCheck>,
    },
}

#[derive(Debug)]
pub struct RunResult {
    pub experiment: Experiment,
    pub outcome: Outcome,
    pub timing: Timing,
}

impl RunResult {
    pub fn passed(&self) -> bool {
        match &self.outcome {
            Outcome::Estimate { .. } => true,
            Outcome::Oracle { checks } => checks.iter().all(|c| c.passed),
        }
    }

    /// The contents of `report.json` (or `oracle.json`).
    pub fn report_json(&self) -> anyhow::Result<String> {
        let mut value = match &self.outcome {
            Outcome::Estimate { report, baseline, .. } => {
                let mut v = serde_json::to_value(report)?;
                if let Some(b) = baseline {
                    object(&mut v)?.insert("baseline_comparison".into(), serde_json::to_value(b)?);
                }
                v
            }
            Outcome::Oracle { checks } => serde_json::json!({
                "checks": checks,
                "passed": checks.iter().all(|c| c.passed),
            }),
        };
        object(&mut value)?.insert("config".into(), serde_json::to_value(&self.experiment.echo)?);
        Ok(serde_json::to_string_pretty(&value)? + "\n")
    }

    pub fn samples_csv(&self) -> anyhow::Result<Option<String>> {
        let Outcome::Estimate { table, .. } = &self.outcome else {
            return Ok(None);
        };
        let mut bytes = Vec::new();
        table.write_csv(&mut bytes)?;
        Ok(Some(String::from_utf8(bytes)?))
    }

    pub fn summary(&self) -> String {
        match &self.outcome {
            Outcome::Oracle { checks } => {
                let passed = checks.iter().filter(|c| c.passed).count();
                format!("oracle: {passed}/{} checks passed", checks.len())
            }
            Outcome::Estimate { report, baseline, .. } => {
                let mut line = format!(
                    "{} N={} r={} M={}: A11 = {:.6} ± {:.2e} (95% CI), {} corrector solves",
                    report.method,
                    report.n,
                    report.r,
                    report.m,
                    report.mean.get(0, 0),
                    report.ci_half_width.get(0, 0),
                    report.corrector_solves
                );
                if let Some(b) = baseline {
                    line += &format!(", variance ratio vs baseline {:.2} (cost ratio {:.2})", b.ratio, b.cost_ratio);
                }
                line
            }
        }
    }

    /// Writes the report, the samples and the timing file into `dir`.
    pub fn write(&self, dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut written = Vec::new();
        let name = match self.outcome {
            Outcome::Estimate { .. } => REPORT_FILE,
            Outcome::Oracle { .. } => ORACLE_FILE,
        };
        let mut put = |file: &str, text: String| -> anyhow::Result<()> {
            let path = dir.join(file);
            std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            written.push(path);
            Ok(())
        };
        put(name, self.report_json()?)?;
        if let Some(csv) = self.samples_csv()? {
            put(SAMPLES_FILE, csv)?;
        }
        put(TIMING_FILE, serde_json::to_string_pretty(&self.timing)? + "\n")?;
        Ok(written)
    }
}

fn object(v: &mut Value) -> anyhow::Result<&mut serde_json::Map<String, Value>> {
    v.as_object_mut().context("report is not a JSON object")
}

/// Reads an estimator report, ignoring the echoed configuration.
pub fn read_report(path: &Path) -> anyhow::Result<EstimatorReport> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(map) = value.as_object_mut() {
        map.remove("config");
        map.remove("baseline_comparison");
    }
    serde_json::from_value(value).with_context(|| format!("{} is not an estimator report", path.display()))
}

/// Resolves and runs a configuration, on a pool of `threads` workers when given.
pub fn run_config(config: &ExperimentConfig, threads: Option<usize>) -> anyhow::Result<RunResult> {
    let experiment = config.resolve()?;
    match threads {
        Some(k) => {
            if k == 0 {
                bail!("thread count must be at least 1");
            }
            let pool = rayon::ThreadPoolBuilder::new().num_threads(k).build()?;
            pool.install(|| execute(experiment))
        }
        None => execute(experiment),
    }
}

pub fn execute(experiment: Experiment) -> anyhow::Result<RunResult> {
    let start = Instant::now();
    let mut table_solves = 0;
    let outcome = match experiment.method {
        MethodName::Oracle => Outcome::Oracle {
            checks: oracle::suite()?,
        },
        method => {
            let (mut report, table) = estimate(&experiment, method, &mut table_solves)?;
            let baseline = compare_baseline(&experiment, &mut report)?;
            Outcome::Estimate {
                report,
                table,
                baseline,
            }
        }
    };
    let timing = Timing {
        wall_seconds: start.elapsed().as_secs_f64(),
        threads: rayon::current_num_threads(),
        table_solves_this_run: table_solves,
    };
    Ok(RunResult {
        experiment,
        outcome,
        timing,
    })
}

fn estimate(
    experiment: &Experiment,
    method: MethodName,
    table_solves: &mut u64,
) -> anyhow::Result<(EstimatorReport, SampleTable)> {
    let spec = experiment.spec.as_ref().context("estimator run without a field law")?;
    let params = experiment.params.as_ref().context("estimator run without run parameters")?;
    let cache = |file: &str| experiment.cache_dir.as_ref().map(|d| d.join(file));
    Ok(match method {
        MethodName::Mc => run_mc(spec, params)?,
        MethodName::Antithetic => run_antithetic(spec, params)?,
        MethodName::Cv1 | MethodName::Cv2 => {
            let Law::Perturbation(p) = &spec.law else {
                bail!("control variates need the perturbation law");
            };
            let options = CvOptions {
                order: if method == MethodName::Cv1 { 1 } else { 2 },
                rho_mode: experiment.rho_mode.clone().unwrap_or(RhoMode::SameSample),
                cutoff: experiment.cutoff,
            };
            let key = DefectKey::from_spec(p, params.n, params.r, &params.solver);
            let cutoff = options.cutoff_for(params.n);
            let defects = match cache("defect_table.json") {
                Some(path) => DefectCoefficients::load_or_build(&path, key, cutoff, &params.solver)?,
                None => DefectCoefficients::build(key, cutoff, &params.solver, None)?,
            };
            *table_solves += defects.fresh_solves;
            run_cv_with_table(spec, params, &options, &defects)?
        }
        MethodName::Sqs1 | MethodName::Sqs2 => {
            let order = if method == MethodName::Sqs1 { 1 } else { 2 };
            let options = SqsOptions {
                order,
                pool: experiment.pool,
                selection: experiment.selection,
                n_ref: experiment.n_ref,
                allow_minimal_residual: experiment.allow_minimal_residual,
            };
            let tables = if order == 2 {
                let Law::Perturbation(p) = &spec.law else {
                    bail!("selection needs the perturbation law");
                };
                let key = SqsKey::new(p, params.n, params.r, experiment.n_ref, &params.solver);
                let t = match cache("sqs_tables.json") {
                    Some(path) => SqsTables::load_or_build(&path, key)?,
                    None => SqsTables::build(key)?,
                };
                if !t.cached {
                    *table_solves += t.solves;
                }
                Some(t)
            } else {
                None
            };
            run_sqs_with_tables(spec, params, &options, tables.as_ref())?
        }
        MethodName::Oracle => unreachable!("the oracle suite is not an estimator"),
    })
}

fn compare_baseline(experiment: &Experiment, report: &mut EstimatorReport) -> anyhow::Result<Option<VarianceRatio>> {
    let baseline = match &experiment.baseline {
        Baseline::None => return Ok(None),
        Baseline::Report(path) => read_report(path)?,
        Baseline::Auto => {
            let spec = experiment.spec.as_ref().context("estimator run without a field law")?;
            let mut params = experiment.params.context("estimator run without run parameters")?;
            // Same number of corrector solves as the run being assessed.
            params.m = (report.corrector_solves as usize / spec.dim).max(2);
            run_mc(spec, &params)?.0
        }
    };
    if matches!(experiment.method, MethodName::Sqs1 | MethodName::Sqs2) {
        attach_baseline(report, &baseline)?;
    }
    Ok(Some(variance_ratio(&baseline, report, [0, 0])?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(text: &str) -> ExperimentConfig {
        ExperimentConfig::from_json(text).unwrap()
    }

    #[test]
    fn plain_run_has_one_row_per_sample() {
        let result = run_config(&config(r#"{"method": "mc", "N": 3, "r": 2, "M": 12}"#), Some(2)).unwrap();
        let csv = result.samples_csv().unwrap().unwrap();
        assert_eq!(csv.lines().count(), 13);
        assert!(result.summary().starts_with("mc N=3 r=2 M=12"));
    }

    #[test]
    fn echoed_config_reproduces_the_report() {
        let first = run_config(&config(r#"{"method": "cv2", "N": 3, "r": 2, "M": 10, "baseline": "auto"}"#), None).unwrap();
        let json = first.report_json().unwrap();
        let echoed: Value = serde_json::from_str(&json).unwrap();
        let again: ExperimentConfig = serde_json::from_value(echoed["config"].clone()).unwrap();
        let second = run_config(&again, Some(1)).unwrap();
        assert_eq!(json, second.report_json().unwrap());
        assert_eq!(first.samples_csv().unwrap(), second.samples_csv().unwrap());
    }

    #[test]
    fn selection_runs_carry_a_bias_indicator() {
        let result = run_config(&config(r#"{"method": "sqs2", "N": 4, "r": 2, "M": 4, "pool": 16}"#), None).unwrap();
        let json: Value = serde_json::from_str(&result.report_json().unwrap()).unwrap();
        assert!(json["details"]["bias_indicator"].is_f64());
        assert!(json["baseline_comparison"]["ratio"].is_f64());
    }

    #[test]
    fn cached_tables_do_not_change_the_report() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            r#"{{"method": "cv2", "N": 3, "r": 2, "M": 6, "cache_dir": {:?}}}"#,
            dir.path().to_str().unwrap()
        );
        let first = run_config(&config(&text), None).unwrap();
        let second = run_config(&config(&text), None).unwrap();
        assert!(first.timing.table_solves_this_run > 0);
        assert_eq!(second.timing.table_solves_this_run, 0);
        assert_eq!(first.report_json().unwrap(), second.report_json().unwrap());
    }
}
