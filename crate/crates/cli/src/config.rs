//! Experiment configuration: a flat JSON object, validated and resolved
//! before any solve.
//!
//! Absent fields take a method-dependent default. Every field filled in
//! this way is listed under `defaulted` in the resolved configuration, which
//! is what a report echoes. Parsing an echoed configuration resolves to the
//! same value, so a report can be reproduced from its own `config`.
//!
//! `output` and `cache_dir` say where files go, not what is computed. They
//! are neither echoed nor defaulted.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;

use hvr_core::control_variate::RhoMode;
use hvr_core::{FieldSpec, PerturbationSpec, RunParams, Selection, SmallMatrix, SolverSettings, UnitCellField, XLaw};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

pub const DEFAULT_SEED: u64 = 20_240_601;
pub const DEFAULT_OUTPUT: &str = "hvr-out";

/// A validation failure, located by the config key it concerns.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config.{}: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Mc,
    Antithetic,
    Cv1,
    Cv2,
    Sqs1,
    Sqs2,
    Oracle,
}

impl MethodName {
    fn is_cv(self) -> bool {
        matches!(self, MethodName::Cv1 | MethodName::Cv2)
    }

    fn is_sqs(self) -> bool {
        matches!(self, MethodName::Sqs1 | MethodName::Sqs2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawName {
    TwoState,
    Perturbation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XLawName {
    Bernoulli01,
    Pm1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoModeName {
    SameSample,
    Pilot,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionName {
    BestOfPool,
    Tolerance,
}

/// A scalar (times the identity), a matrix given by rows, or for `C1` a
/// list of sub-cell matrices in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixInput {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
    Cells(Vec<Vec<Vec<f64>>>),
}

impl MatrixInput {
    fn matrix(rows: &[Vec<f64>], dim: usize, field: &str) -> Result<SmallMatrix, ConfigError> {
        if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
            return Err(ConfigError::new(field, format!("expected a {dim}x{dim} matrix")));
        }
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        SmallMatrix::from_rows(&refs).map_err(|e| ConfigError::new(field, e.to_string()))
    }

    fn constant(&self, dim: usize, field: &str) -> Result<SmallMatrix, ConfigError> {
        match self {
            MatrixInput::Scalar(c) => Ok(SmallMatrix::scalar(dim, *c)),
            MatrixInput::Rows(rows) => Self::matrix(rows, dim, field),
            MatrixInput::Cells(_) => Err(ConfigError::new(field, "expected a scalar or a single matrix")),
        }
    }

    fn unit_cell(&self, dim: usize, field: &str) -> Result<UnitCellField, ConfigError> {
        let MatrixInput::Cells(cells) = self else {
            return Ok(UnitCellField::constant(self.constant(dim, field)?));
        };
        let count = cells.len();
        let sub = (1..=count).find(|s| s.pow(dim as u32) == count).ok_or_else(|| {
            ConfigError::new(field, format!("{count} sub-cell matrices do not fill a square grid"))
        })?;
        let values = cells
            .iter()
            .enumerate()
            .map(|(k, rows)| Self::matrix(rows, dim, &format!("{field}[{k}]")))
            .collect::<Result<Vec<_>, _>>()?;
        UnitCellField::new(dim, sub, values).map_err(|e| ConfigError::new(field, e.to_string()))
    }
}

/// The configuration file, as written by a user or echoed by a report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schema_version: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<MethodName>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dimension: Option<usize>,
    #[serde(rename = "N", skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<usize>,
    #[serde(rename = "M", skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub law: Option<LawName>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(rename = "C0", skip_serializing_if = "Option::is_none")]
    pub c0: Option<MatrixInput>,
    #[serde(rename = "C1", skip_serializing_if = "Option::is_none")]
    pub c1: Option<MatrixInput>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_law: Option<XLawName>,
    #[serde(rename = "eta_B", skip_serializing_if = "Option::is_none")]
    pub eta_b: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub master_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solver_tol: Option<f64>,
    #[serde(rename = "N_ref", skip_serializing_if = "Option::is_none")]
    pub n_ref: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_mode: Option<RhoModeName>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pilot_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionName>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sqs2_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub allow_minimal_residual: Option<bool>,
    /// `"auto"` runs a plain Monte Carlo baseline on the same target,
    /// `"none"` skips it, anything else is a path to a baseline report.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub defaulted: Option<Vec<String>>,
}

/// A fully resolved experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub method: MethodName,
    /// The configuration with defaults filled in, as echoed in reports.
    pub echo: ExperimentConfig,
    pub spec: Option<FieldSpec>,
    pub params: Option<RunParams>,
    pub rho_mode: Option<RhoMode>,
    pub cutoff: Option<f64>,
    pub pool: usize,
    pub n_ref: Option<usize>,
    pub selection: Selection,
    pub allow_minimal_residual: bool,
    pub baseline: Baseline,
    pub output: PathBuf,
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Baseline {
    None,
    Auto,
    Report(PathBuf),
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::new("<root>", e.to_string()))
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("<root>", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Fills defaults and validates every field.
    pub fn resolve(&self) -> Result<Experiment, ConfigError> {
        Resolver::new(self).run()
    }
}

struct Resolver<'a> {
    input: &'a ExperimentConfig,
    echo: ExperimentConfig,
    defaulted: BTreeSet<String>,
}

fn positive(field: &str, v: usize) -> Result<usize, ConfigError> {
    if v == 0 {
        return Err(ConfigError::new(field, "must be at least 1"));
    }
    Ok(v)
}

fn unused(field: &str, present: bool, reason: &str) -> Result<(), ConfigError> {
    if present {
        return Err(ConfigError::new(field, format!("not used {reason}")));
    }
    Ok(())
}

impl<'a> Resolver<'a> {
    fn new(input: &'a ExperimentConfig) -> Self {
        let defaulted = input.defaulted.iter().flatten().cloned().collect();
        Self {
            input,
            echo: ExperimentConfig::default(),
            defaulted,
        }
    }

    fn or_default<T: Clone>(&mut self, name: &str, given: &Option<T>, default: T) -> T {
        match given {
            Some(v) => v.clone(),
            None => {
                self.defaulted.insert(name.to_string());
                default
            }
        }
    }

    fn required<T: Clone>(&self, name: &str, given: &Option<T>) -> Result<T, ConfigError> {
        given.clone().ok_or_else(|| ConfigError::new(name, "required for this method"))
    }

    fn run(mut self) -> Result<Experiment, ConfigError> {
        let input = self.input;
        let version = self.or_default("schema_version", &input.schema_version, SCHEMA_VERSION);
        if version != SCHEMA_VERSION {
            return Err(ConfigError::new(
                "schema_version",
                format!("version {version} is not supported (expected {SCHEMA_VERSION})"),
            ));
        }
        self.echo.schema_version = Some(version);
        let method = input.method.ok_or_else(|| ConfigError::new("method", "required"))?;
        self.echo.method = Some(method);
        let output = input.output.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT));
        let cache_dir = input.cache_dir.clone();

        let mut experiment = Experiment {
            method,
            echo: ExperimentConfig::default(),
            spec: None,
            params: None,
            rho_mode: None,
            cutoff: None,
            pool: 0,
            n_ref: None,
            selection: Selection::BestOfPool,
            allow_minimal_residual: false,
            baseline: Baseline::None,
            output,
            cache_dir,
        };
        if method == MethodName::Oracle {
            self.reject_estimator_fields()?;
        } else {
            self.estimator(method, &mut experiment)?;
        }
        if !self.defaulted.is_empty() {
            self.echo.defaulted = Some(self.defaulted.iter().cloned().collect());
        }
        experiment.echo = self.echo;
        Ok(experiment)
    }

    fn reject_estimator_fields(&self) -> Result<(), ConfigError> {
        let probe = ExperimentConfig {
            schema_version: None,
            method: None,
            output: None,
            cache_dir: None,
            defaulted: None,
            ..self.input.clone()
        };
        let set = serde_json::to_value(&probe).map_err(|e| ConfigError::new("<root>", e.to_string()))?;
        if let Some(key) = set.as_object().and_then(|o| o.keys().next()) {
            return Err(ConfigError::new(key, "not used by the oracle suite"));
        }
        Ok(())
    }

    fn estimator(&mut self, method: MethodName, out: &mut Experiment) -> Result<(), ConfigError> {
        let input = self.input;
        let dim = self.or_default("dimension", &input.dimension, 2);
        if !(1..=2).contains(&dim) {
            return Err(ConfigError::new("dimension", format!("{dim} not in {{1, 2}}")));
        }
        let n = positive("N", self.required("N", &input.n)?)?;
        let m = self.required("M", &input.m)?;
        if m < 2 {
            return Err(ConfigError::new("M", "at least 2 samples are needed"));
        }
        let r = positive("r", self.or_default("r", &input.r, 8))?;
        let seed = self.or_default("master_seed", &input.master_seed, DEFAULT_SEED);
        let tol = self.or_default("solver_tol", &input.solver_tol, SolverSettings::default().tol);
        if !(tol > 0.0 && tol < 1.0) {
            return Err(ConfigError::new("solver_tol", format!("{tol} outside (0, 1)")));
        }
        self.echo.dimension = Some(dim);
        self.echo.n = Some(n);
        self.echo.m = Some(m);
        self.echo.r = Some(r);
        self.echo.master_seed = Some(seed);
        self.echo.solver_tol = Some(tol);

        let spec = self.field_spec(method, dim)?;
        if r % spec.sub() != 0 {
            return Err(ConfigError::new(
                "r",
                format!("must be a multiple of the C1 sub-grid {}", spec.sub()),
            ));
        }
        let params = RunParams::new(n, r, m, seed).with_solver(SolverSettings::with_tol(tol));
        params.validate(&spec).map_err(|e| ConfigError::new("<law>", e.to_string()))?;

        self.cv_fields(method, n, m, out)?;
        self.sqs_fields(method, n, m, out)?;

        let default_baseline = if method.is_sqs() { "auto" } else { "none" };
        let baseline = self.or_default("baseline", &input.baseline, default_baseline.to_string());
        out.baseline = match baseline.as_str() {
            "none" => Baseline::None,
            "auto" => Baseline::Auto,
            path => Baseline::Report(PathBuf::from(path)),
        };
        if out.baseline == Baseline::Auto && method == MethodName::Mc {
            return Err(ConfigError::new("baseline", "a plain run is its own baseline"));
        }
        self.echo.baseline = Some(baseline);
        out.spec = Some(spec);
        out.params = Some(params);
        Ok(())
    }

    fn field_spec(&mut self, method: MethodName, dim: usize) -> Result<FieldSpec, ConfigError> {
        let input = self.input;
        let default_law = if method.is_cv() || method.is_sqs() {
            LawName::Perturbation
        } else {
            LawName::TwoState
        };
        let law = self.or_default("law", &input.law, default_law);
        self.echo.law = Some(law);
        match law {
            LawName::TwoState => {
                if method.is_cv() || method.is_sqs() {
                    return Err(ConfigError::new("law", "this method needs the perturbation law"));
                }
                for (field, set) in [
                    ("C0", input.c0.is_some()),
                    ("C1", input.c1.is_some()),
                    ("eta", input.eta.is_some()),
                    ("x_law", input.x_law.is_some()),
                    ("eta_B", input.eta_b.is_some()),
                ] {
                    unused(field, set, "by the two_state law")?;
                }
                let alpha = self.or_default("alpha", &input.alpha, 3.0);
                let beta = self.or_default("beta", &input.beta, 20.0);
                let p = self.or_default("p", &input.p, 0.5);
                self.echo.alpha = Some(alpha);
                self.echo.beta = Some(beta);
                self.echo.p = Some(p);
                FieldSpec::two_state(dim, alpha, beta, p).map_err(|e| ConfigError::new("alpha", e.to_string()))
            }
            LawName::Perturbation => {
                for (field, set) in [
                    ("alpha", input.alpha.is_some()),
                    ("beta", input.beta.is_some()),
                    ("p", input.p.is_some()),
                ] {
                    unused(field, set, "by the perturbation law")?;
                }
                let (c0, c1, eta, x_law) = if method.is_cv() {
                    (3.0, 20.0, 1.0, XLawName::Bernoulli01)
                } else {
                    (1.0, 1.0, 0.5, XLawName::Pm1)
                };
                let c0 = self.or_default("C0", &input.c0, MatrixInput::Scalar(c0));
                let c1 = self.or_default("C1", &input.c1, MatrixInput::Scalar(c1));
                let eta = self.or_default("eta", &input.eta, eta);
                let x_law = self.or_default("x_law", &input.x_law, x_law);
                let law = match x_law {
                    XLawName::Pm1 => {
                        unused("eta_B", input.eta_b.is_some(), "with x_law = pm1")?;
                        XLaw::PlusMinusOne
                    }
                    XLawName::Bernoulli01 => {
                        let prob = self.or_default("eta_B", &input.eta_b, 0.5);
                        if !(0.0..=1.0).contains(&prob) {
                            return Err(ConfigError::new("eta_B", format!("{prob} outside [0, 1]")));
                        }
                        self.echo.eta_b = Some(prob);
                        XLaw::Bernoulli01 { prob }
                    }
                };
                if method.is_cv() && x_law != XLawName::Bernoulli01 {
                    return Err(ConfigError::new("x_law", "control variates need bernoulli01 cell scalars"));
                }
                if method.is_sqs() && x_law != XLawName::Pm1 {
                    return Err(ConfigError::new("x_law", "selection sampling needs pm1 cell scalars"));
                }
                let c0_matrix = c0.constant(dim, "C0")?;
                let c1_field = c1.unit_cell(dim, "C1")?;
                self.echo.c0 = Some(c0);
                self.echo.c1 = Some(c1);
                self.echo.eta = Some(eta);
                self.echo.x_law = Some(x_law);
                let p = PerturbationSpec::new(c0_matrix, c1_field, eta, law)
                    .map_err(|e| ConfigError::new("C1", e.to_string()))?;
                FieldSpec::perturbation(p).map_err(|e| ConfigError::new("C1", e.to_string()))
            }
        }
    }

    fn cv_fields(&mut self, method: MethodName, n: usize, m: usize, out: &mut Experiment) -> Result<(), ConfigError> {
        let input = self.input;
        if !method.is_cv() {
            for (field, set) in [
                ("rho_mode", input.rho_mode.is_some()),
                ("pilot_size", input.pilot_size.is_some()),
                ("rho", input.rho.is_some()),
                ("cutoff", input.cutoff.is_some()),
            ] {
                unused(field, set, "outside control variate runs")?;
            }
            return Ok(());
        }
        let controls = if method == MethodName::Cv1 { 1 } else { 2 };
        let mode = self.or_default("rho_mode", &input.rho_mode, RhoModeName::SameSample);
        self.echo.rho_mode = Some(mode);
        out.rho_mode = Some(match mode {
            RhoModeName::SameSample => {
                unused("pilot_size", input.pilot_size.is_some(), "with rho_mode = same_sample")?;
                unused("rho", input.rho.is_some(), "with rho_mode = same_sample")?;
                RhoMode::SameSample
            }
            RhoModeName::Pilot => {
                unused("rho", input.rho.is_some(), "with rho_mode = pilot")?;
                let size = self.required("pilot_size", &input.pilot_size)?;
                if size < 2 || size + 2 > m {
                    return Err(ConfigError::new(
                        "pilot_size",
                        format!("{size} must be at least 2 and leave 2 of the M = {m} samples"),
                    ));
                }
                self.echo.pilot_size = Some(size);
                RhoMode::Pilot { size }
            }
            RhoModeName::Fixed => {
                unused("pilot_size", input.pilot_size.is_some(), "with rho_mode = fixed")?;
                let rho = self.required("rho", &input.rho)?;
                if rho.len() != controls {
                    return Err(ConfigError::new("rho", format!("expected {controls} weights")));
                }
                self.echo.rho = Some(rho.clone());
                RhoMode::Fixed { rho }
            }
        });
        if method == MethodName::Cv2 {
            let cutoff = self.or_default("cutoff", &input.cutoff, n as f64 / 2.0);
            if !(cutoff >= 0.0) {
                return Err(ConfigError::new("cutoff", "must be non-negative"));
            }
            self.echo.cutoff = Some(cutoff);
            out.cutoff = Some(cutoff);
        } else {
            unused("cutoff", input.cutoff.is_some(), "by cv1")?;
        }
        Ok(())
    }

    fn sqs_fields(&mut self, method: MethodName, n: usize, m: usize, out: &mut Experiment) -> Result<(), ConfigError> {
        let input = self.input;
        if !method.is_sqs() {
            unused("allow_minimal_residual", input.allow_minimal_residual.is_some(), "outside selection runs")?;
        } else {
            let minimal = self.or_default("allow_minimal_residual", &input.allow_minimal_residual, false);
            self.echo.allow_minimal_residual = Some(minimal);
            out.allow_minimal_residual = minimal;
        }
        if method != MethodName::Sqs2 {
            for (field, set) in [
                ("pool", input.pool.is_some()),
                ("N_ref", input.n_ref.is_some()),
                ("selection", input.selection.is_some()),
                ("sqs2_tol", input.sqs2_tol.is_some()),
            ] {
                unused(field, set, "outside sqs2 runs")?;
            }
            return Ok(());
        }
        let pool = self.or_default("pool", &input.pool, 2000);
        if pool < m {
            return Err(ConfigError::new("pool", format!("{pool} is smaller than M = {m}")));
        }
        let n_ref = self.or_default("N_ref", &input.n_ref, 3 * n);
        if n_ref < n {
            return Err(ConfigError::new("N_ref", format!("{n_ref} is smaller than N = {n}")));
        }
        let selection = self.or_default("selection", &input.selection, SelectionName::BestOfPool);
        out.selection = match selection {
            SelectionName::BestOfPool => {
                unused("sqs2_tol", input.sqs2_tol.is_some(), "with selection = best_of_pool")?;
                Selection::BestOfPool
            }
            SelectionName::Tolerance => {
                let tol = self.required("sqs2_tol", &input.sqs2_tol)?;
                if !(tol >= 0.0) {
                    return Err(ConfigError::new("sqs2_tol", "must be non-negative"));
                }
                self.echo.sqs2_tol = Some(tol);
                Selection::Tolerance { tol }
            }
        };
        self.echo.pool = Some(pool);
        self.echo.n_ref = Some(n_ref);
        self.echo.selection = Some(selection);
        out.pool = pool;
        out.n_ref = Some(n_ref);
        Ok(())
    }
}
