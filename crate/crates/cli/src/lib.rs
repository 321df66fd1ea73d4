//! Experiment driver: configuration files, runs, report comparison and
//! the oracle suite.

pub mod compare;
pub mod config;
pub mod oracle;
pub mod run;

pub use compare::{compare, Comparison};
pub use config::{ConfigError, Experiment, ExperimentConfig, SCHEMA_VERSION};
pub use run::{run_config, RunResult};

/// Environment variable overriding the worker count.
pub const THREADS_ENV: &str = "HVR_THREADS";

/// Reads [`THREADS_ENV`]; unset or empty means the rayon default.
pub fn threads_from_env() -> anyhow::Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => {
            let k: usize = v
                .trim()
                .parse()
                .map_err(|_| anyhow::anyhow!("{THREADS_ENV}={v} is not a positive integer"))?;
            if k == 0 {
                anyhow::bail!("{THREADS_ENV} must be at least 1");
            }
            Ok(Some(k))
        }
        _ => Ok(None),
    }
}
