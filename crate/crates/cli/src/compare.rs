//! Entrywise comparison of two estimator reports.

use std::path::Path;

use anyhow::bail;
use hvr_core::mc::VarianceRatio;
use hvr_core::variance_ratio;
use serde::Serialize;

use crate::run::read_report;

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub baseline: String,
    pub reduced: String,
    pub baseline_method: String,
    pub reduced_method: String,
    pub entries: Vec<VarianceRatio>,
    pub cost_ratio: f64,
    pub cost_matched: bool,
    pub warning: Option<String>,
}

/// Variance of `baseline` over variance of `reduced`, for every entry.
pub fn compare(baseline: &Path, reduced: &Path) -> anyhow::Result<Comparison> {
    let a = read_report(baseline)?;
    let b = read_report(reduced)?;
    if !a.same_target(&b) {
        bail!(
            "reports estimate different targets: N {} vs {}, r {} vs {}, laws {}",
            a.n,
            b.n,
            a.r,
            b.r,
            if a.target == b.target { "equal" } else { "differ" }
        );
    }
    let d = a.dim();
    let entries = (0..d)
        .flat_map(|i| (0..d).map(move |j| [i, j]))
        .map(|e| variance_ratio(&a, &b, e))
        .collect::<hvr_core::Result<Vec<_>>>()?;
    let first = &entries[0];
    Ok(Comparison {
        baseline: baseline.display().to_string(),
        reduced: reduced.display().to_string(),
        baseline_method: a.method.to_string(),
        reduced_method: b.method.to_string(),
        cost_ratio: first.cost_ratio,
        cost_matched: first.cost_matched,
        warning: first.warning.clone(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::run::{run_config, REPORT_FILE};

    fn write_run(dir: &Path, text: &str) -> std::path::PathBuf {
        let result = run_config(&ExperimentConfig::from_json(text).unwrap(), None).unwrap();
        result.write(dir).unwrap();
        dir.join(REPORT_FILE)
    }

    #[test]
    fn report_against_itself() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_run(dir.path(), r#"{"method": "mc", "N": 3, "r": 2, "M": 8}"#);
        let c = compare(&path, &path).unwrap();
        assert_eq!(c.entries.len(), 4);
        assert!(c.entries.iter().all(|e| e.ratio == 1.0));
        assert_eq!(c.cost_ratio, 1.0);
        assert!(c.cost_matched);
    }

    #[test]
    fn antithetic_half_size_is_cost_matched() {
        let dir = tempfile::tempdir().unwrap();
        let mc = write_run(&dir.path().join("mc"), r#"{"method": "mc", "N": 3, "r": 2, "M": 8}"#);
        let av = write_run(&dir.path().join("av"), r#"{"method": "antithetic", "N": 3, "r": 2, "M": 4}"#);
        let c = compare(&mc, &av).unwrap();
        assert!(c.cost_matched, "{c:?}");
        assert!(c.entries[0].ratio.is_finite());
    }

    #[test]
    fn different_boxes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_run(&dir.path().join("a"), r#"{"method": "mc", "N": 3, "r": 2, "M": 4}"#);
        let b = write_run(&dir.path().join("b"), r#"{"method": "mc", "N": 4, "r": 2, "M": 4}"#);
        let err = compare(&a, &b).unwrap_err().to_string();
        assert!(err.contains("N 3 vs 4"), "{err}");
    }
}
