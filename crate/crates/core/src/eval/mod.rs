//! Metrics, statistical model comparison and rank diagrams.

pub mod cd;
pub mod metrics;
pub mod stats;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

pub use cd::{render_cd_diagram, write_cd_diagram};
pub use metrics::{horizon_metrics, masked_metrics, Horizon, MetricReport, MetricValues};
pub use stats::{compare, friedman_test, holm_adjust, holm_cliques, wilcoxon_signed_rank, ComparisonResult};

use crate::error::{Error, Result};

pub fn read_reports(path: &Path) -> Result<Vec<MetricReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

pub fn write_reports(reports: &[MetricReport], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(reports).map_err(|e| Error::Schema(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// One comparison cell: a (scenario, rate, horizon step) condition.
pub type Cell = (String, String, Horizon);

/// MAE per model over the cells every model was scored on. Averaged
/// horizons and undefined metrics are left out.
pub fn score_matrix(reports: &[MetricReport]) -> Result<(Vec<String>, Vec<Cell>, Vec<Vec<f64>>)> {
    let mut by_model: BTreeMap<&str, BTreeMap<Cell, f64>> = BTreeMap::new();
    for r in reports {
        if r.horizon == Horizon::Average {
            continue;
        }
        if let Some(mae) = r.mae {
            let cell = (r.scenario.clone(), format!("{}", r.rate), r.horizon);
            by_model.entry(&r.model).or_default().insert(cell, mae);
        }
    }
    if by_model.len() < 2 {
        return Err(Error::Config(format!(
            "comparison needs at least 2 models, reports name {}",
            by_model.len()
        )));
    }
    let mut common: Option<BTreeSet<Cell>> = None;
    for cells in by_model.values() {
        let keys: BTreeSet<Cell> = cells.keys().cloned().collect();
        common = Some(match common {
            None => keys,
            Some(c) => c.intersection(&keys).cloned().collect(),
        });
    }
    let cells: Vec<Cell> = common.unwrap_or_default().into_iter().collect();
    if cells.len() < 2 {
        return Err(Error::Stats(format!(
            "models share {} scored cells; at least 2 are needed",
            cells.len()
        )));
    }
    let models: Vec<String> = by_model.keys().map(|m| m.to_string()).collect();
    let scores = by_model
        .values()
        .map(|m| cells.iter().map(|c| m[c]).collect())
        .collect();
    Ok((models, cells, scores))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rep(model: &str, h: usize, mae: f64) -> MetricReport {
        MetricReport::new(
            model,
            "mix",
            0.4,
            Horizon::Step(h),
            MetricValues {
                mae: Some(mae),
                rmse: Some(mae),
                mape: None,
                n: 1,
            },
        )
    }

    #[test]
    fn identical_reports_form_one_clique() {
        let mut reports = Vec::new();
        for h in 1..=12 {
            reports.push(rep("x", h, h as f64));
            reports.push(rep("y", h, h as f64));
        }
        let (models, cells, scores) = score_matrix(&reports).unwrap();
        assert_eq!(models, vec!["x", "y"]);
        assert_eq!(cells.len(), 12);
        let r = compare(&models, &scores, 0.05).unwrap();
        assert_eq!(r.cliques, vec![vec!["x".to_string(), "y".to_string()]]);
    }

    #[test]
    fn single_model_is_a_usage_error() {
        let reports = vec![rep("x", 1, 1.0), rep("x", 2, 1.0)];
        assert!(matches!(score_matrix(&reports), Err(Error::Config(_))));
    }
}
