//! Long-format tables for external plotting.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::bounds::Method;
use crate::error::{Error, Result};
use crate::eval::MetricsReport;

/// One `(method, setting, metric)` cell of an aggregated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub method: Method,
    pub n_obs: usize,
    pub n_exp: usize,
    pub metric: String,
    pub value: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

pub fn read_aggregate(results_dir: &Path) -> Result<Vec<MetricsReport>> {
    let path = results_dir.join("aggregate.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|_| Error::MissingResults(path.display().to_string()))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn plot_rows(reports: &[MetricsReport]) -> Vec<PlotRow> {
    reports
        .iter()
        .flat_map(|r| {
            r.metrics().into_iter().map(|(name, s)| PlotRow {
                method: r.method,
                n_obs: r.n_obs,
                n_exp: r.n_exp,
                metric: name.to_string(),
                value: s.value,
                ci_lo: s.ci_lo,
                ci_hi: s.ci_hi,
            })
        })
        .collect()
}

/// Writes `plot_data.csv` next to the aggregate and returns its rows.
pub fn emit_plot_data(results_dir: &Path) -> Result<Vec<PlotRow>> {
    let rows = plot_rows(&read_aggregate(results_dir)?);
    let mut w = csv::Writer::from_path(results_dir.join("plot_data.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}
