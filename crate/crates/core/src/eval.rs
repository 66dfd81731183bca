//! Interval metrics and replicate aggregation.

use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::bounds::{Method, PnsInterval, ORACLE_TOL};
use crate::error::{Error, Result};

/// Winkler interval score of `[lower, upper]` for target `y`.
pub fn interval_score(interval: &PnsInterval, y: f64, alpha: f64) -> f64 {
    let (l, u) = (interval.lower, interval.upper);
    (u - l) + (2.0 / alpha) * (l - y).max(0.0) + (2.0 / alpha) * (y - u).max(0.0)
}

/// Metrics of one method on one replicate's test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateMetrics {
    pub method: Method,
    pub replicate: usize,
    pub n_obs: usize,
    pub n_exp: usize,
    pub n_test: usize,
    /// Fraction of points whose atoms pass the compatibility audit.
    pub pct_valid: f64,
    pub point_coverage: f64,
    pub id_set_coverage: f64,
    pub mean_width: f64,
    pub interval_score: f64,
    /// Fraction of points whose raw envelopes crossed.
    pub crossed_rate: f64,
}

/// Per-point metric inputs; all slices are aligned.
#[derive(Debug, Clone, Copy)]
pub struct EvalInputs<'a> {
    pub intervals: &'a [PnsInterval],
    pub oracle_pns: &'a [f64],
    pub oracle_bounds: &'a [(f64, f64)],
    pub atoms_valid: &'a [bool],
}

/// Metrics over one test set. The replicate and sample-size fields are left
/// at zero for the caller to fill.
pub fn evaluate(method: Method, inputs: EvalInputs<'_>, alpha: f64) -> Result<ReplicateMetrics> {
    let n = inputs.intervals.len();
    for (what, len) in [
        ("oracle PNS", inputs.oracle_pns.len()),
        ("oracle bounds", inputs.oracle_bounds.len()),
        ("atom audit", inputs.atoms_valid.len()),
    ] {
        if len != n {
            return Err(Error::DimensionMismatch {
                what,
                expected: n,
                found: len,
            });
        }
    }
    if n == 0 {
        return Err(Error::Empty("test set"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let mut valid = 0usize;
    let mut point = 0usize;
    let mut id_set = 0usize;
    let mut crossed = 0usize;
    let mut width = 0.0;
    let mut score = 0.0;
    for i in 0..n {
        let iv = &inputs.intervals[i];
        let y = inputs.oracle_pns[i];
        let (lo, hi) = inputs.oracle_bounds[i];
        valid += usize::from(inputs.atoms_valid[i]);
        point += usize::from(iv.contains(y, ORACLE_TOL));
        id_set += usize::from(iv.contains_interval(lo, hi, ORACLE_TOL));
        crossed += usize::from(iv.crossed);
        width += iv.width();
        score += interval_score(iv, y, alpha);
    }
    let nf = n as f64;
    Ok(ReplicateMetrics {
        method,
        replicate: 0,
        n_obs: 0,
        n_exp: 0,
        n_test: n,
        pct_valid: valid as f64 / nf,
        point_coverage: point as f64 / nf,
        id_set_coverage: id_set as f64 / nf,
        mean_width: width / nf,
        interval_score: score / nf,
        crossed_rate: crossed as f64 / nf,
    })
}

/// Mean with a normal-approximation 95% interval over replicates, using the
/// standard deviation with divisor `K`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub value: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl MetricSummary {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        let k = values.len();
        if k < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 replicates to aggregate, got {k}"
            )));
        }
        let mean = values.iter().sum::<f64>() / k as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
        let half = 1.96 * var.sqrt() / (k as f64).sqrt();
        Ok(Self {
            value: mean,
            ci_lo: mean - half,
            ci_hi: mean + half,
        })
    }

    pub fn half_width(&self) -> f64 {
        (self.ci_hi - self.ci_lo) / 2.0
    }
}

/// Replicate-aggregated metrics of one method at one sample-size setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: Method,
    pub n_obs: usize,
    pub n_exp: usize,
    pub n_test: usize,
    pub n_replicates: usize,
    pub pct_valid: MetricSummary,
    pub point_coverage: MetricSummary,
    pub id_set_coverage: MetricSummary,
    pub mean_width: MetricSummary,
    pub interval_score: MetricSummary,
    pub crossed_rate: MetricSummary,
}

impl MetricsReport {
    /// `(name, summary)` pairs in a fixed order.
    pub fn metrics(&self) -> [(&'static str, MetricSummary); 6] {
        [
            ("pct_valid", self.pct_valid),
            ("point_coverage", self.point_coverage),
            ("id_set_coverage", self.id_set_coverage),
            ("mean_width", self.mean_width),
            ("interval_score", self.interval_score),
            ("crossed_rate", self.crossed_rate),
        ]
    }
}

/// Aggregates replicates of a single method and setting.
pub fn aggregate_replicates(reports: &[ReplicateMetrics]) -> Result<MetricsReport> {
    let first = reports.first().ok_or(Error::Empty("replicate list"))?;
    if reports
        .iter()
        .any(|r| r.method != first.method || r.n_obs != first.n_obs || r.n_exp != first.n_exp)
    {
        return Err(Error::InvalidInput(
            "replicates to aggregate must share method and sample sizes".into(),
        ));
    }
    let col = |f: fn(&ReplicateMetrics) -> f64| -> Result<MetricSummary> {
        MetricSummary::from_values(&reports.iter().map(f).collect::<Vec<_>>())
    };
    Ok(MetricsReport {
        method: first.method,
        n_obs: first.n_obs,
        n_exp: first.n_exp,
        n_test: first.n_test,
        n_replicates: reports.len(),
        pct_valid: col(|r| r.pct_valid)?,
        point_coverage: col(|r| r.point_coverage)?,
        id_set_coverage: col(|r| r.id_set_coverage)?,
        mean_width: col(|r| r.mean_width)?,
        interval_score: col(|r| r.interval_score)?,
        crossed_rate: col(|r| r.crossed_rate)?,
    })
}

/// Writes replicate rows as CSV with a header.
pub fn write_replicates_csv<W: Write>(rows: &[ReplicateMetrics], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_replicates_csv<R: std::io::Read>(reader: R) -> Result<Vec<ReplicateMetrics>> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize().map(|row| Ok(row?)).collect()
}
