//! Exact oracle tables with audits.

use serde::Serialize;

use crate::bounds::{bound_terms, check_feasibility, plug_in_interval};
use crate::error::{Error, Result};
use crate::harness::experiment::Scenario;

/// Tolerance of the dump audits.
pub const DUMP_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRow {
    /// Space-separated covariate values.
    pub z: String,
    pub p00: f64,
    pub p01: f64,
    pub p10: f64,
    pub p11: f64,
    pub mu0: f64,
    pub mu1: f64,
    pub lower: f64,
    pub upper: f64,
    pub pns: f64,
    pub feasible: bool,
    pub pns_in_bounds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleAudit {
    pub latent_configurations: usize,
    /// `|sum of latent weights - 1|`.
    pub weight_sum_error: f64,
    /// Largest `|sum_xy p_xy - 1|` over rows.
    pub simplex_error: f64,
    pub all_feasible: bool,
    pub all_pns_in_bounds: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleDump {
    pub rows: Vec<OracleRow>,
    pub audit: OracleAudit,
}

/// Oracle atoms, sharp bounds and PNS at each row of `z` (row-major).
pub fn oracle_dump(scenario: &Scenario, z: &[f64]) -> Result<OracleDump> {
    let d = scenario.d_obs();
    if z.is_empty() || z.len() % d != 0 {
        return Err(Error::InvalidInput(format!(
            "covariate list of length {} is not a positive multiple of {d}",
            z.len()
        )));
    }
    let weights = scenario.hidden_weights()?;
    let weight_sum_error = (weights.iter().sum::<f64>() - 1.0).abs();
    let mut rows = Vec::with_capacity(z.len() / d);
    let mut simplex_error: f64 = 0.0;
    for row in z.chunks_exact(d) {
        let (a, pns) = scenario.oracle(row)?;
        let iv = plug_in_interval(&a);
        simplex_error = simplex_error.max((a.joint().iter().sum::<f64>() - 1.0).abs());
        let terms = bound_terms(&a);
        let (lo, _) = terms.lower_envelope();
        let (hi, _) = terms.upper_envelope();
        rows.push(OracleRow {
            z: row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "),
            p00: a.p00,
            p01: a.p01,
            p10: a.p10,
            p11: a.p11,
            mu0: a.mu0,
            mu1: a.mu1,
            lower: iv.lower,
            upper: iv.upper,
            pns,
            feasible: check_feasibility(&a, DUMP_TOL),
            pns_in_bounds: pns >= lo - DUMP_TOL && pns <= hi + DUMP_TOL,
        });
    }
    let all_feasible = rows.iter().all(|r| r.feasible);
    let all_pns_in_bounds = rows.iter().all(|r| r.pns_in_bounds);
    let passed = weight_sum_error <= DUMP_TOL && simplex_error <= DUMP_TOL && all_feasible && all_pns_in_bounds;
    Ok(OracleDump {
        rows,
        audit: OracleAudit {
            latent_configurations: weights.len(),
            weight_sum_error,
            simplex_error,
            all_feasible,
            all_pns_in_bounds,
            passed,
        },
    })
}

impl OracleDump {
    /// Rows as CSV followed by `#`-prefixed audit footer lines.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        let mut out = String::from_utf8(bytes).expect("csv output is utf-8");
        let a = &self.audit;
        out.push_str(&format!(
            "# latent_configurations={} weight_sum_error={:e} simplex_error={:e} all_feasible={} all_pns_in_bounds={} passed={}\n",
            a.latent_configurations, a.weight_sum_error, a.simplex_error, a.all_feasible, a.all_pns_in_bounds, a.passed
        ));
        Ok(out)
    }
}
