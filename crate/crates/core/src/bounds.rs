//! Tian–Pearl constraint system and PNS bound envelopes.
//!
//! Every estimator in the crate reduces to six conditional probabilities at a
//! covariate point, the [`AtomVector`]. The sharp bounds on the probability of
//! necessity and sufficiency are a max over four affine lower terms and a min
//! over four affine upper terms of those atoms.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

/// Tolerance used when auditing oracle atoms.
pub const ORACLE_TOL: f64 = 1e-9;
/// Tolerance used when auditing atoms produced by a learned model.
pub const AUDIT_TOL: f64 = 1e-6;

/// Interventional and observational probabilities at a covariate point.
///
/// `mu1`/`mu0` are `P(Y=1 | do(X=x), z)`, `pxy` is `P(X=x, Y=y | z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomVector {
    pub mu1: f64,
    pub mu0: f64,
    pub p11: f64,
    pub p10: f64,
    pub p01: f64,
    pub p00: f64,
}

impl AtomVector {
    /// Builds an atom vector, checking the simplex and unit-interval invariants.
    pub fn new(mu1: f64, mu0: f64, p11: f64, p10: f64, p01: f64, p00: f64) -> Result<Self> {
        let atoms = Self {
            mu1,
            mu0,
            p11,
            p10,
            p01,
            p00,
        };
        atoms.validate()?;
        Ok(atoms)
    }

    /// Builds from the joint cells in `2x + y` order (`p00, p01, p10, p11`).
    pub fn from_joint(joint: [f64; 4], mu0: f64, mu1: f64) -> Self {
        Self {
            mu1,
            mu0,
            p11: joint[3],
            p10: joint[2],
            p01: joint[1],
            p00: joint[0],
        }
    }

    /// Joint cells in `2x + y` order.
    pub fn joint(&self) -> [f64; 4] {
        [self.p00, self.p01, self.p10, self.p11]
    }

    /// `P(X=x, Y=y | z)`.
    pub fn p(&self, x: u8, y: u8) -> f64 {
        self.joint()[(2 * x + y) as usize]
    }

    /// `P(Y=1 | do(X=x), z)`.
    pub fn mu(&self, x: u8) -> f64 {
        if x == 1 {
            self.mu1
        } else {
            self.mu0
        }
    }

    /// Layout used by Jacobians and serialized tables:
    /// `(p00, p01, p10, p11, mu0, mu1)`.
    pub fn to_array(&self) -> [f64; 6] {
        [self.p00, self.p01, self.p10, self.p11, self.mu0, self.mu1]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self::from_joint([a[0], a[1], a[2], a[3]], a[4], a[5])
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.to_array();
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("atom vector"));
        }
        if all.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidInput(format!(
                "atom probabilities must lie in [0, 1]: {self}"
            )));
        }
        let total = self.p00 + self.p01 + self.p10 + self.p11;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "joint probabilities sum to {total}, not 1"
            )));
        }
        Ok(())
    }

    /// Convex combination `sum_i w_i * atoms_i`, componentwise.
    pub fn weighted_sum<'a>(items: impl IntoIterator<Item = (f64, &'a AtomVector)>) -> Self {
        let mut acc = [0.0; 6];
        for (w, a) in items {
            for (dst, v) in acc.iter_mut().zip(a.to_array()) {
                *dst += w * v;
            }
        }
        Self::from_array(acc)
    }
}

impl fmt::Display for AtomVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(mu1={:.6}, mu0={:.6}, p11={:.6}, p10={:.6}, p01={:.6}, p00={:.6})",
            self.mu1, self.mu0, self.p11, self.p10, self.p01, self.p00
        )
    }
}

/// Compatibility constraints `p_x1 <= mu_x <= 1 - p_x0` for both arms.
pub fn check_feasibility(atoms: &AtomVector, tol: f64) -> bool {
    let arm_ok = |mu: f64, p_y1: f64, p_y0: f64| p_y1 - tol <= mu && mu <= 1.0 - p_y0 + tol;
    arm_ok(atoms.mu1, atoms.p11, atoms.p10) && arm_ok(atoms.mu0, atoms.p01, atoms.p00)
}

/// Four lower and four upper envelope terms. The first lower term is the
/// constant 0.
///
/// The same shape doubles as a container for per-term dispersion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub lower: [f64; 4],
    pub upper: [f64; 4],
}

/// Row-major coefficient matrix of the eight terms over
/// `(p00, p01, p10, p11, mu0, mu1)`, plus the constant offset.
pub const TERM_COEFFICIENTS: [([f64; 6], f64); 8] = [
    // lower: 0
    ([0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 0.0),
    // lower: mu1 - mu0
    ([0.0, 0.0, 0.0, 0.0, -1.0, 1.0], 0.0),
    // lower: p11 + p01 - mu0
    ([0.0, 1.0, 0.0, 1.0, -1.0, 0.0], 0.0),
    // lower: mu1 - p11 - p01
    ([0.0, -1.0, 0.0, -1.0, 0.0, 1.0], 0.0),
    // upper: mu1
    ([0.0, 0.0, 0.0, 0.0, 0.0, 1.0], 0.0),
    // upper: 1 - mu0
    ([0.0, 0.0, 0.0, 0.0, -1.0, 0.0], 1.0),
    // upper: p11 + p00
    ([1.0, 0.0, 0.0, 1.0, 0.0, 0.0], 0.0),
    // upper: mu1 - mu0 + p10 + p01
    ([0.0, 1.0, 1.0, 0.0, -1.0, 1.0], 0.0),
];

impl BoundTerms {
    pub fn zeros() -> Self {
        Self {
            lower: [0.0; 4],
            upper: [0.0; 4],
        }
    }

    /// Terms in `lower ++ upper` order.
    pub fn to_array(&self) -> [f64; 8] {
        let mut out = [0.0; 8];
        out[..4].copy_from_slice(&self.lower);
        out[4..].copy_from_slice(&self.upper);
        out
    }

    pub fn from_array(a: [f64; 8]) -> Self {
        let mut terms = Self::zeros();
        terms.lower.copy_from_slice(&a[..4]);
        terms.upper.copy_from_slice(&a[4..]);
        terms
    }

    /// Largest lower term and its index (first index wins on ties).
    pub fn lower_envelope(&self) -> (f64, usize) {
        arg_extreme(&self.lower, |a, b| a > b)
    }

    /// Smallest upper term and its index (first index wins on ties).
    pub fn upper_envelope(&self) -> (f64, usize) {
        arg_extreme(&self.upper, |a, b| a < b)
    }
}

fn arg_extreme(values: &[f64; 4], better: impl Fn(f64, f64) -> bool) -> (f64, usize) {
    let mut best = (values[0], 0);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if better(v, best.0) {
            best = (v, i);
        }
    }
    best
}

/// Evaluates the eight Tian–Pearl terms at `atoms`.
pub fn bound_terms(atoms: &AtomVector) -> BoundTerms {
    let &AtomVector {
        mu1,
        mu0,
        p11,
        p10,
        p01,
        p00,
    } = atoms;
    BoundTerms {
        lower: [0.0, mu1 - mu0, p11 + p01 - mu0, mu1 - p11 - p01],
        upper: [mu1, 1.0 - mu0, p11 + p00, mu1 - mu0 + p10 + p01],
    }
}

/// How an interval was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Oracle,
    PlugIn,
    CellFrequency,
    SLearner,
    TLearner,
    Anchored,
    MbFull,
    MbLastLayer,
    AnchEnn,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Oracle,
        Method::PlugIn,
        Method::CellFrequency,
        Method::SLearner,
        Method::TLearner,
        Method::Anchored,
        Method::MbFull,
        Method::MbLastLayer,
        Method::AnchEnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Oracle => "oracle",
            Method::PlugIn => "plug_in",
            Method::CellFrequency => "cell_frequency",
            Method::SLearner => "s_learner",
            Method::TLearner => "t_learner",
            Method::Anchored => "anchored",
            Method::MbFull => "mb_full",
            Method::MbLastLayer => "mb_last_layer",
            Method::AnchEnn => "anch_enn",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An estimated interval for PNS at one covariate point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PnsInterval {
    pub lower: f64,
    pub upper: f64,
    /// The raw envelopes crossed (`lower > upper`) before clipping.
    pub crossed: bool,
    pub method: Method,
    pub kappa_lower: f64,
    pub kappa_upper: f64,
}

impl PnsInterval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, value: f64, tol: f64) -> bool {
        !self.crossed && self.lower - tol <= value && value <= self.upper + tol
    }

    /// `other` lies inside `self` (both endpoints, closed, with tolerance).
    pub fn contains_interval(&self, lower: f64, upper: f64, tol: f64) -> bool {
        !self.crossed && self.lower <= lower + tol && self.upper >= upper - tol
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }
}

fn finish(raw_lower: f64, raw_upper: f64, method: Method, kl: f64, ku: f64) -> PnsInterval {
    PnsInterval {
        lower: raw_lower.clamp(0.0, 1.0),
        upper: raw_upper.clamp(0.0, 1.0),
        crossed: raw_lower > raw_upper,
        method,
        kappa_lower: kl,
        kappa_upper: ku,
    }
}

/// Envelope of already-evaluated terms, without any correction.
pub fn envelope_interval(terms: &BoundTerms) -> PnsInterval {
    finish(
        terms.lower_envelope().0,
        terms.upper_envelope().0,
        Method::PlugIn,
        0.0,
        0.0,
    )
}

/// Plug-in bounds: max of lower terms and min of upper terms.
pub fn plug_in_interval(atoms: &AtomVector) -> PnsInterval {
    envelope_interval(&bound_terms(atoms))
}

/// Precision-corrected envelope: each lower term is shifted down by
/// `kappa_l * std`, each upper term up by `kappa_u * std`, before the max/min.
///
/// Crossed intervals are flagged but not repaired.
pub fn precision_corrected_interval(
    means: &BoundTerms,
    stds: &BoundTerms,
    kappa_l: f64,
    kappa_u: f64,
) -> Result<PnsInterval> {
    if stds.to_array().iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::InvalidInput(
            "term standard deviations must be non-negative".into(),
        ));
    }
    if stds.lower[0] != 0.0 {
        return Err(Error::InvalidInput(
            "the constant lower term has zero dispersion".into(),
        ));
    }
    if !(kappa_l >= 0.0 && kappa_u >= 0.0) {
        return Err(Error::InvalidInput(
            "critical values must be non-negative".into(),
        ));
    }
    let mut shifted = *means;
    for j in 0..4 {
        shifted.lower[j] -= kappa_l * stds.lower[j];
        shifted.upper[j] += kappa_u * stds.upper[j];
    }
    Ok(finish(
        shifted.lower_envelope().0,
        shifted.upper_envelope().0,
        Method::PlugIn,
        kappa_l,
        kappa_u,
    ))
}
