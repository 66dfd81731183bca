//! WebAssembly entry points for the static explorer page in `www/`.
//!
//! Each export takes plain numbers and returns a JSON string, so the page
//! needs no bindings beyond `JSON.parse`. Errors come back as a rejected
//! call carrying the message.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use pns_core::bounds::{
    bound_terms, check_feasibility, plug_in_interval, precision_corrected_interval, AtomVector,
    BoundTerms, PnsInterval, ORACLE_TOL, TERM_COEFFICIENTS,
};
use pns_core::neural::anchor;
use pns_core::scm_lowdim::LowDimScm;

type Outcome = Result<String, String>;

#[derive(Serialize)]
struct Interval {
    lower: f64,
    upper: f64,
    crossed: bool,
}

impl From<PnsInterval> for Interval {
    fn from(i: PnsInterval) -> Self {
        Self {
            lower: i.lower,
            upper: i.upper,
            crossed: i.crossed,
        }
    }
}

#[derive(Serialize)]
struct Atoms {
    p00: f64,
    p01: f64,
    p10: f64,
    p11: f64,
    mu0: f64,
    mu1: f64,
}

impl From<&AtomVector> for Atoms {
    fn from(a: &AtomVector) -> Self {
        Self {
            p00: a.p00,
            p01: a.p01,
            p10: a.p10,
            p11: a.p11,
            mu0: a.mu0,
            mu1: a.mu1,
        }
    }
}

#[derive(Serialize)]
struct BoundsView {
    atoms: Atoms,
    feasible: bool,
    terms: BoundTerms,
    active_lower: usize,
    active_upper: usize,
    interval: Interval,
}

fn bounds_view(a: &AtomVector) -> BoundsView {
    let terms = bound_terms(a);
    BoundsView {
        atoms: a.into(),
        feasible: check_feasibility(a, ORACLE_TOL),
        terms,
        active_lower: terms.lower_envelope().1,
        active_upper: terms.upper_envelope().1,
        interval: plug_in_interval(a).into(),
    }
}

fn to_json<T: Serialize>(v: &T) -> Outcome {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

/// Bound terms, envelope and feasibility for user-entered atoms.
///
/// The joint cells must lie on the simplex; the interventional means may be
/// anything in `[0, 1]`, so infeasible combinations can be explored.
#[wasm_bindgen]
pub fn bounds(p00: f64, p01: f64, p10: f64, p11: f64, mu0: f64, mu1: f64) -> Outcome {
    let a = AtomVector::new(mu1, mu0, p11, p10, p01, p00).map_err(|e| e.to_string())?;
    to_json(&bounds_view(&a))
}

#[derive(Serialize)]
struct AnchoringView {
    #[serde(flatten)]
    bounds: BoundsView,
    stds: BoundTerms,
    corrected: Interval,
}

/// Delta-method standard deviations of the eight terms under multinomial
/// sampling of `n_obs` rows and a balanced trial of `n_exp` rows.
pub fn term_stds(a: &AtomVector, n_obs: f64, n_exp: f64) -> BoundTerms {
    let x = a.to_array();
    let mut cov = [[0.0; 6]; 6];
    for i in 0..4 {
        for j in 0..4 {
            let delta = if i == j { x[i] } else { 0.0 };
            cov[i][j] = (delta - x[i] * x[j]) / n_obs;
        }
    }
    for k in 4..6 {
        cov[k][k] = x[k] * (1.0 - x[k]) / (n_exp / 2.0);
    }
    let mut s = [0.0; 8];
    for (t, (c, _)) in TERM_COEFFICIENTS.iter().enumerate() {
        let mut v = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                v += c[i] * cov[i][j] * c[j];
            }
        }
        s[t] = v.max(0.0).sqrt();
    }
    s[0] = 0.0;
    BoundTerms::from_array(s)
}

/// Maps free head outputs through the anchoring layer, then widens the
/// plug-in envelope by `kappa` standard deviations computed at the given
/// sample sizes.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn anchoring(
    l00: f64,
    l01: f64,
    l10: f64,
    l11: f64,
    delta0: f64,
    delta1: f64,
    n_obs: f64,
    n_exp: f64,
    kappa_l: f64,
    kappa_u: f64,
) -> Outcome {
    let inputs = [l00, l01, l10, l11, delta0, delta1, n_obs, n_exp, kappa_l, kappa_u];
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err("inputs must be finite".into());
    }
    if n_obs < 1.0 || n_exp < 2.0 {
        return Err("sample sizes must be at least 1 (observational) and 2 (experimental)".into());
    }
    let out = anchor([l00, l01, l10, l11], [delta0, delta1]);
    let view = bounds_view(&out.atoms);
    let stds = term_stds(&out.atoms, n_obs, n_exp);
    let corrected = precision_corrected_interval(&view.terms, &stds, kappa_l, kappa_u)
        .map_err(|e| e.to_string())?;
    to_json(&AnchoringView {
        bounds: view,
        stds,
        corrected: corrected.into(),
    })
}

#[derive(Serialize)]
struct OracleView {
    z: Vec<u8>,
    #[serde(flatten)]
    bounds: BoundsView,
    pns: f64,
    pns_in_bounds: bool,
}

/// Exact Model 1 oracle at an observed covariate string such as
/// `"010011..."` (one character per observed covariate).
#[wasm_bindgen]
pub fn model1_oracle(z: &str) -> Outcome {
    let scm = LowDimScm::li_model_1();
    let bits: Vec<u8> = z
        .trim()
        .chars()
        .map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            other => Err(format!("`{other}` is not a binary digit")),
        })
        .collect::<Result<_, _>>()?;
    if bits.len() != scm.d_obs() {
        return Err(format!("expected {} digits, got {}", scm.d_obs(), bits.len()));
    }
    let atoms = scm.marginal_atoms(&bits).map_err(|e| e.to_string())?;
    let pns = scm.marginal_pns(&bits).map_err(|e| e.to_string())?;
    let view = bounds_view(&atoms);
    let pns_in_bounds =
        pns >= view.terms.lower_envelope().0 - 1e-12 && pns <= view.terms.upper_envelope().0 + 1e-12;
    to_json(&OracleView {
        z: bits,
        bounds: view,
        pns,
        pns_in_bounds,
    })
}

/// Number of observed covariates in Model 1.
#[wasm_bindgen]
pub fn model1_dim() -> usize {
    LowDimScm::li_model_1().d_obs()
}
