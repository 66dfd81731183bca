//! Real-valued covariates with latent Bernoulli confounders.
//!
//! Treatment follows a clipped propensity perturbed by the centred latents;
//! the outcome is logistic in covariates, latents, latent pairs and
//! latent-by-covariate interactions. Because the latents have finite support
//! every oracle quantity is an exact weighted sum over `2^k` configurations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

use crate::bounds::AtomVector;
use crate::data::{parse_float, Dataset, Regime};
use crate::error::{ensure_dim, Error, Result};

/// Largest latent count the oracle will enumerate.
pub const MAX_LATENT: usize = 20;

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BasePropensity {
    Constant { value: f64 },
    /// `sigmoid(intercept + <weights, z>)`.
    Logistic { intercept: f64, weights: Vec<f64> },
}

impl BasePropensity {
    pub fn eval(&self, z: &[f64]) -> f64 {
        match self {
            BasePropensity::Constant { value } => *value,
            BasePropensity::Logistic { intercept, weights } => {
                sigmoid(intercept + dot(weights, z))
            }
        }
    }
}

/// Outcome coefficients for one treatment arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeArm {
    pub intercept: f64,
    /// `d_obs` coefficients on the covariates.
    pub linear: Vec<f64>,
    /// `k` coefficients on the centred latents.
    pub latent: Vec<f64>,
    /// `k(k-1)/2` coefficients on latent pairs `j < l`, row by row.
    pub pairwise: Vec<f64>,
    /// `k` latent-by-covariate interaction strengths.
    pub interaction: Vec<f64>,
    /// `k` covariate directions of length `d_obs`.
    pub directions: Vec<Vec<f64>>,
}

impl OutcomeArm {
    pub fn zeros(d_obs: usize, k: usize) -> Self {
        Self {
            intercept: 0.0,
            linear: vec![0.0; d_obs],
            latent: vec![0.0; k],
            pairwise: vec![0.0; k * k.saturating_sub(1) / 2],
            interaction: vec![0.0; k],
            directions: vec![vec![0.0; d_obs]; k],
        }
    }

    fn validate(&self, d_obs: usize, k: usize) -> Result<()> {
        ensure_dim("outcome linear coefficients", d_obs, self.linear.len())?;
        ensure_dim("outcome latent coefficients", k, self.latent.len())?;
        ensure_dim(
            "outcome pairwise coefficients",
            k * k.saturating_sub(1) / 2,
            self.pairwise.len(),
        )?;
        ensure_dim("outcome interaction coefficients", k, self.interaction.len())?;
        ensure_dim("outcome directions", k, self.directions.len())?;
        for v in &self.directions {
            ensure_dim("outcome direction", d_obs, v.len())?;
        }
        Ok(())
    }

    fn logit(&self, z: &[f64], centred: &[f64]) -> f64 {
        let k = centred.len();
        let mut t = self.intercept + dot(&self.linear, z);
        t += dot(&self.latent, centred);
        let mut idx = 0;
        for j in 0..k {
            for l in (j + 1)..k {
                t += self.pairwise[idx] * centred[j] * centred[l];
                idx += 1;
            }
        }
        for j in 0..k {
            if self.interaction[j] != 0.0 {
                t += self.interaction[j] * centred[j] * dot(&self.directions[j], z);
            }
        }
        t
    }

    fn scale_non_intercept(&mut self, s: f64) {
        for v in self
            .linear
            .iter_mut()
            .chain(&mut self.latent)
            .chain(&mut self.pairwise)
            .chain(&mut self.interaction)
        {
            *v *= s;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HighDimScm {
    /// Latent Bernoulli means.
    pub pi: Vec<f64>,
    /// Confounding strength.
    pub gamma: f64,
    /// Latent weights in the propensity; `sum |alpha_j| <= 1`.
    pub alpha_conf: Vec<f64>,
    pub eps_clip: f64,
    pub base_propensity: BasePropensity,
    /// Outcome model for `x = 0` and `x = 1`.
    pub arms: [OutcomeArm; 2],
}

impl HighDimScm {
    pub fn k(&self) -> usize {
        self.pi.len()
    }

    pub fn d_obs(&self) -> usize {
        self.arms[0].linear.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        let d = self.d_obs();
        if k > MAX_LATENT {
            return Err(Error::EnumerationBudget { k, max: MAX_LATENT });
        }
        if !self.pi.iter().all(|&p| p > 0.0 && p < 1.0) {
            return Err(Error::InvalidInput(
                "latent means must lie strictly inside (0, 1)".into(),
            ));
        }
        ensure_dim("alpha_conf", k, self.alpha_conf.len())?;
        if self.alpha_conf.iter().map(|a| a.abs()).sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::InvalidInput("sum |alpha_conf| must be at most 1".into()));
        }
        if !(self.eps_clip > 0.0 && self.eps_clip < 0.5) {
            return Err(Error::InvalidInput("eps_clip must lie in (0, 0.5)".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidInput("gamma must be non-negative".into()));
        }
        match &self.base_propensity {
            BasePropensity::Constant { value } if !(*value > 0.0 && *value < 1.0) => {
                return Err(Error::InvalidInput(
                    "constant propensity must lie in (0, 1)".into(),
                ))
            }
            BasePropensity::Logistic { weights, .. } => {
                ensure_dim("propensity weights", d, weights.len())?
            }
            _ => {}
        }
        for arm in &self.arms {
            arm.validate(d, k)?;
        }
        Ok(())
    }

    fn clip(&self, p: f64) -> f64 {
        p.clamp(self.eps_clip, 1.0 - self.eps_clip)
    }

    fn centred(&self, h: &[u8]) -> Vec<f64> {
        h.iter()
            .zip(&self.pi)
            .map(|(&hj, &p)| f64::from(hj) - p)
            .collect()
    }

    fn check(&self, z: &[f64], h: &[u8]) -> Result<()> {
        ensure_dim("observed covariates", self.d_obs(), z.len())?;
        ensure_dim("latent vector", self.k(), h.len())
    }

    /// Base propensity after clipping, before any latent perturbation.
    pub fn base(&self, z: &[f64]) -> f64 {
        self.clip(self.base_propensity.eval(z))
    }

    /// Unclipped `p(z) + gamma * sum_j alpha_j (h_j - pi_j)`.
    pub fn propensity_unclipped(&self, z: &[f64], h: &[u8]) -> Result<f64> {
        self.check(z, h)?;
        Ok(self.base(z) + self.gamma * dot(&self.alpha_conf, &self.centred(h)))
    }

    /// `P(X = 1 | z, h)` in the observational regime.
    pub fn propensity(&self, z: &[f64], h: &[u8]) -> Result<f64> {
        Ok(self.clip(self.propensity_unclipped(z, h)?))
    }

    /// `P(Y = 1 | do(X = x), z, h)`.
    pub fn outcome_prob(&self, x: u8, z: &[f64], h: &[u8]) -> Result<f64> {
        self.check(z, h)?;
        Ok(sigmoid(self.arms[x as usize].logit(z, &self.centred(h))))
    }

    pub fn outcome_logit(&self, x: u8, z: &[f64], h: &[u8]) -> Result<f64> {
        self.check(z, h)?;
        Ok(self.arms[x as usize].logit(z, &self.centred(h)))
    }

    /// Latent configurations with probabilities, binary counting order.
    pub fn latent_configs(&self) -> Result<Vec<(Vec<u8>, f64)>> {
        let k = self.k();
        if k > MAX_LATENT {
            return Err(Error::EnumerationBudget { k, max: MAX_LATENT });
        }
        Ok((0..1usize << k)
            .map(|code| {
                let h: Vec<u8> = (0..k).map(|j| ((code >> (k - 1 - j)) & 1) as u8).collect();
                let w = h
                    .iter()
                    .zip(&self.pi)
                    .map(|(&hj, &p)| if hj == 1 { p } else { 1.0 - p })
                    .product();
                (h, w)
            })
            .collect())
    }

    /// Atoms conditional on the observed covariates only.
    pub fn marginal_atoms(&self, z: &[f64]) -> Result<AtomVector> {
        ensure_dim("observed covariates", self.d_obs(), z.len())?;
        let mut acc = [0.0; 6];
        for (h, w) in self.latent_configs()? {
            let px = self.propensity(z, &h)?;
            let p1 = self.outcome_prob(1, z, &h)?;
            let p0 = self.outcome_prob(0, z, &h)?;
            // (p00, p01, p10, p11, mu0, mu1)
            acc[0] += w * (1.0 - px) * (1.0 - p0);
            acc[1] += w * (1.0 - px) * p0;
            acc[2] += w * px * (1.0 - p1);
            acc[3] += w * px * p1;
            acc[4] += w * p0;
            acc[5] += w * p1;
        }
        Ok(AtomVector::from_array(acc))
    }

    /// PNS under the shared-threshold coupling of the potential outcomes.
    pub fn true_pns_obs(&self, z: &[f64]) -> Result<f64> {
        ensure_dim("observed covariates", self.d_obs(), z.len())?;
        let mut pns = 0.0;
        for (h, w) in self.latent_configs()? {
            let diff = self.outcome_prob(1, z, &h)? - self.outcome_prob(0, z, &h)?;
            pns += w * diff.max(0.0);
        }
        Ok(pns)
    }

    pub fn draw_latent(&self, rng: &mut impl Rng) -> Vec<u8> {
        self.pi
            .iter()
            .map(|&p| u8::from(rng.random::<f64>() < p))
            .collect()
    }

    /// Simulates `(x, y)` at fixed covariates and latents.
    pub fn simulate_unit(
        &self,
        z: &[f64],
        h: &[u8],
        regime: Regime,
        rng: &mut impl Rng,
    ) -> Result<(u8, u8)> {
        let px = match regime {
            Regime::Observational => self.propensity(z, h)?,
            Regime::Experimental => 0.5,
        };
        let x = u8::from(rng.random::<f64>() < px);
        let y = u8::from(rng.random::<f64>() < self.outcome_prob(x, z, h)?);
        Ok((x, y))
    }

    /// Rows resampled from `source`, fresh latents per row; emits `(z, x, y)`.
    pub fn sample(
        &self,
        source: &CovariateSource,
        n: usize,
        regime: Regime,
        seed: u64,
    ) -> Result<Dataset> {
        if source.is_empty() {
            return Err(Error::Empty("covariate source"));
        }
        ensure_dim("covariate source columns", self.d_obs(), source.dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Dataset::with_capacity(regime, source.dim, n);
        for _ in 0..n {
            let i = rng.random_range(0..source.len());
            let z = source.row(i);
            let h = self.draw_latent(&mut rng);
            let (x, y) = self.simulate_unit(z, &h, regime, &mut rng)?;
            out.push(z, x, y);
        }
        Ok(out)
    }

    /// Seeded default model for a covariate source.
    ///
    /// Coefficient magnitudes are normalized against the empirical spread of
    /// the covariates, then shrunk until the 99th percentile of `|logit|`
    /// over source rows and latent configurations is at most 6.
    pub fn generate(source: &CovariateSource, params: &HighDimDefaults) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::Empty("covariate source"));
        }
        let k = params.k;
        if k > MAX_LATENT {
            return Err(Error::EnumerationBudget { k, max: MAX_LATENT });
        }
        let d = source.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut unif = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();

        let pi: Vec<f64> = (0..k).map(|_| unif(0.2, 0.8)).collect();
        let mut alpha_conf: Vec<f64> = (0..k).map(|_| unif(-1.0, 1.0)).collect();
        let l1: f64 = alpha_conf.iter().map(|a| a.abs()).sum();
        if l1 > 0.0 {
            alpha_conf.iter_mut().for_each(|a| *a /= l1);
        }

        let n_active = d.min(params.propensity_support);
        let mut active: Vec<usize> = (0..d).collect();
        for i in 0..n_active {
            let j = i + (unif(0.0, 1.0) * (d - i) as f64) as usize;
            active.swap(i, j.min(d - 1));
        }
        let mut weights = vec![0.0; d];
        for &j in &active[..n_active] {
            weights[j] = unif(-1.0, 1.0);
        }
        let draw_direction = |unif: &mut dyn FnMut(f64, f64) -> f64| -> Vec<f64> {
            (0..d).map(|_| unif(-1.0, 1.0)).collect::<Vec<f64>>()
        };
        let mut arms = Vec::with_capacity(2);
        for _ in 0..2 {
            let mut arm = OutcomeArm::zeros(d, k);
            arm.intercept = unif(-0.5, 0.5);
            arm.linear = draw_direction(&mut unif);
            arm.latent = (0..k).map(|_| 1.5 * unif(-1.0, 1.0)).collect();
            arm.pairwise = (0..k * k.saturating_sub(1) / 2)
                .map(|_| 0.5 * unif(-1.0, 1.0))
                .collect();
            arm.interaction = (0..k).map(|_| 0.5 * unif(-1.0, 1.0)).collect();
            arm.directions = (0..k).map(|_| draw_direction(&mut unif)).collect();
            arms.push(arm);
        }

        let index_sd = |w: &[f64]| -> f64 {
            let vals: Vec<f64> = (0..source.len()).map(|i| dot(w, source.row(i))).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64).sqrt()
        };
        let normalize = |w: &mut Vec<f64>| {
            let sd = index_sd(w);
            if sd > 1e-12 {
                w.iter_mut().for_each(|v| *v /= sd);
            }
        };
        normalize(&mut weights);
        for arm in &mut arms {
            normalize(&mut arm.linear);
            for v in &mut arm.directions {
                normalize(v);
            }
        }
        let arms: [OutcomeArm; 2] = arms.try_into().expect("two arms");
        let mut scm = HighDimScm {
            pi,
            gamma: params.gamma,
            alpha_conf,
            eps_clip: params.eps_clip,
            base_propensity: BasePropensity::Logistic {
                intercept: 0.0,
                weights,
            },
            arms,
        };
        scm.cap_logits(source, 6.0)?;
        scm.validate()?;
        Ok(scm)
    }

    fn cap_logits(&mut self, source: &CovariateSource, cap: f64) -> Result<()> {
        let configs = self.latent_configs()?;
        let rows = source.len().min(500);
        let mut mags = Vec::with_capacity(rows * configs.len() * 2);
        for i in 0..rows {
            let z = source.row(i);
            for (h, _) in &configs {
                for x in 0..2 {
                    mags.push(self.outcome_logit(x, z, h)?.abs());
                }
            }
        }
        mags.sort_by(|a, b| a.total_cmp(b));
        let p99 = mags[((mags.len() as f64 * 0.99) as usize).min(mags.len() - 1)];
        for arm in &mut self.arms {
            let room = cap - arm.intercept.abs();
            if p99 > room && p99 > 0.0 {
                arm.scale_non_intercept(room / p99);
            }
        }
        Ok(())
    }
}

/// Knobs for [`HighDimScm::generate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HighDimDefaults {
    pub k: usize,
    pub gamma: f64,
    pub eps_clip: f64,
    /// Number of covariates entering the base propensity.
    pub propensity_support: usize,
    pub seed: u64,
}

impl Default for HighDimDefaults {
    fn default() -> Self {
        Self {
            k: 5,
            gamma: 0.4,
            eps_clip: 0.05,
            propensity_support: 10,
            seed: 2019,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateOrigin {
    File { path: String },
    Synthetic { rows: usize, cols: usize, seed: u64 },
}

/// Fixed pool of observed covariate rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateSource {
    pub dim: usize,
    /// Row-major `len × dim`.
    pub rows: Vec<f64>,
    pub origin: CovariateOrigin,
}

impl CovariateSource {
    /// Seeded standard-normal stand-in for a real covariate file.
    pub fn synthetic(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self {
            dim: cols,
            rows: data,
            origin: CovariateOrigin::Synthetic { rows, cols, seed },
        }
    }

    /// Headered, delimiter-separated, all-numeric columns.
    pub fn from_reader<R: Read>(reader: R, delimiter: u8, origin: CovariateOrigin) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .from_reader(reader);
        let dim = r.headers()?.len();
        if dim == 0 {
            return Err(Error::Empty("covariate header"));
        }
        let mut rows = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            ensure_dim("covariate row", dim, rec.len())?;
            for field in rec.iter() {
                rows.push(parse_float(field, line + 1)?);
            }
        }
        if rows.is_empty() {
            return Err(Error::Empty("covariate file"));
        }
        Ok(Self { dim, rows, origin })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let delimiter = match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("tab") => b'\t',
            _ => b',',
        };
        let file = std::fs::File::open(path)?;
        Self::from_reader(
            std::io::BufReader::new(file),
            delimiter,
            CovariateOrigin::File {
                path: path.display().to_string(),
            },
        )
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.rows.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::{check_feasibility, plug_in_interval};

    fn one_latent(p: f64) -> HighDimScm {
        HighDimScm {
            pi: vec![0.5],
            gamma: 1.0,
            alpha_conf: vec![1.0],
            eps_clip: 0.05,
            base_propensity: BasePropensity::Constant { value: p },
            arms: [OutcomeArm::zeros(2, 1), OutcomeArm::zeros(2, 1)],
        }
    }

    #[test]
    fn propensity_examples() {
        let scm = one_latent(0.5);
        assert!((scm.propensity(&[0.0, 0.0], &[1]).unwrap() - 0.95).abs() < 1e-15);
        let mut no_conf = one_latent(0.3);
        no_conf.gamma = 0.0;
        for h in [[0u8], [1u8]] {
            assert_eq!(no_conf.propensity(&[1.0, 2.0], &h).unwrap(), 0.3);
        }
        // averaging the unclipped propensity over h recovers p(z)
        let scm = one_latent(0.6);
        let avg: f64 = scm
            .latent_configs()
            .unwrap()
            .iter()
            .map(|(h, w)| w * scm.propensity_unclipped(&[0.0, 0.0], h).unwrap())
            .sum();
        assert!((avg - 0.6).abs() < 1e-15);
    }

    #[test]
    fn outcome_examples() {
        let mut scm = one_latent(0.5);
        assert_eq!(scm.outcome_prob(0, &[1.0, -1.0], &[1]).unwrap(), 0.5);
        scm.arms[1].intercept = 3f64.ln();
        assert!((scm.outcome_prob(1, &[1.0, -1.0], &[0]).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn single_latent_pns_by_hand() {
        let mut scm = one_latent(0.5);
        scm.pi = vec![0.3];
        scm.arms[1].latent = vec![2.0];
        scm.arms[0].intercept = 0.2;
        let z = [0.0, 0.0];
        // h = 1: centred 0.7, p1 = s(1.4), p0 = s(0.2); h = 0: centred -0.3, p1 = s(-0.6)
        let s = sigmoid;
        let expected = 0.3 * (s(1.4) - s(0.2)).max(0.0) + 0.7 * (s(-0.6) - s(0.2)).max(0.0);
        assert!((scm.true_pns_obs(&z).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn generated_model_is_valid_and_contained() {
        let src = CovariateSource::synthetic(300, 12, 1);
        let scm = HighDimScm::generate(&src, &HighDimDefaults::default()).unwrap();
        for i in 0..100 {
            let z = src.row(i);
            let a = scm.marginal_atoms(z).unwrap();
            let total: f64 = a.joint().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(check_feasibility(&a, 1e-12));
            let iv = plug_in_interval(&a);
            let p = scm.true_pns_obs(z).unwrap();
            assert!(iv.lower - 1e-12 <= p && p <= iv.upper + 1e-12);
        }
    }

    #[test]
    fn k_zero_atoms_match_direct_formula() {
        let src = CovariateSource::synthetic(50, 4, 2);
        let params = HighDimDefaults {
            k: 0,
            ..Default::default()
        };
        let scm = HighDimScm::generate(&src, &params).unwrap();
        let z = src.row(3);
        let px = scm.propensity(z, &[]).unwrap();
        let p1 = scm.outcome_prob(1, z, &[]).unwrap();
        let p0 = scm.outcome_prob(0, z, &[]).unwrap();
        let a = scm.marginal_atoms(z).unwrap();
        assert!((a.p11 - px * p1).abs() < 1e-15);
        assert!((a.p00 - (1.0 - px) * (1.0 - p0)).abs() < 1e-15);
        assert!((a.mu1 - p1).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let scm = one_latent(0.5);
        assert!(scm.propensity(&[0.0], &[1]).is_err());
        assert!(scm.outcome_prob(1, &[0.0, 0.0], &[1, 0]).is_err());
        let mut big = scm.clone();
        big.pi = vec![0.5; 21];
        assert!(matches!(
            big.marginal_atoms(&[0.0, 0.0]),
            Err(Error::EnumerationBudget { .. })
        ));
        let empty = CovariateSource {
            dim: 2,
            rows: vec![],
            origin: CovariateOrigin::Synthetic {
                rows: 0,
                cols: 2,
                seed: 0,
            },
        };
        assert!(scm.sample(&empty, 10, Regime::Experimental, 1).is_err());
    }

    #[test]
    fn csv_ingestion() {
        let text = "a,b,c\n1,2,3\n4.5,-1,0\n";
        let src = CovariateSource::from_reader(
            text.as_bytes(),
            b',',
            CovariateOrigin::File { path: "mem".into() },
        )
        .unwrap();
        assert_eq!(src.dim, 3);
        assert_eq!(src.len(), 2);
        assert_eq!(src.row(1), &[4.5, -1.0, 0.0]);
        let bad = "a,b\n1,x\n";
        assert!(CovariateSource::from_reader(
            bad.as_bytes(),
            b',',
            CovariateOrigin::File { path: "mem".into() }
        )
        .is_err());
    }
}
