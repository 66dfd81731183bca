//! Binary-covariate structural causal model with an exact enumeration oracle.
//!
//! Covariates, treatment noise and outcome noise are independent Bernoulli
//! draws. Treatment is `1{M_X(z) + e_X > 0.5}` and the outcome is a piecewise
//! indicator of `C·x + M_Y(z) + e_Y`. The trailing `n_hidden` covariates are
//! confounders that are never emitted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{check_feasibility, AtomVector};
use crate::data::{Dataset, Regime};
use crate::error::{ensure_dim, Error, Result};

pub const LI_MODEL_1: &str = "li-model-1";

/// `1{0 < Cx + m + e < 1} + 1{1 < Cx + m + e < 2}`; boundary values map to 0.
pub fn outcome_fn(c_effect: f64, x: u8, m: f64, e: u8) -> u8 {
    let v = c_effect * f64::from(x) + m + f64::from(e);
    u8::from(0.0 < v && v < 1.0) + u8::from(1.0 < v && v < 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowDimScm {
    /// Bernoulli means of the covariates.
    pub pi_z: Vec<f64>,
    pub pi_x: f64,
    pub pi_y: f64,
    /// Treatment index coefficients.
    pub alpha: Vec<f64>,
    /// Outcome index coefficients.
    pub beta: Vec<f64>,
    pub c_effect: f64,
    /// Number of trailing covariates hidden from the learner.
    pub n_hidden: usize,
}

/// Which oracle quantity to marginalize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleQuery {
    Atoms,
    Pns,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleValue {
    Atoms(AtomVector),
    Pns(f64),
}

impl LowDimScm {
    /// Model 1 of the Li–Pearl benchmark: 20 covariates, last 5 hidden.
    pub fn li_model_1() -> Self {
        Self {
            pi_z: vec![
                0.3529, 0.4610, 0.3317, 0.8855, 0.0170, 0.3808, 0.0281, 0.2208, 0.6177, 0.9820,
                0.1420, 0.8336, 0.8829, 0.5421, 0.0850, 0.6454, 0.8638, 0.4605, 0.3140, 0.6859,
            ],
            pi_x: 0.6017,
            pi_y: 0.4977,
            alpha: vec![
                0.2592, -0.6581, -0.7503, 0.1629, 0.6520, -0.0893, 0.4215, -0.4431, 0.8026,
                -0.2257, 0.7166, 0.0651, -0.2207, 0.1564, -0.5069, -0.7071, 0.4188, -0.0822,
                0.7693, -0.5116,
            ],
            beta: vec![
                -0.7929, 0.7600, 0.5544, 0.5040, -0.5272, 0.3786, 0.2693, 0.6716, 0.3960, 0.3252,
                0.6578, 0.8017, 0.0908, -0.0714, -0.0691, -0.2226, -0.8484, -0.5843, -0.3249,
                0.6256,
            ],
            c_effect: -0.7795,
            n_hidden: 5,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        (name == LI_MODEL_1).then(Self::li_model_1)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.pi_z.len();
        ensure_dim("alpha", d, self.alpha.len())?;
        ensure_dim("beta", d, self.beta.len())?;
        let open_unit = |p: f64| p > 0.0 && p < 1.0;
        if !self.pi_z.iter().all(|&p| open_unit(p)) || !open_unit(self.pi_x) || !open_unit(self.pi_y)
        {
            return Err(Error::InvalidInput(
                "Bernoulli means must lie strictly inside (0, 1)".into(),
            ));
        }
        if self.n_hidden >= d {
            return Err(Error::InvalidInput(format!(
                "n_hidden = {} must be smaller than d = {d}",
                self.n_hidden
            )));
        }
        if self.n_hidden > 20 {
            return Err(Error::EnumerationBudget {
                k: self.n_hidden,
                max: 20,
            });
        }
        if !self.c_effect.is_finite()
            || self.alpha.iter().chain(&self.beta).any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("SCM coefficients"));
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.pi_z.len()
    }

    pub fn d_obs(&self) -> usize {
        self.d() - self.n_hidden
    }

    fn check_full(&self, z: &[u8]) -> Result<()> {
        ensure_dim("full covariate vector", self.d(), z.len())?;
        check_binary(z)
    }

    fn index(coef: &[f64], z: &[u8]) -> f64 {
        coef.iter()
            .zip(z)
            .filter(|(_, &zj)| zj == 1)
            .map(|(c, _)| c)
            .sum()
    }

    /// Realized treatment `1{M_X(z) + e_X > 0.5}`.
    pub fn treatment(&self, z: &[u8], e_x: u8) -> u8 {
        u8::from(Self::index(&self.alpha, z) + f64::from(e_x) > 0.5)
    }

    pub fn outcome(&self, x: u8, z: &[u8], e_y: u8) -> u8 {
        outcome_fn(self.c_effect, x, Self::index(&self.beta, z), e_y)
    }

    fn bern(p: f64, v: u8) -> f64 {
        if v == 1 {
            p
        } else {
            1.0 - p
        }
    }

    /// Exact atoms at a full covariate vector by enumerating `(e_X, e_Y)`.
    pub fn enumerate_atoms(&self, z: &[u8]) -> Result<AtomVector> {
        self.check_full(z)?;
        let m_y = Self::index(&self.beta, z);
        let mut mu = [0.0; 2];
        for x in 0..2u8 {
            for e_y in 0..2u8 {
                if outcome_fn(self.c_effect, x, m_y, e_y) == 1 {
                    mu[x as usize] += Self::bern(self.pi_y, e_y);
                }
            }
        }
        let mut joint = [0.0; 4];
        for e_x in 0..2u8 {
            let x = self.treatment(z, e_x);
            for e_y in 0..2u8 {
                let y = outcome_fn(self.c_effect, x, m_y, e_y);
                joint[(2 * x + y) as usize] +=
                    Self::bern(self.pi_x, e_x) * Self::bern(self.pi_y, e_y);
            }
        }
        let atoms = AtomVector::from_joint(joint, mu[0], mu[1]);
        debug_assert!(check_feasibility(&atoms, 1e-12));
        Ok(atoms)
    }

    /// Exact `P(Y_1 = 1, Y_0 = 0 | z)` at a full covariate vector.
    pub fn true_pns(&self, z: &[u8]) -> Result<f64> {
        self.check_full(z)?;
        let m_y = Self::index(&self.beta, z);
        Ok((0..2u8)
            .filter(|&e_y| {
                outcome_fn(self.c_effect, 1, m_y, e_y) == 1
                    && outcome_fn(self.c_effect, 0, m_y, e_y) == 0
            })
            .map(|e_y| Self::bern(self.pi_y, e_y))
            .sum())
    }

    /// Hidden configurations with their probabilities, in binary counting
    /// order (first hidden coordinate is the most significant bit).
    pub fn hidden_configs(&self) -> Vec<(Vec<u8>, f64)> {
        let k = self.n_hidden;
        let pis = &self.pi_z[self.d_obs()..];
        (0..1usize << k)
            .map(|code| {
                let h: Vec<u8> = (0..k).map(|j| ((code >> (k - 1 - j)) & 1) as u8).collect();
                let w = h.iter().zip(pis).map(|(&hj, &p)| Self::bern(p, hj)).product();
                (h, w)
            })
            .collect()
    }

    /// Weighted sum of `query(z_obs, h)` over hidden configurations.
    pub fn marginalize(&self, z_obs: &[u8], query: OracleQuery) -> Result<OracleValue> {
        ensure_dim("observed covariate vector", self.d_obs(), z_obs.len())?;
        check_binary(z_obs)?;
        let mut full = z_obs.to_vec();
        full.resize(self.d(), 0);
        let mut atoms = [0.0; 6];
        let mut pns = 0.0;
        for (h, w) in self.hidden_configs() {
            full[self.d_obs()..].copy_from_slice(&h);
            match query {
                OracleQuery::Atoms => {
                    let a = self.enumerate_atoms(&full)?.to_array();
                    for (acc, v) in atoms.iter_mut().zip(a) {
                        *acc += w * v;
                    }
                }
                OracleQuery::Pns => pns += w * self.true_pns(&full)?,
            }
        }
        Ok(match query {
            OracleQuery::Atoms => OracleValue::Atoms(AtomVector::from_array(atoms)),
            OracleQuery::Pns => OracleValue::Pns(pns),
        })
    }

    pub fn marginal_atoms(&self, z_obs: &[u8]) -> Result<AtomVector> {
        match self.marginalize(z_obs, OracleQuery::Atoms)? {
            OracleValue::Atoms(a) => Ok(a),
            OracleValue::Pns(_) => unreachable!(),
        }
    }

    pub fn marginal_pns(&self, z_obs: &[u8]) -> Result<f64> {
        match self.marginalize(z_obs, OracleQuery::Pns)? {
            OracleValue::Pns(p) => Ok(p),
            OracleValue::Atoms(_) => unreachable!(),
        }
    }

    /// Draws a full covariate vector.
    pub fn draw_z(&self, rng: &mut impl Rng) -> Vec<u8> {
        self.pi_z
            .iter()
            .map(|&p| u8::from(rng.random::<f64>() < p))
            .collect()
    }

    /// Simulates `(x, y)` for one unit at a full covariate vector.
    pub fn simulate_unit(&self, z: &[u8], regime: Regime, rng: &mut impl Rng) -> (u8, u8) {
        let e_x = u8::from(rng.random::<f64>() < self.pi_x);
        let e_y = u8::from(rng.random::<f64>() < self.pi_y);
        let x = match regime {
            Regime::Observational => self.treatment(z, e_x),
            Regime::Experimental => u8::from(rng.random::<f64>() < 0.5),
        };
        (x, self.outcome(x, z, e_y))
    }

    /// `n` units from one regime; only observed covariates are emitted.
    pub fn sample_dataset(&self, n: usize, regime: Regime, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::InvalidInput("sample size must be at least 1".into()));
        }
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_obs = self.d_obs();
        let mut out = Dataset::with_capacity(regime, d_obs, n);
        let mut row = vec![0.0; d_obs];
        for _ in 0..n {
            let z = self.draw_z(&mut rng);
            let (x, y) = self.simulate_unit(&z, regime, &mut rng);
            for (dst, &v) in row.iter_mut().zip(&z[..d_obs]) {
                *dst = f64::from(v);
            }
            out.push(&row, x, y);
        }
        Ok(out)
    }

    /// Draws observed covariate vectors from the population.
    pub fn sample_observed_points(&self, n: usize, seed: u64) -> Vec<Vec<u8>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut z = self.draw_z(&mut rng);
                z.truncate(self.d_obs());
                z
            })
            .collect()
    }
}

fn check_binary(z: &[u8]) -> Result<()> {
    if z.iter().all(|&v| v <= 1) {
        Ok(())
    } else {
        Err(Error::InvalidInput("covariates must be binary".into()))
    }
}

/// Converts a 0/1 float row to bits.
pub fn to_bits(z: &[f64]) -> Result<Vec<u8>> {
    z.iter()
        .map(|&v| {
            if v == 0.0 {
                Ok(0)
            } else if v == 1.0 {
                Ok(1)
            } else {
                Err(Error::InvalidInput(format!(
                    "expected binary covariate, found {v}"
                )))
            }
        })
        .collect()
}
