//! Unconstrained plug-in learners.
//!
//! Both learners fit the observational joint with a separate four-class
//! network and the interventional means with sigmoid outcome networks fitted
//! on experimental rows. Nothing ties the two together, so the resulting
//! atoms may violate the compatibility constraints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::bounds::{check_feasibility, plug_in_interval, AtomVector, Method, PnsInterval, AUDIT_TOL};
use crate::data::{Dataset, GroupedData, Standardizer};
use crate::error::{ensure_dim, Error, Result};
use crate::mlp::MlpLayout;
use crate::neural::{prepare_training, softmax4, Architecture, PROB_EPS};
use crate::optim::{fit, TrainConfig};
use crate::scm_highdim::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// One outcome network with treatment as an extra input.
    SLearner,
    /// One outcome network per arm.
    TLearner,
}

impl BaselineKind {
    pub fn method(self) -> Method {
        match self {
            BaselineKind::SLearner => Method::SLearner,
            BaselineKind::TLearner => Method::TLearner,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    pub kind: BaselineKind,
    pub arch: Architecture,
    pub standardizer: Standardizer,
    pub joint: Vec<f64>,
    /// One network for the S-learner, `[control, treated]` for the T-learner.
    pub outcome: Vec<Vec<f64>>,
}

/// A point prediction with its feasibility audit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlugInPrediction {
    pub interval: PnsInterval,
    pub atoms: AtomVector,
    /// Atoms fail the compatibility constraints at the audit tolerance.
    pub violation: bool,
}

fn joint_layout(arch: &Architecture) -> MlpLayout {
    arch.layout_with_outputs(4)
}

fn outcome_layout(arch: &Architecture, input_dim: usize) -> MlpLayout {
    Architecture::new(input_dim, arch.hidden, arch.depth).layout_with_outputs(1)
}

/// Cross-entropy of the joint cells on observational counts.
fn joint_objective(layout: &MlpLayout, params: &[f64], batch: &GroupedData) -> Result<(f64, Vec<f64>)> {
    let n = batch.n_obs();
    let mut grad = vec![0.0; params.len()];
    if n == 0.0 {
        return Ok((0.0, grad));
    }
    let cache = layout.forward(params, &batch.z, batch.len())?;
    let mut loss = 0.0;
    let mut cot = Vec::with_capacity(batch.len() * 4);
    for (row, counts) in cache.output().chunks_exact(4).zip(&batch.obs) {
        let p = softmax4(&[row[0], row[1], row[2], row[3]]);
        let total: f64 = counts.iter().sum();
        for c in 0..4 {
            if counts[c] > 0.0 {
                loss -= counts[c] * p[c].clamp(PROB_EPS, 1.0 - PROB_EPS).ln() / n;
            }
            cot.push((total * p[c] - counts[c]) / n);
        }
    }
    layout.backward(params, &cache, &cot, &mut grad, 0, false);
    Ok((loss, grad))
}

/// Binary cross-entropy of one sigmoid output. Counts of `y = 1` are read
/// from cells 1 and 3 of the experimental block, `y = 0` from cells 0 and 2.
fn outcome_objective(
    layout: &MlpLayout,
    params: &[f64],
    batch: &GroupedData,
) -> Result<(f64, Vec<f64>)> {
    let n = batch.n_exp();
    let mut grad = vec![0.0; params.len()];
    if n == 0.0 {
        return Ok((0.0, grad));
    }
    let cache = layout.forward(params, &batch.z, batch.len())?;
    let mut loss = 0.0;
    let mut cot = Vec::with_capacity(batch.len());
    for (&logit, e) in cache.output().iter().zip(&batch.exp) {
        let mu = sigmoid(logit).clamp(PROB_EPS, 1.0 - PROB_EPS);
        let (n1, n0) = (e[1] + e[3], e[0] + e[2]);
        loss -= (n1 * mu.ln() + n0 * (1.0 - mu).ln()) / n;
        cot.push(((n1 + n0) * sigmoid(logit) - n1) / n);
    }
    layout.backward(params, &cache, &cot, &mut grad, 0, false);
    Ok((loss, grad))
}

/// Keeps only the experimental counts of arm `x`.
fn arm_data(data: &GroupedData, x: usize) -> GroupedData {
    let idx: Vec<usize> = (0..data.len())
        .filter(|&g| data.exp[g][2 * x] + data.exp[g][2 * x + 1] > 0.0)
        .collect();
    let mut out = data.gather(&idx);
    for (o, e) in out.obs.iter_mut().zip(out.exp.iter_mut()) {
        *o = [0.0; 4];
        let keep = [e[2 * x], e[2 * x + 1]];
        *e = [0.0; 4];
        e[2 * x] = keep[0];
        e[2 * x + 1] = keep[1];
    }
    out
}

/// Rows `(z, x)` for every populated experimental arm.
fn augmented_data(data: &GroupedData) -> GroupedData {
    let d = data.dim;
    let mut out = GroupedData::empty(d + 1);
    for g in 0..data.len() {
        for x in 0..2 {
            let (n0, n1) = (data.exp[g][2 * x], data.exp[g][2 * x + 1]);
            if n0 + n1 > 0.0 {
                out.z.extend_from_slice(data.row(g));
                out.z.push(x as f64);
                out.obs.push([0.0; 4]);
                let mut e = [0.0; 4];
                e[2 * x] = n0;
                e[2 * x + 1] = n1;
                out.exp.push(e);
            }
        }
    }
    out
}

fn observational_only(data: &GroupedData) -> GroupedData {
    let idx: Vec<usize> = (0..data.len()).filter(|&g| data.obs[g].iter().sum::<f64>() > 0.0).collect();
    let mut out = data.gather(&idx);
    out.exp.iter_mut().for_each(|e| *e = [0.0; 4]);
    out
}

fn train_net<F>(layout: &MlpLayout, data: &GroupedData, cfg: &TrainConfig, seed: u64, objective: F) -> Result<Vec<f64>>
where
    F: Fn(&MlpLayout, &[f64], &GroupedData) -> Result<(f64, Vec<f64>)>,
{
    if data.is_empty() {
        return Err(Error::Empty("baseline training data"));
    }
    let mut params = layout.init(&mut ChaCha8Rng::seed_from_u64(seed));
    fit(&mut params, data, cfg, |p, b| objective(layout, p, b), |_| Ok(None))?;
    Ok(params)
}

/// Fits either learner on the same training split the anchored network uses.
pub fn fit_baseline(
    kind: BaselineKind,
    init_seed: u64,
    obs: &Dataset,
    exp: &Dataset,
    hidden: usize,
    depth: usize,
    cfg: &TrainConfig,
) -> Result<BaselineModel> {
    let (standardizer, data, _) = prepare_training(obs, exp, cfg)?;
    let arch = Architecture::new(obs.dim, hidden, depth);
    let joint = train_net(
        &joint_layout(&arch),
        &observational_only(&data),
        cfg,
        init_seed,
        joint_objective,
    )?;
    let outcome = match kind {
        BaselineKind::SLearner => vec![train_net(
            &outcome_layout(&arch, arch.input_dim + 1),
            &augmented_data(&data),
            cfg,
            init_seed ^ 0x51,
            outcome_objective,
        )?],
        BaselineKind::TLearner => (0..2)
            .map(|x| {
                train_net(
                    &outcome_layout(&arch, arch.input_dim),
                    &arm_data(&data, x),
                    cfg,
                    init_seed ^ (0x70 + x as u64),
                    outcome_objective,
                )
            })
            .collect::<Result<_>>()?,
    };
    Ok(BaselineModel {
        kind,
        arch,
        standardizer,
        joint,
        outcome,
    })
}

pub fn fit_s_learner(init_seed: u64, obs: &Dataset, exp: &Dataset, hidden: usize, depth: usize, cfg: &TrainConfig) -> Result<BaselineModel> {
    fit_baseline(BaselineKind::SLearner, init_seed, obs, exp, hidden, depth, cfg)
}

pub fn fit_t_learner(init_seed: u64, obs: &Dataset, exp: &Dataset, hidden: usize, depth: usize, cfg: &TrainConfig) -> Result<BaselineModel> {
    fit_baseline(BaselineKind::TLearner, init_seed, obs, exp, hidden, depth, cfg)
}

impl BaselineModel {
    /// Raw atoms at a block of raw covariate rows.
    pub fn predict_atoms(&self, rows: &[f64]) -> Result<Vec<AtomVector>> {
        let d = self.arch.input_dim;
        if rows.len() % d != 0 {
            return Err(Error::DimensionMismatch {
                what: "covariate block",
                expected: d,
                found: rows.len() % d,
            });
        }
        let n = rows.len() / d;
        let z = self.standardizer.transform_rows(rows);
        let joint = joint_layout(&self.arch).forward(&self.joint, &z, n)?;
        let (mu0, mu1): (Vec<f64>, Vec<f64>) = match self.kind {
            BaselineKind::SLearner => {
                let layout = outcome_layout(&self.arch, d + 1);
                let mut out = [Vec::new(), Vec::new()];
                for (x, dst) in out.iter_mut().enumerate() {
                    let mut aug = Vec::with_capacity(n * (d + 1));
                    for row in z.chunks_exact(d) {
                        aug.extend_from_slice(row);
                        aug.push(x as f64);
                    }
                    let c = layout.forward(&self.outcome[0], &aug, n)?;
                    *dst = c.output().iter().map(|&l| sigmoid(l)).collect();
                }
                let [a, b] = out;
                (a, b)
            }
            BaselineKind::TLearner => {
                let layout = outcome_layout(&self.arch, d);
                let arm = |x: usize| -> Result<Vec<f64>> {
                    let c = layout.forward(&self.outcome[x], &z, n)?;
                    Ok(c.output().iter().map(|&l| sigmoid(l)).collect())
                };
                (arm(0)?, arm(1)?)
            }
        };
        Ok(joint
            .output()
            .chunks_exact(4)
            .enumerate()
            .map(|(i, l)| AtomVector::from_joint(softmax4(&[l[0], l[1], l[2], l[3]]), mu0[i], mu1[i]))
            .collect())
    }
}

/// Plug-in interval from possibly incompatible atoms, with the audit flag.
pub fn plug_in_from_atoms(atoms: AtomVector, method: Method) -> PlugInPrediction {
    PlugInPrediction {
        interval: plug_in_interval(&atoms).with_method(method),
        atoms,
        violation: !check_feasibility(&atoms, AUDIT_TOL),
    }
}

pub fn plug_in_predict(model: &BaselineModel, z_raw: &[f64]) -> Result<PlugInPrediction> {
    ensure_dim("covariate row", model.arch.input_dim, z_raw.len())?;
    Ok(plug_in_from_atoms(model.predict_atoms(z_raw)?[0], model.kind.method()))
}

/// Empirical cell frequencies per distinct covariate value.
#[derive(Debug, Clone, Default)]
pub struct CellFrequency {
    cells: HashMap<Vec<u64>, ([f64; 4], [f64; 4])>,
}

fn key(z: &[f64]) -> Vec<u64> {
    z.iter().map(|v| v.to_bits()).collect()
}

impl CellFrequency {
    pub fn fit(obs: &Dataset, exp: &Dataset) -> Result<Self> {
        ensure_dim("experimental covariates", obs.dim, exp.dim)?;
        let mut cells: HashMap<Vec<u64>, ([f64; 4], [f64; 4])> = HashMap::new();
        for s in obs.samples() {
            cells.entry(key(s.z_obs)).or_default().0[(2 * s.x + s.y) as usize] += 1.0;
        }
        for s in exp.samples() {
            cells.entry(key(s.z_obs)).or_default().1[(2 * s.x + s.y) as usize] += 1.0;
        }
        Ok(Self { cells })
    }

    /// Frequencies at `z`, or `None` when some regime or arm is unobserved.
    pub fn atoms(&self, z: &[f64]) -> Option<AtomVector> {
        let (o, e) = self.cells.get(&key(z))?;
        let n_obs: f64 = o.iter().sum();
        let arm = |x: usize| {
            let n = e[2 * x] + e[2 * x + 1];
            (n > 0.0).then(|| e[2 * x + 1] / n)
        };
        if n_obs == 0.0 {
            return None;
        }
        Some(AtomVector::from_joint(o.map(|c| c / n_obs), arm(0)?, arm(1)?))
    }

    pub fn predict(&self, z: &[f64]) -> Option<PlugInPrediction> {
        self.atoms(z).map(|a| plug_in_from_atoms(a, Method::CellFrequency))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Regime;

    #[test]
    fn oracle_atoms_give_sharp_bounds_and_no_violation() {
        let atoms = AtomVector::from_joint([0.2, 0.3, 0.1, 0.4], 0.45, 0.6);
        let p = plug_in_from_atoms(atoms, Method::PlugIn);
        assert!(!p.violation);
        assert_eq!(p.interval, plug_in_interval(&atoms));
    }

    #[test]
    fn incompatible_atoms_are_flagged() {
        // mu1 below p11
        let atoms = AtomVector::from_joint([0.2, 0.3, 0.1, 0.4], 0.45, 0.3);
        assert!(plug_in_from_atoms(atoms, Method::SLearner).violation);
    }

    #[test]
    fn arm_split_keeps_only_one_arm() {
        let mut g = GroupedData::empty(1);
        g.z = vec![0.0, 1.0];
        g.obs = vec![[1.0; 4], [1.0; 4]];
        g.exp = vec![[1.0, 2.0, 0.0, 0.0], [3.0, 0.0, 4.0, 5.0]];
        let a1 = arm_data(&g, 1);
        assert_eq!(a1.len(), 1);
        assert_eq!(a1.exp[0], [0.0, 0.0, 4.0, 5.0]);
        assert_eq!(a1.n_obs(), 0.0);
        let aug = augmented_data(&g);
        assert_eq!(aug.len(), 3);
        assert_eq!(aug.row(2), &[1.0, 1.0]);
    }

    #[test]
    fn cell_frequency_counts() {
        let mut obs = Dataset::new(Regime::Observational, 1);
        let mut exp = Dataset::new(Regime::Experimental, 1);
        for (x, y) in [(0, 0), (0, 1), (1, 1), (1, 1)] {
            obs.push(&[1.0], x, y);
        }
        for (x, y) in [(0, 1), (0, 0), (1, 1)] {
            exp.push(&[1.0], x, y);
        }
        let cf = CellFrequency::fit(&obs, &exp).unwrap();
        let a = cf.atoms(&[1.0]).unwrap();
        assert_eq!(a.joint(), [0.25, 0.25, 0.0, 0.5]);
        assert_eq!((a.mu0, a.mu1), (0.5, 1.0));
        assert!(cf.atoms(&[0.0]).is_none());
    }
}
