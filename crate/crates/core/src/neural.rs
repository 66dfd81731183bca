//! Anchored multi-head network.
//!
//! A ReLU backbone feeds one linear layer with six outputs: four joint
//! logits `(00, 01, 10, 11)` and two auxiliary logits `delta_0, delta_1`. The
//! joint cells come from a softmax and each interventional probability is
//! placed inside its feasible interval,
//!
//! ```text
//! mu_x = p_x1 + (1 - p_x0 - p_x1) * sigmoid(delta_x)
//! ```
//!
//! so the compatibility constraints hold for every parameter value.
//!
//! Training uses split losses: cross-entropy of the joint cells on
//! observational rows and binary cross-entropy of `mu_X` on experimental rows.
//! In [`GradientMode::Blocked`] the interval endpoints are treated as constants
//! when differentiating the experimental loss, so that loss only moves the
//! auxiliary head and the backbone through the auxiliary path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::bounds::AtomVector;
use crate::data::{Dataset, GroupedData, Standardizer};
use crate::error::{ensure_dim, Error, Result};
use crate::mlp::{ForwardCache, MlpLayout};
use crate::optim::{fit, TrainConfig, TrainHistory};
use crate::scm_highdim::sigmoid;

/// Probability clip applied before every logarithm.
pub const PROB_EPS: f64 = 1e-10;

/// Number of network outputs: four joint logits and two auxiliary logits.
pub const N_OUTPUTS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    /// Uniform backbone width.
    pub hidden: usize,
    /// Number of ReLU hidden layers.
    pub depth: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden: usize, depth: usize) -> Self {
        Self {
            input_dim,
            hidden,
            depth,
        }
    }

    /// Backbone widths `[in, h, .., h]` (depth ReLU layers, then one linear
    /// projection to width `h`) followed by `out_dim` linear outputs.
    pub fn widths(&self, out_dim: usize) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(std::iter::repeat_n(self.hidden, self.depth + 1));
        w.push(out_dim);
        w
    }

    /// Layout with ReLU on the first `depth` layers only.
    pub fn layout_with_outputs(&self, out_dim: usize) -> MlpLayout {
        let widths = self.widths(out_dim);
        let n = widths.len() - 1;
        MlpLayout::new(
            (0..n)
                .map(|i| crate::mlp::LayerShape {
                    fan_in: widths[i],
                    fan_out: widths[i + 1],
                    activation: if i < self.depth {
                        crate::mlp::Activation::Relu
                    } else {
                        crate::mlp::Activation::Identity
                    },
                })
                .collect(),
        )
        .expect("consistent widths")
    }

    pub fn layout(&self) -> MlpLayout {
        self.layout_with_outputs(N_OUTPUTS)
    }

    pub fn n_params(&self) -> usize {
        self.layout().n_params()
    }

    /// Index of the head layer in the layout.
    pub fn head_layer(&self) -> usize {
        self.depth + 1
    }
}

/// Which parameters a quantity depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Joint,
    Aux,
}

/// All weights of the backbone and the three heads, flat.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchoredParams {
    pub arch: Architecture,
    pub values: Vec<f64>,
}

impl AnchoredParams {
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            arch,
            values: arch.layout().init(&mut rng),
        }
    }

    pub fn from_values(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        ensure_dim("anchored parameter vector", arch.n_params(), values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("anchored parameters"));
        }
        Ok(Self { arch, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Contiguous range of the final linear layer (all three heads).
    pub fn head_range(&self) -> Range<usize> {
        self.arch.layout().layer_range(self.arch.head_layer())
    }

    /// Indices of the parameters belonging to one head.
    pub fn head_indices(&self, head: Head) -> Vec<usize> {
        let layout = self.arch.layout();
        let l = self.arch.head_layer();
        let fan_in = self.arch.hidden;
        let rows: Range<usize> = match head {
            Head::Joint => 0..4,
            Head::Aux => 4..6,
        };
        let w = layout.weight_range(l);
        let b = layout.bias_range(l);
        let mut idx = Vec::new();
        for r in rows.clone() {
            idx.extend(w.start + r * fan_in..w.start + (r + 1) * fan_in);
        }
        idx.extend(rows.map(|r| b.start + r));
        idx
    }
}

/// Atoms and raw head outputs at one covariate row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOutput {
    pub atoms: AtomVector,
    pub logits: [f64; 4],
    pub deltas: [f64; 2],
}

/// Max-subtracted softmax.
pub fn softmax4(logits: &[f64; 4]) -> [f64; 4] {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e = [0.0; 4];
    let mut s = 0.0;
    for (dst, &l) in e.iter_mut().zip(logits) {
        *dst = (l - m).exp();
        s += *dst;
    }
    e.map(|v| v / s)
}

/// Maps the six head outputs to feasible atoms.
pub fn anchor(logits: [f64; 4], deltas: [f64; 2]) -> ForwardOutput {
    let p = softmax4(&logits);
    // feasible-interval width for arm x is the mass of the other arm
    let mu0 = p[1] + (p[2] + p[3]) * sigmoid(deltas[0]);
    let mu1 = p[3] + (p[0] + p[1]) * sigmoid(deltas[1]);
    ForwardOutput {
        atoms: AtomVector::from_joint(p, mu0, mu1),
        logits,
        deltas,
    }
}

fn outputs_from_row(row: &[f64]) -> ForwardOutput {
    anchor([row[0], row[1], row[2], row[3]], [row[4], row[5]])
}

/// Per-row outputs of a batched pass.
pub fn outputs(cache: &ForwardCache) -> Vec<ForwardOutput> {
    cache
        .output()
        .chunks_exact(N_OUTPUTS)
        .map(outputs_from_row)
        .collect()
}

/// Forward pass at one standardized covariate row.
pub fn forward(params: &AnchoredParams, z: &[f64]) -> Result<ForwardOutput> {
    ensure_dim("covariate row", params.arch.input_dim, z.len())?;
    let cache = params.arch.layout().forward(&params.values, z, 1)?;
    Ok(outputs_from_row(cache.output()))
}

/// Forward pass over a row-major block of standardized covariates.
pub fn forward_batch(params: &AnchoredParams, z: &[f64]) -> Result<Vec<ForwardOutput>> {
    let d = params.arch.input_dim;
    if d == 0 || z.len() % d != 0 {
        return Err(Error::DimensionMismatch {
            what: "covariate block",
            expected: d,
            found: z.len(),
        });
    }
    let cache = params.arch.layout().forward(&params.values, z, z.len() / d)?;
    Ok(outputs(&cache))
}

/// `d(p00, p01, p10, p11, mu0, mu1) / d(logit_0..3, delta_0, delta_1)`,
/// row per atom, without gradient blocking.
pub fn atom_jacobian(out: &ForwardOutput) -> [[f64; 6]; 6] {
    let p = out.atoms.joint();
    let mut j = [[0.0; 6]; 6];
    // softmax block
    for c in 0..4 {
        for k in 0..4 {
            j[c][k] = p[c] * (f64::from(u8::from(c == k)) - p[k]);
        }
    }
    for x in 0..2 {
        let s = sigmoid(out.deltas[x]);
        let a_cell = 2 * x + 1;
        let other = [2 * (1 - x), 2 * (1 - x) + 1];
        let width = p[other[0]] + p[other[1]];
        let row = 4 + x;
        for k in 0..4 {
            j[row][k] = j[a_cell][k] + s * (j[other[0]][k] + j[other[1]][k]);
        }
        j[row][4 + x] = width * s * (1.0 - s);
    }
    j
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Experimental loss treats the feasible-interval endpoints as constants.
    Blocked,
    /// Exact gradient of the total loss.
    Full,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValue {
    pub obs: f64,
    pub exp: f64,
}

impl LossValue {
    pub fn total(&self) -> f64 {
        self.obs + self.exp
    }
}

fn clip_prob(p: f64) -> (f64, bool) {
    if p < PROB_EPS {
        (PROB_EPS, true)
    } else if p > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, true)
    } else {
        (p, false)
    }
}

/// Normalizers `(n_obs, n_exp)` for a batch; zero means the term is absent.
fn normalizers(batch: &GroupedData) -> (f64, f64) {
    (batch.n_obs(), batch.n_exp())
}

/// Loss of one group and its cotangent with respect to the six head outputs.
///
/// `anchors`, when given, supplies the `(p_x1, width_x)` pairs used inside the
/// experimental loss in place of the ones implied by `out`.
fn group_loss(
    out: &ForwardOutput,
    obs: &[f64; 4],
    exp: &[f64; 4],
    norm: (f64, f64),
    mode: GradientMode,
    anchors: Option<&ForwardOutput>,
) -> (LossValue, [f64; 6]) {
    let p = out.atoms.joint();
    let mut loss = LossValue::default();
    let mut g_p = [0.0; 4];
    let mut g_delta = [0.0; 2];
    if norm.0 > 0.0 {
        for c in 0..4 {
            if obs[c] > 0.0 {
                let (pc, clipped) = clip_prob(p[c]);
                loss.obs -= obs[c] * pc.ln() / norm.0;
                if !clipped {
                    g_p[c] -= obs[c] / pc / norm.0;
                }
            }
        }
    }
    if norm.1 > 0.0 {
        let anchor_p = anchors.map(|a| a.atoms.joint()).unwrap_or(p);
        for x in 0..2 {
            let n1 = exp[2 * x + 1];
            let n0 = exp[2 * x];
            if n1 == 0.0 && n0 == 0.0 {
                continue;
            }
            let other = [2 * (1 - x), 2 * (1 - x) + 1];
            let base = anchor_p[2 * x + 1];
            let width = anchor_p[other[0]] + anchor_p[other[1]];
            let s = sigmoid(out.deltas[x]);
            let mu = base + width * s;
            let (mu_c, clipped) = clip_prob(mu);
            loss.exp -= (n1 * mu_c.ln() + n0 * (1.0 - mu_c).ln()) / norm.1;
            if clipped {
                continue;
            }
            let d_mu = (-n1 / mu_c + n0 / (1.0 - mu_c)) / norm.1;
            g_delta[x] += d_mu * width * s * (1.0 - s);
            if mode == GradientMode::Full && anchors.is_none() {
                g_p[2 * x + 1] += d_mu;
                g_p[other[0]] += d_mu * s;
                g_p[other[1]] += d_mu * s;
            }
        }
    }
    let dot: f64 = (0..4).map(|c| p[c] * g_p[c]).sum();
    let mut cot = [0.0; 6];
    for k in 0..4 {
        cot[k] = p[k] * (g_p[k] - dot);
    }
    cot[4] = g_delta[0];
    cot[5] = g_delta[1];
    (loss, cot)
}

/// Gradient of the split loss with respect to the head outputs of every
/// group in `batch`, plus the loss value.
pub fn output_cotangents(
    outs: &[ForwardOutput],
    batch: &GroupedData,
    mode: GradientMode,
) -> (LossValue, Vec<f64>) {
    let norm = normalizers(batch);
    let mut total = LossValue::default();
    let mut cot = Vec::with_capacity(outs.len() * N_OUTPUTS);
    for (g, out) in outs.iter().enumerate() {
        let (l, c) = group_loss(out, &batch.obs[g], &batch.exp[g], norm, mode, None);
        total.obs += l.obs;
        total.exp += l.exp;
        cot.extend_from_slice(&c);
    }
    (total, cot)
}

/// Loss and parameter gradient on a batch.
pub fn loss(
    params: &AnchoredParams,
    batch: &GroupedData,
    mode: GradientMode,
) -> Result<(LossValue, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    ensure_dim("batch covariates", params.arch.input_dim, batch.dim)?;
    let layout = params.arch.layout();
    let cache = layout.forward(&params.values, &batch.z, batch.len())?;
    let outs = outputs(&cache);
    let (value, cot) = output_cotangents(&outs, batch, mode);
    let mut grad = vec![0.0; params.len()];
    layout.backward(&params.values, &cache, &cot, &mut grad, 0, false);
    Ok((value, grad))
}

/// Loss value only.
pub fn loss_value(params: &AnchoredParams, batch: &GroupedData) -> Result<LossValue> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let outs = forward_batch(params, &batch.z)?;
    Ok(output_cotangents(&outs, batch, GradientMode::Full).0)
}

/// Loss where the experimental term reads its interval endpoints from
/// `frozen` instead of `params`. Its gradient in `params` is what
/// [`GradientMode::Blocked`] computes.
pub fn loss_value_frozen_anchors(
    params: &AnchoredParams,
    frozen: &AnchoredParams,
    batch: &GroupedData,
) -> Result<LossValue> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let outs = forward_batch(params, &batch.z)?;
    let anchors = forward_batch(frozen, &batch.z)?;
    let norm = normalizers(batch);
    let mut total = LossValue::default();
    for (g, out) in outs.iter().enumerate() {
        let (l, _) = group_loss(
            out,
            &batch.obs[g],
            &batch.exp[g],
            norm,
            GradientMode::Blocked,
            Some(&anchors[g]),
        );
        total.obs += l.obs;
        total.exp += l.exp;
    }
    Ok(total)
}

/// Smallest `|pre-activation|` over the ReLU units of a batch; used to keep
/// finite-difference checks away from kinks.
pub fn min_abs_preactivation(params: &AnchoredParams, z: &[f64]) -> Result<f64> {
    let layout = params.arch.layout();
    let batch = z.len() / params.arch.input_dim;
    let mut a = z.to_vec();
    let mut best = f64::INFINITY;
    for (l, shape) in layout.layers().iter().enumerate() {
        let w = &params.values[layout.weight_range(l)];
        let b = &params.values[layout.bias_range(l)];
        let mut out = vec![0.0; batch * shape.fan_out];
        for r in 0..batch {
            for o in 0..shape.fan_out {
                let mut t = b[o];
                for i in 0..shape.fan_in {
                    t += w[o * shape.fan_in + i] * a[r * shape.fan_in + i];
                }
                if shape.activation == crate::mlp::Activation::Relu {
                    best = best.min(t.abs());
                    t = t.max(0.0);
                }
                out[r * shape.fan_out + o] = t;
            }
        }
        a = out;
    }
    Ok(best)
}

/// Trained anchored network with its input standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchoredModel {
    pub params: AnchoredParams,
    pub standardizer: Standardizer,
}

impl AnchoredModel {
    pub fn predict(&self, z_raw: &[f64]) -> Result<ForwardOutput> {
        ensure_dim("covariate row", self.standardizer.dim(), z_raw.len())?;
        forward(&self.params, &self.standardizer.transform(z_raw))
    }

    pub fn predict_rows(&self, rows: &[f64]) -> Result<Vec<ForwardOutput>> {
        forward_batch(&self.params, &self.standardizer.transform_rows(rows))
    }
}

/// Splits both regimes, fits the standardizer on the joint training rows and
/// groups them.
pub fn prepare_training(
    obs: &Dataset,
    exp: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Standardizer, GroupedData, Option<GroupedData>)> {
    if obs.is_empty() {
        return Err(Error::Empty("observational data"));
    }
    if exp.is_empty() {
        return Err(Error::Empty("experimental data"));
    }
    ensure_dim("experimental covariates", obs.dim, exp.dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5917);
    let (obs_tr, obs_va) = obs.split(cfg.validation_fraction, &mut rng);
    let (exp_tr, exp_va) = exp.split(cfg.validation_fraction, &mut rng);
    let standardizer = Standardizer::fit(&[&obs_tr, &exp_tr])?;
    let train = GroupedData::from_datasets(&obs_tr, &exp_tr, &standardizer)?;
    let val = if obs_va.is_empty() && exp_va.is_empty() {
        None
    } else {
        Some(GroupedData::from_datasets(&obs_va, &exp_va, &standardizer)?)
    };
    Ok((standardizer, train, val))
}

/// Fits the anchored network with Adam and returns the final-epoch weights.
pub fn train(
    init_seed: u64,
    obs: &Dataset,
    exp: &Dataset,
    arch_hidden: usize,
    arch_depth: usize,
    cfg: &TrainConfig,
) -> Result<(AnchoredModel, TrainHistory)> {
    let (standardizer, data, val) = prepare_training(obs, exp, cfg)?;
    let arch = Architecture::new(obs.dim, arch_hidden, arch_depth);
    let mut params = AnchoredParams::init(arch, init_seed);
    let history = fit(
        &mut params.values,
        &data,
        cfg,
        |values, batch| {
            let p = AnchoredParams {
                arch,
                values: values.to_vec(),
            };
            let (l, g) = loss(&p, batch, GradientMode::Blocked)?;
            Ok((l.total(), g))
        },
        |values| match &val {
            Some(v) if !v.is_empty() => {
                let p = AnchoredParams {
                    arch,
                    values: values.to_vec(),
                };
                Ok(Some(loss_value(&p, v)?.total()))
            }
            _ => Ok(None),
        },
    )?;
    Ok((
        AnchoredModel {
            params,
            standardizer,
        },
        history,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::check_feasibility;

    #[test]
    fn anchoring_examples() {
        // p01 = 0.2, p00 = 0.3 → other arm mass 0.5
        let p = [0.3f64, 0.2, 0.25, 0.25];
        let logits = p.map(|v| v.ln());
        let out = anchor(logits, [0.0, 0.0]);
        assert!((out.atoms.mu0 - 0.45).abs() < 1e-12);
        let out = anchor(logits, [-20.0, 0.0]);
        assert!((out.atoms.mu0 - 0.2).abs() < 1e-8);
    }

    #[test]
    fn softmax_extreme_logits() {
        let p = softmax4(&[500.0, -500.0, 499.0, 0.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| v.is_finite()));
        let out = anchor([500.0, -500.0, 499.0, -500.0], [30.0, -30.0]);
        assert!(check_feasibility(&out.atoms, 1e-9));
    }

    #[test]
    fn atom_jacobian_matches_finite_differences() {
        let logits = [0.3, -1.1, 0.7, 0.2];
        let deltas = [0.4, -0.9];
        let base = anchor(logits, deltas);
        let j = atom_jacobian(&base);
        for k in 0..6 {
            let h = 1e-6;
            let (mut lp, mut dp) = (logits, deltas);
            let (mut lm, mut dm) = (logits, deltas);
            if k < 4 {
                lp[k] += h;
                lm[k] -= h;
            } else {
                dp[k - 4] += h;
                dm[k - 4] -= h;
            }
            let ap = anchor(lp, dp).atoms.to_array();
            let am = anchor(lm, dm).atoms.to_array();
            for a in 0..6 {
                let fd = (ap[a] - am[a]) / (2.0 * h);
                assert!((fd - j[a][k]).abs() < 1e-8, "atom {a} output {k}");
            }
        }
    }

    #[test]
    fn head_indices_partition_head_layer() {
        let p = AnchoredParams::init(Architecture::new(3, 5, 2), 1);
        let mut all = p.head_indices(Head::Joint);
        all.extend(p.head_indices(Head::Aux));
        all.sort();
        let r = p.head_range();
        assert_eq!(all, r.collect::<Vec<_>>());
    }

    #[test]
    fn observational_only_batch_has_no_aux_gradient() {
        let arch = Architecture::new(2, 4, 2);
        let p = AnchoredParams::init(arch, 5);
        let mut batch = GroupedData::empty(2);
        batch.z = vec![0.1, -0.3, 1.0, 0.5];
        batch.obs = vec![[1.0, 2.0, 0.0, 3.0], [0.0, 1.0, 1.0, 0.0]];
        batch.exp = vec![[0.0; 4], [0.0; 4]];
        let (l, g) = loss(&p, &batch, GradientMode::Blocked).unwrap();
        assert_eq!(l.exp, 0.0);
        for i in p.head_indices(Head::Aux) {
            assert_eq!(g[i], 0.0);
        }
    }

    #[test]
    fn perfect_one_hot_fit_has_near_zero_loss() {
        let mut batch = GroupedData::empty(1);
        batch.z = vec![0.0];
        batch.obs = vec![[0.0, 0.0, 0.0, 5.0]];
        batch.exp = vec![[0.0; 4]];
        let out = anchor([-1e4, -1e4, -1e4, 0.0], [0.0, 0.0]);
        let (l, _) = output_cotangents(&[out], &batch, GradientMode::Blocked);
        // the winning cell is clipped at 1 - 1e-10
        assert!(l.obs < 1e-9);
        assert!((l.obs - (-(1.0f64 - 1e-10).ln())).abs() < 1e-15);
    }

    #[test]
    fn experimental_only_batch_blocks_joint_head() {
        let arch = Architecture::new(2, 4, 2);
        let p = AnchoredParams::init(arch, 6);
        let mut batch = GroupedData::empty(2);
        batch.z = vec![0.1, -0.3, 1.0, 0.5];
        batch.obs = vec![[0.0; 4], [0.0; 4]];
        batch.exp = vec![[1.0, 2.0, 0.0, 3.0], [0.0, 1.0, 4.0, 1.0]];
        let (_, g) = loss(&p, &batch, GradientMode::Blocked).unwrap();
        for i in p.head_indices(Head::Joint) {
            assert_eq!(g[i], 0.0);
        }
        let (_, g_full) = loss(&p, &batch, GradientMode::Full).unwrap();
        assert!(p.head_indices(Head::Joint).iter().any(|&i| g_full[i] != 0.0));
    }

    #[test]
    fn empty_batch_is_an_error() {
        let p = AnchoredParams::init(Architecture::new(2, 4, 1), 0);
        assert!(loss(&p, &GroupedData::empty(2), GradientMode::Full).is_err());
    }
}
