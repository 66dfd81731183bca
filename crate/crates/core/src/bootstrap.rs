//! Multiplier-bootstrap intervals from influence functions of the anchored
//! network.
//!
//! The empirical loss is the training objective: observational
//! cross-entropy averaged over observational rows plus experimental
//! cross-entropy averaged over experimental rows. Its curvature is taken in
//! Gauss–Newton form over the atoms, which is positive semidefinite, and the
//! damped system is solved by conjugate gradient. Gradient blocking is off
//! throughout: every Jacobian runs through both heads.
//!
//! Rows sharing a covariate value and a cell have identical influence, so
//! influence is stored per `(group, regime, cell)` with a row count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::bounds::{
    bound_terms, precision_corrected_interval, BoundTerms, Method, PnsInterval, TERM_COEFFICIENTS,
};
use crate::data::GroupedData;
use crate::enn::{nearest_rank_quantile, CriticalValues};
use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{conjugate_gradient, dot, psd_cholesky};
use crate::mlp::{gemm, ForwardCache, MlpLayout};
use crate::neural::{atom_jacobian, outputs, AnchoredModel, ForwardOutput, N_OUTPUTS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfluenceMode {
    /// Final linear layer only (all six outputs).
    LastLayer,
    FullNetwork,
}

impl InfluenceMode {
    pub fn method(self) -> Method {
        match self {
            InfluenceMode::LastLayer => Method::MbLastLayer,
            InfluenceMode::FullNetwork => Method::MbFull,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InfluenceConfig {
    pub mode: InfluenceMode,
    pub damping: f64,
    pub cg_iters: usize,
    /// Largest parameter count for which the Hessian is formed densely.
    pub explicit_max: usize,
    /// Largest network for full-network mode.
    pub full_max: usize,
    /// Multiplier replicates per query point.
    pub replicates: usize,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        Self {
            mode: InfluenceMode::LastLayer,
            damping: 1e-4,
            cg_iters: 50,
            explicit_max: 2000,
            full_max: 20_000,
            replicates: 1000,
        }
    }
}

/// Per-cell influence of the eight bound terms at one query point.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceCache {
    pub mode: InfluenceMode,
    pub damping: f64,
    pub cg_iters: usize,
    /// Total training rows.
    pub n: f64,
    /// Rows per cell.
    pub counts: Vec<f64>,
    /// Influence of each term for one row of each cell, scaled so that the
    /// estimator error is approximately the mean over rows.
    pub psi: Vec<[f64; 8]>,
    /// Plug-in term values at the query point.
    pub terms: BoundTerms,
    /// Final CG residual norm per term.
    pub cg_residuals: [f64; 8],
}

impl InfluenceCache {
    /// `sqrt(sum_i psi_ij^2) / n`, the root-mean-square influence over `sqrt(n)`.
    pub fn stds(&self) -> BoundTerms {
        let mut ss = [0.0; 8];
        for (c, psi) in self.counts.iter().zip(&self.psi) {
            for j in 0..8 {
                ss[j] += c * psi[j] * psi[j];
            }
        }
        BoundTerms::from_array(ss.map(|v| v.sqrt() / self.n))
    }

    /// Uniform-weight cache for tests and toys: one row per entry of each
    /// column.
    pub fn from_rows(psi: Vec<[f64; 8]>, terms: BoundTerms) -> Self {
        let n = psi.len() as f64;
        Self {
            mode: InfluenceMode::LastLayer,
            damping: 0.0,
            cg_iters: 0,
            n,
            counts: vec![1.0; psi.len()],
            psi,
            terms,
            cg_residuals: [0.0; 8],
        }
    }
}

/// Linearization of the trained network over its training groups.
pub struct InfluenceEngine<'a> {
    model: &'a AnchoredModel,
    data: &'a GroupedData,
    cfg: InfluenceConfig,
    layout: MlpLayout,
    first_layer: usize,
    subset: Range<usize>,
    cache: ForwardCache,
    outs: Vec<ForwardOutput>,
    jac: Vec<[[f64; 6]; 6]>,
    curvature: Vec<[f64; 6]>,
    w_obs: f64,
    w_exp: f64,
    n: f64,
    hessian: Option<Vec<f64>>,
}

impl<'a> InfluenceEngine<'a> {
    /// `data` must be standardized with the model's standardizer.
    pub fn new(model: &'a AnchoredModel, data: &'a GroupedData, cfg: InfluenceConfig) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("training data"));
        }
        if !(cfg.damping > 0.0) {
            return Err(Error::InvalidInput("damping must be positive".into()));
        }
        let arch = model.params.arch;
        ensure_dim("training covariates", arch.input_dim, data.dim)?;
        let layout = arch.layout();
        let (first_layer, subset) = match cfg.mode {
            InfluenceMode::LastLayer => (arch.head_layer(), model.params.head_range()),
            InfluenceMode::FullNetwork => {
                if layout.n_params() > cfg.full_max {
                    return Err(Error::InvalidInput(format!(
                        "full-network influence limited to {} parameters, network has {}",
                        cfg.full_max,
                        layout.n_params()
                    )));
                }
                (0, 0..layout.n_params())
            }
        };
        let cache = layout.forward(&model.params.values, &data.z, data.len())?;
        let outs = outputs(&cache);
        let jac = outs.iter().map(atom_jacobian).collect();
        let (n_obs, n_exp) = (data.n_obs(), data.n_exp());
        let w_obs = if n_obs > 0.0 { 1.0 / n_obs } else { 0.0 };
        let w_exp = if n_exp > 0.0 { 1.0 / n_exp } else { 0.0 };
        let curvature = outs
            .iter()
            .enumerate()
            .map(|(g, out)| {
                let p = out.atoms.joint();
                let mut d = [0.0; 6];
                for c in 0..4 {
                    d[c] = w_obs * data.obs[g][c] / (p[c] * p[c]);
                }
                for x in 0..2 {
                    let mu = out.atoms.mu(x as u8);
                    d[4 + x] = w_exp
                        * (data.exp[g][2 * x + 1] / (mu * mu)
                            + data.exp[g][2 * x] / ((1.0 - mu) * (1.0 - mu)));
                }
                d
            })
            .collect();
        let mut engine = Self {
            model,
            data,
            cfg,
            layout,
            first_layer,
            subset,
            cache,
            outs,
            jac,
            curvature,
            w_obs,
            w_exp,
            n: n_obs + n_exp,
            hessian: None,
        };
        if engine.n_params() <= engine.cfg.explicit_max {
            engine.hessian = Some(engine.dense_hessian());
        }
        Ok(engine)
    }

    /// Size of the differentiated parameter subset.
    pub fn n_params(&self) -> usize {
        self.subset.len()
    }

    pub fn has_dense_hessian(&self) -> bool {
        self.hessian.is_some()
    }

    /// Gradient of atom `a` in the subset at group `g` of the training data,
    /// for every atom, row-major `6 × P`.
    fn group_jacobian(&self, g: usize) -> Result<Vec<f64>> {
        match self.cfg.mode {
            InfluenceMode::LastLayer => {
                let h = self.model.params.arch.hidden;
                let phi = &self.cache.penultimate()[g * h..(g + 1) * h];
                Ok(kron_rows(&self.jac[g], phi))
            }
            InfluenceMode::FullNetwork => self.point_jacobian_std(self.data.row(g)),
        }
    }

    fn point_jacobian_std(&self, z: &[f64]) -> Result<Vec<f64>> {
        let values = &self.model.params.values;
        let cache = self.layout.forward(values, z, 1)?;
        let out = outputs(&cache)[0];
        let jac = atom_jacobian(&out);
        if self.cfg.mode == InfluenceMode::LastLayer {
            return Ok(kron_rows(&jac, cache.penultimate()));
        }
        let p = self.n_params();
        let mut rows = vec![0.0; 6 * p];
        for a in 0..6 {
            let mut grad = vec![0.0; values.len()];
            self.layout
                .backward(values, &cache, &jac[a], &mut grad, self.first_layer, false);
            rows[a * p..(a + 1) * p].copy_from_slice(&grad[self.subset.clone()]);
        }
        Ok(rows)
    }

    fn dense_hessian(&self) -> Vec<f64> {
        let p = self.n_params();
        let mut h = vec![0.0; p * p];
        // blocks of groups keep the stacked Jacobian small
        let block = 256;
        for start in (0..self.data.len()).step_by(block) {
            let end = (start + block).min(self.data.len());
            let mut stacked = Vec::with_capacity((end - start) * 6 * p);
            for g in start..end {
                let rows = self.group_jacobian(g).expect("cached forward pass is finite");
                for a in 0..6 {
                    let s = self.curvature[g][a].sqrt();
                    stacked.extend(rows[a * p..(a + 1) * p].iter().map(|v| v * s));
                }
            }
            let r = stacked.len() / p;
            gemm(p, r, p, 1.0, &stacked, 1, p, &stacked, p, 1, 1.0, &mut h, p, 1);
        }
        h
    }

    /// Atom tangents `J_g v` at every training group.
    fn atom_jvp(&self, v: &[f64]) -> Vec<[f64; 6]> {
        let mut tangent = vec![0.0; self.layout.n_params()];
        tangent[self.subset.clone()].copy_from_slice(v);
        let t = self
            .layout
            .jvp(&self.model.params.values, &self.cache, &tangent, self.first_layer);
        t.chunks_exact(N_OUTPUTS)
            .zip(&self.jac)
            .map(|(t, j)| {
                let mut a = [0.0; 6];
                for (r, dst) in a.iter_mut().enumerate() {
                    *dst = dot(&j[r], t);
                }
                a
            })
            .collect()
    }

    /// `sum_g J_gᵀ u_g` restricted to the subset.
    fn atom_vjp(&self, u: &[[f64; 6]]) -> Vec<f64> {
        let mut grad_out = vec![0.0; u.len() * N_OUTPUTS];
        for ((dst, ug), j) in grad_out.chunks_exact_mut(N_OUTPUTS).zip(u).zip(&self.jac) {
            for a in 0..6 {
                for o in 0..6 {
                    dst[o] += j[a][o] * ug[a];
                }
            }
        }
        let values = &self.model.params.values;
        let mut grad = vec![0.0; values.len()];
        self.layout
            .backward(values, &self.cache, &grad_out, &mut grad, self.first_layer, false);
        grad[self.subset.clone()].to_vec()
    }

    /// Undamped Gauss–Newton Hessian-vector product.
    pub fn hvp(&self, v: &[f64]) -> Vec<f64> {
        if let Some(h) = &self.hessian {
            let p = self.n_params();
            return (0..p).map(|i| dot(&h[i * p..(i + 1) * p], v)).collect();
        }
        let mut t = self.atom_jvp(v);
        for (tg, d) in t.iter_mut().zip(&self.curvature) {
            for a in 0..6 {
                tg[a] *= d[a];
            }
        }
        self.atom_vjp(&t)
    }

    /// Dense undamped Hessian when it was formed.
    pub fn dense(&self) -> Option<&[f64]> {
        self.hessian.as_deref()
    }

    /// Mean-loss gradient over the subset; zero at a stationary point.
    pub fn loss_gradient(&self) -> Vec<f64> {
        let u: Vec<[f64; 6]> = (0..self.data.len())
            .map(|g| self.cell_scores(g).iter().fold([0.0; 6], |mut acc, (count, idx, s)| {
                acc[*idx] += count * s;
                acc
            }))
            .collect();
        self.atom_vjp(&u)
    }

    /// `(rows, atom index, weighted per-row atom score)` for each populated
    /// cell of a group.
    fn cell_scores(&self, g: usize) -> Vec<(f64, usize, f64)> {
        let out = &self.outs[g];
        let p = out.atoms.joint();
        let mut cells = Vec::with_capacity(8);
        for c in 0..4 {
            let count = self.data.obs[g][c];
            if count > 0.0 {
                cells.push((count, c, -self.w_obs / p[c]));
            }
        }
        for x in 0..2 {
            let mu = out.atoms.mu(x as u8);
            for y in 0..2 {
                let count = self.data.exp[g][2 * x + y];
                if count > 0.0 {
                    let s = if y == 1 { -1.0 / mu } else { 1.0 / (1.0 - mu) };
                    cells.push((count, 4 + x, self.w_exp * s));
                }
            }
        }
        cells
    }

    /// Influence of the eight bound terms at a raw covariate row.
    pub fn influence_at(&self, z_raw: &[f64]) -> Result<InfluenceCache> {
        let z = self.model.standardizer.transform(z_raw);
        ensure_dim("covariate row", self.data.dim, z.len())?;
        let p = self.n_params();
        let jz = self.point_jacobian_std(&z)?;
        let atoms = self.model.predict(z_raw)?.atoms;
        let lambda = self.cfg.damping;
        let mut counts = Vec::new();
        for g in 0..self.data.len() {
            counts.extend(self.cell_scores(g).iter().map(|c| c.0));
        }
        let mut psi = vec![[0.0; 8]; counts.len()];
        let mut residuals = [0.0; 8];
        for (j, (coef, _)) in TERM_COEFFICIENTS.iter().enumerate() {
            let mut grad_g = vec![0.0; p];
            for a in 0..6 {
                if coef[a] != 0.0 {
                    for (dst, v) in grad_g.iter_mut().zip(&jz[a * p..(a + 1) * p]) {
                        *dst += coef[a] * v;
                    }
                }
            }
            if grad_g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let sol = conjugate_gradient(
                |v| {
                    let mut hv = self.hvp(v);
                    for (h, vi) in hv.iter_mut().zip(v) {
                        *h += lambda * vi;
                    }
                    hv
                },
                &grad_g,
                self.cfg.cg_iters,
                1e-12,
            );
            residuals[j] = sol.residual;
            let t = self.atom_jvp(&sol.x);
            let mut k = 0;
            for (g, tg) in t.iter().enumerate() {
                for (_, idx, s) in self.cell_scores(g) {
                    psi[k][j] = -self.n * s * tg[idx];
                    k += 1;
                }
            }
        }
        Ok(InfluenceCache {
            mode: self.cfg.mode,
            damping: lambda,
            cg_iters: self.cfg.cg_iters,
            n: self.n,
            counts,
            psi,
            terms: bound_terms(&atoms),
            cg_residuals: residuals,
        })
    }
}

/// Rows `J_atom[a] ⊗ (phi, 1)` in the final layer's weight-then-bias order.
fn kron_rows(jac: &[[f64; 6]; 6], phi: &[f64]) -> Vec<f64> {
    let h = phi.len();
    let p = N_OUTPUTS * (h + 1);
    let mut rows = vec![0.0; 6 * p];
    for a in 0..6 {
        let row = &mut rows[a * p..(a + 1) * p];
        for o in 0..N_OUTPUTS {
            let c = jac[a][o];
            for i in 0..h {
                row[o * h + i] = c * phi[i];
            }
            row[N_OUTPUTS * h + o] = c;
        }
    }
    rows
}

/// One-shot influence computation at a single point.
pub fn influence_functions(
    model: &AnchoredModel,
    data: &GroupedData,
    z_raw: &[f64],
    cfg: InfluenceConfig,
) -> Result<InfluenceCache> {
    InfluenceEngine::new(model, data, cfg)?.influence_at(z_raw)
}

/// Critical values of the studentized max statistics under Gaussian
/// multipliers at level `1 - alpha / 2` per side.
///
/// Conditional on the data, `xiᵀ psi_j` is jointly Gaussian with covariance
/// `sum_i psi_ij psi_ik`, so replicates are drawn from that law directly.
pub fn mb_critical_values(
    cache: &InfluenceCache,
    replicates: usize,
    alpha: f64,
    seed: u64,
) -> Result<CriticalValues> {
    if replicates < 100 {
        return Err(Error::InvalidInput(format!(
            "need at least 100 bootstrap replicates, got {replicates}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let level = 1.0 - alpha / 2.0;
    let s = cache.stds().to_array();
    let active: Vec<usize> = (1..8).filter(|&j| s[j] > 0.0).collect();
    let k = active.len();
    let mut corr = vec![0.0; k * k];
    for (c, psi) in cache.counts.iter().zip(&cache.psi) {
        for (a, &ja) in active.iter().enumerate() {
            for (b, &jb) in active.iter().enumerate().skip(a) {
                corr[a * k + b] += c * psi[ja] * psi[jb];
            }
        }
    }
    let n2 = cache.n * cache.n;
    for a in 0..k {
        for b in a..k {
            let v = corr[a * k + b] / (n2 * s[active[a]] * s[active[b]]);
            corr[a * k + b] = v;
            corr[b * k + a] = v;
        }
    }
    let l = psd_cholesky(&corr, k, 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tl = Vec::with_capacity(replicates);
    let mut tu = Vec::with_capacity(replicates);
    let mut eps = vec![0.0; k];
    for _ in 0..replicates {
        eps.iter_mut().for_each(|e| *e = StandardNormal.sample(&mut rng));
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for a in 0..k {
            let t = dot(&l[a * k..a * k + a + 1], &eps[..a + 1]);
            if active[a] < 4 {
                lo = lo.max(t);
            } else {
                hi = hi.min(t);
            }
        }
        tl.push(lo);
        tu.push(-hi);
    }
    let kappa = |w: &mut Vec<f64>, any: bool| {
        if any {
            nearest_rank_quantile(w, level).max(0.0)
        } else {
            0.0
        }
    };
    let any_lower = active.iter().any(|&j| j < 4);
    let any_upper = active.iter().any(|&j| j >= 4);
    Ok(CriticalValues {
        kappa_l: kappa(&mut tl, any_lower),
        kappa_u: kappa(&mut tu, any_upper),
        quantile_level: level,
    })
}

/// Precision-corrected interval from influence-based standard errors.
pub fn mb_interval(cache: &InfluenceCache, cvals: &CriticalValues) -> Result<PnsInterval> {
    Ok(
        precision_corrected_interval(&cache.terms, &cache.stds(), cvals.kappa_l, cvals.kappa_u)?
            .with_method(cache.mode.method()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::plug_in_interval;
    use crate::data::{Dataset, Regime, Standardizer};
    use crate::neural::{AnchoredParams, Architecture};

    fn toy() -> (AnchoredModel, GroupedData) {
        let arch = Architecture::new(2, 4, 1);
        let model = AnchoredModel {
            params: AnchoredParams::init(arch, 3),
            standardizer: Standardizer::identity(2),
        };
        let mut obs = Dataset::new(Regime::Observational, 2);
        let mut exp = Dataset::new(Regime::Experimental, 2);
        for i in 0..40 {
            let z = [(i % 5) as f64 * 0.3, (i % 3) as f64 - 1.0];
            obs.push(&z, (i % 2) as u8, ((i / 2) % 2) as u8);
            exp.push(&z, ((i / 3) % 2) as u8, ((i / 5) % 2) as u8);
        }
        let data = GroupedData::from_datasets(&obs, &exp, &Standardizer::identity(2)).unwrap();
        (model, data)
    }

    #[test]
    fn dense_and_matrix_free_hvp_agree() {
        let (model, data) = toy();
        for mode in [InfluenceMode::LastLayer, InfluenceMode::FullNetwork] {
            let dense = InfluenceEngine::new(
                &model,
                &data,
                InfluenceConfig {
                    mode,
                    ..Default::default()
                },
            )
            .unwrap();
            let free = InfluenceEngine::new(
                &model,
                &data,
                InfluenceConfig {
                    mode,
                    explicit_max: 0,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(dense.has_dense_hessian() && !free.has_dense_hessian());
            let v: Vec<f64> = (0..dense.n_params()).map(|i| (i as f64 * 0.7).sin()).collect();
            let a = dense.hvp(&v);
            let b = free.hvp(&v);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn large_damping_limit() {
        let (model, data) = toy();
        let lambda = 1e8;
        let cfg = InfluenceConfig {
            damping: lambda,
            ..Default::default()
        };
        let engine = InfluenceEngine::new(&model, &data, cfg.clone()).unwrap();
        let z = [0.3, 0.0];
        let cache = engine.influence_at(&z).unwrap();
        // psi ≈ -(1/lambda) n ∇g · ∇l for every cell
        let p = engine.n_params();
        let jz = engine.point_jacobian_std(&z).unwrap();
        let coef = TERM_COEFFICIENTS[4].0;
        let grad_g: Vec<f64> = (0..p)
            .map(|i| (0..6).map(|a| coef[a] * jz[a * p + i]).sum())
            .collect();
        let t = engine.atom_jvp(&grad_g);
        let mut k = 0;
        for (g, tg) in t.iter().enumerate() {
            for (_, idx, s) in engine.cell_scores(g) {
                let expect = -engine.n * s * tg[idx] / lambda;
                let got = cache.psi[k][4];
                assert!((got - expect).abs() <= 1e-6 * expect.abs() + 1e-18);
                k += 1;
            }
        }
    }

    #[test]
    fn full_mode_is_gated() {
        let (model, data) = toy();
        let cfg = InfluenceConfig {
            mode: InfluenceMode::FullNetwork,
            full_max: 10,
            ..Default::default()
        };
        assert!(InfluenceEngine::new(&model, &data, cfg).is_err());
    }

    #[test]
    fn zero_influence_gives_plug_in() {
        let atoms = crate::bounds::AtomVector::from_joint([0.2, 0.3, 0.1, 0.4], 0.5, 0.6);
        let cache = InfluenceCache::from_rows(vec![[0.0; 8]; 10], bound_terms(&atoms));
        let cv = mb_critical_values(&cache, 200, 0.05, 1).unwrap();
        assert_eq!((cv.kappa_l, cv.kappa_u), (0.0, 0.0));
        let iv = mb_interval(&cache, &cv).unwrap();
        let pi = plug_in_interval(&atoms);
        assert_eq!((iv.lower, iv.upper), (pi.lower, pi.upper));
    }

    #[test]
    fn too_few_replicates_rejected() {
        let cache = InfluenceCache::from_rows(vec![[0.0; 8]; 3], BoundTerms::zeros());
        assert!(mb_critical_values(&cache, 10, 0.05, 0).is_err());
    }
}
