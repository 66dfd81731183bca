//! Epistemic hypernetwork over anchored parameters and precision-corrected
//! inference from its draws.
//!
//! A generator MLP maps an index `zeta ~ N(0, I)` to a full anchored
//! parameter vector; a frozen prior generator of the same output size is
//! added with weight `prior_scale`. Every draw is an anchored network, so
//! every draw yields feasible atoms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bounds::{bound_terms, check_feasibility, precision_corrected_interval, AUDIT_TOL, BoundTerms, Method, PnsInterval};
use crate::data::{Dataset, Standardizer};
use crate::error::{ensure_dim, Error, Result};
use crate::mlp::MlpLayout;
use crate::neural::{self, AnchoredParams, Architecture, GradientMode};
use crate::optim::{fit, TrainConfig, TrainHistory};

/// Added to standard deviations before studentizing.
pub const STUDENT_EPS: f64 = 1e-10;

/// Hypermodel shape and training knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnnConfig {
    pub index_dim: usize,
    pub generator_hidden: usize,
    pub prior_hidden: usize,
    pub prior_scale: f64,
    /// Index draws averaged per optimizer step.
    pub draws_per_step: usize,
    /// Scale applied to the generator's initial output weights.
    pub output_init_scale: f64,
    /// Index draws per query point at inference.
    pub posterior_samples: usize,
    pub quantile_level: f64,
}

impl Default for EnnConfig {
    fn default() -> Self {
        Self {
            index_dim: 20,
            generator_hidden: 64,
            prior_hidden: 32,
            prior_scale: 1.0,
            draws_per_step: 8,
            output_init_scale: 0.1,
            posterior_samples: 8000,
            quantile_level: 0.975,
        }
    }
}

impl EnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.index_dim == 0 || self.generator_hidden == 0 || self.prior_hidden == 0 {
            return Err(Error::InvalidInput(
                "hypermodel dimensions must be positive".into(),
            ));
        }
        if !(self.prior_scale >= 0.0) || !self.prior_scale.is_finite() {
            return Err(Error::InvalidInput("prior_scale must be non-negative".into()));
        }
        if self.draws_per_step == 0 {
            return Err(Error::InvalidInput("draws_per_step must be positive".into()));
        }
        check_draw_count(self.posterior_samples)?;
        check_level(self.quantile_level)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperModel {
    pub arch: Architecture,
    pub index_dim: usize,
    pub prior_scale: f64,
    pub generator_layout: MlpLayout,
    pub generator: Vec<f64>,
    pub prior_layout: MlpLayout,
    prior: Vec<f64>,
    pub standardizer: Standardizer,
}

impl HyperModel {
    /// Fresh hypermodel whose generator starts near one base initialization.
    pub fn new(arch: Architecture, cfg: &EnnConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let base_layout = arch.layout();
        let n = base_layout.n_params();
        let base_scales = base_layout.init_scales();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta0 = base_layout.init(&mut rng);

        let generator_layout =
            MlpLayout::relu_stack(&[cfg.index_dim, cfg.generator_hidden, cfg.generator_hidden, n])?;
        let mut generator = generator_layout.init(&mut rng);
        let last = generator_layout.layers().len() - 1;
        for w in &mut generator[generator_layout.weight_range(last)] {
            *w *= cfg.output_init_scale;
        }
        generator[generator_layout.bias_range(last)].copy_from_slice(&theta0);

        let prior_layout =
            MlpLayout::relu_stack(&[cfg.index_dim, cfg.prior_hidden, cfg.prior_hidden, n])?;
        let mut prior = prior_layout.init(&mut rng);
        let wr = prior_layout.weight_range(last);
        let h = cfg.prior_hidden;
        for (p, row) in prior[wr].chunks_exact_mut(h).enumerate() {
            row.iter_mut().for_each(|w| *w *= base_scales[p]);
        }
        prior[prior_layout.bias_range(last)].fill(0.0);

        Ok(Self {
            arch,
            index_dim: cfg.index_dim,
            prior_scale: cfg.prior_scale,
            generator_layout,
            generator,
            prior_layout,
            prior,
            standardizer: Standardizer::identity(arch.input_dim),
        })
    }

    /// Reassembles a stored hypermodel.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        arch: Architecture,
        index_dim: usize,
        prior_scale: f64,
        generator_layout: MlpLayout,
        generator: Vec<f64>,
        prior_layout: MlpLayout,
        prior: Vec<f64>,
        standardizer: Standardizer,
    ) -> Result<Self> {
        let n = arch.n_params();
        ensure_dim("generator input", index_dim, generator_layout.input_dim())?;
        ensure_dim("prior input", index_dim, prior_layout.input_dim())?;
        ensure_dim("generator output", n, generator_layout.output_dim())?;
        ensure_dim("prior output", n, prior_layout.output_dim())?;
        ensure_dim("generator parameters", generator_layout.n_params(), generator.len())?;
        ensure_dim("prior parameters", prior_layout.n_params(), prior.len())?;
        ensure_dim("standardizer", arch.input_dim, standardizer.dim())?;
        Ok(Self {
            arch,
            index_dim,
            prior_scale,
            generator_layout,
            generator,
            prior_layout,
            prior,
            standardizer,
        })
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn n_base_params(&self) -> usize {
        self.arch.n_params()
    }

    /// Parameter vectors for a row-major block of `m` indices.
    pub fn sample_block(&self, zetas: &[f64], m: usize) -> Result<Vec<f64>> {
        ensure_dim("index block", m * self.index_dim, zetas.len())?;
        let g = self.generator_layout.forward(&self.generator, zetas, m)?;
        let mut out = g.output().to_vec();
        if self.prior_scale != 0.0 {
            let p = self.prior_layout.forward(&self.prior, zetas, m)?;
            for (o, v) in out.iter_mut().zip(p.output()) {
                *o += self.prior_scale * v;
            }
        }
        Ok(out)
    }

    /// `generator(zeta) + prior_scale * prior(zeta)`.
    pub fn sample_params(&self, zeta: &[f64]) -> Result<AnchoredParams> {
        ensure_dim("epistemic index", self.index_dim, zeta.len())?;
        let values = self.sample_block(zeta, 1)?;
        AnchoredParams::from_values(self.arch, values)
    }
}

/// Row-major block of `m` standard-normal indices.
pub fn draw_indices(index_dim: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..m * index_dim)
        .map(|_| StandardNormal.sample(rng))
        .collect()
}

/// Trains the generator; the prior is never touched.
pub fn train_enn(
    mut hyper: HyperModel,
    obs: &Dataset,
    exp: &Dataset,
    cfg: &TrainConfig,
    draws_per_step: usize,
) -> Result<(HyperModel, TrainHistory)> {
    if draws_per_step == 0 {
        return Err(Error::InvalidInput("draws_per_step must be positive".into()));
    }
    ensure_dim("covariate columns", hyper.arch.input_dim, obs.dim)?;
    let (standardizer, data, val) = neural::prepare_training(obs, exp, cfg)?;
    hyper.standardizer = standardizer;
    let arch = hyper.arch;
    let n_base = arch.n_params();
    let s = draws_per_step;
    let mut zeta_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0e11_1dec);
    let val_zetas = draw_indices(
        hyper.index_dim,
        s,
        &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_da7e),
    );
    let view = hyper.clone();
    let mut generator = std::mem::take(&mut hyper.generator);
    let history = fit(
        &mut generator,
        &data,
        cfg,
        |gen, batch| {
            let zetas = draw_indices(view.index_dim, s, &mut zeta_rng);
            let cache = view.generator_layout.forward(gen, &zetas, s)?;
            let mut thetas = cache.output().to_vec();
            if view.prior_scale != 0.0 {
                let p = view.prior_layout.forward(&view.prior, &zetas, s)?;
                for (o, v) in thetas.iter_mut().zip(p.output()) {
                    *o += view.prior_scale * v;
                }
            }
            let mut grad_out = vec![0.0; s * n_base];
            let mut total = 0.0;
            for (k, theta) in thetas.chunks_exact(n_base).enumerate() {
                let p = AnchoredParams {
                    arch,
                    values: theta.to_vec(),
                };
                let (l, g) = neural::loss(&p, batch, GradientMode::Blocked)?;
                total += l.total();
                for (dst, v) in grad_out[k * n_base..(k + 1) * n_base].iter_mut().zip(&g) {
                    *dst = v / s as f64;
                }
            }
            let mut grad = vec![0.0; gen.len()];
            view.generator_layout
                .backward(gen, &cache, &grad_out, &mut grad, 0, false);
            Ok((total / s as f64, grad))
        },
        |gen| match &val {
            Some(v) if !v.is_empty() => {
                let mut h = view.clone();
                h.generator = gen.to_vec();
                let thetas = h.sample_block(&val_zetas, s)?;
                let mut total = 0.0;
                for theta in thetas.chunks_exact(n_base) {
                    let p = AnchoredParams {
                        arch,
                        values: theta.to_vec(),
                    };
                    total += neural::loss_value(&p, v)?.total();
                }
                Ok(Some(total / s as f64))
            }
            _ => Ok(None),
        },
    )?;
    hyper.generator = generator;
    Ok((hyper, history))
}

/// Per-term Monte Carlo summaries at one covariate row.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundTermStats {
    pub means: BoundTerms,
    pub stds: BoundTerms,
    /// Raw draws, row-major `M × 8` in lower-then-upper order.
    pub draws: Vec<f64>,
    /// Every draw's atoms passed the compatibility audit.
    pub all_feasible: bool,
}

impl BoundTermStats {
    pub fn n_draws(&self) -> usize {
        self.draws.len() / 8
    }

    pub fn draw(&self, m: usize) -> BoundTerms {
        let mut a = [0.0; 8];
        a.copy_from_slice(&self.draws[m * 8..(m + 1) * 8]);
        BoundTerms::from_array(a)
    }

    /// Means and sample standard deviations (`M - 1` denominator) of a
    /// row-major `M × 8` block.
    pub fn from_draws(draws: Vec<f64>) -> Result<Self> {
        if draws.len() % 8 != 0 {
            return Err(Error::DimensionMismatch {
                what: "bound-term draws",
                expected: 8,
                found: draws.len() % 8,
            });
        }
        let m = draws.len() / 8;
        if m < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 draws, got {m}"
            )));
        }
        let mut mean = [0.0; 8];
        let mut std = [0.0; 8];
        for j in 0..8 {
            let col = draws.iter().skip(j).step_by(8);
            let first = draws[j];
            if col.clone().all(|&v| v == first) {
                mean[j] = first;
                continue;
            }
            let mu = col.clone().sum::<f64>() / m as f64;
            let ss: f64 = col.map(|v| (v - mu) * (v - mu)).sum();
            mean[j] = mu;
            std[j] = (ss / (m - 1) as f64).sqrt();
        }
        Ok(Self {
            means: BoundTerms::from_array(mean),
            stds: BoundTerms::from_array(std),
            draws,
            all_feasible: true,
        })
    }
}

fn check_draw_count(m: usize) -> Result<()> {
    if m < 2 {
        Err(Error::InvalidInput(format!("need at least 2 draws, got {m}")))
    } else {
        Ok(())
    }
}

/// Term statistics at many raw covariate rows from one shared set of `m`
/// index draws.
pub fn bound_statistics_batch(
    hyper: &HyperModel,
    rows: &[f64],
    m: usize,
    seed: u64,
) -> Result<Vec<BoundTermStats>> {
    check_draw_count(m)?;
    let d = hyper.arch.input_dim;
    if rows.len() % d != 0 {
        return Err(Error::DimensionMismatch {
            what: "covariate block",
            expected: d,
            found: rows.len() % d,
        });
    }
    let n_points = rows.len() / d;
    if n_points == 0 {
        return Err(Error::Empty("query points"));
    }
    let z = hyper.standardizer.transform_rows(rows);
    let zetas = draw_indices(hyper.index_dim, m, &mut ChaCha8Rng::seed_from_u64(seed));
    let n_base = hyper.n_base_params();
    let mut draws = vec![Vec::with_capacity(m * 8); n_points];
    let mut feasible = vec![true; n_points];
    // bounded blocks of parameter vectors keep memory flat for large m
    let block = 256;
    for start in (0..m).step_by(block) {
        let len = block.min(m - start);
        let thetas = hyper.sample_block(&zetas[start * hyper.index_dim..(start + len) * hyper.index_dim], len)?;
        for theta in thetas.chunks_exact(n_base) {
            let p = AnchoredParams {
                arch: hyper.arch,
                values: theta.to_vec(),
            };
            let outs = neural::forward_batch(&p, &z)?;
            for ((dst, ok), out) in draws.iter_mut().zip(&mut feasible).zip(&outs) {
                dst.extend_from_slice(&bound_terms(&out.atoms).to_array());
                *ok &= check_feasibility(&out.atoms, AUDIT_TOL);
            }
        }
    }
    draws
        .into_iter()
        .zip(feasible)
        .map(|(d, ok)| {
            let mut stats = BoundTermStats::from_draws(d)?;
            stats.all_feasible = ok;
            Ok(stats)
        })
        .collect()
}

/// Term statistics at one raw covariate row.
pub fn bound_statistics(
    hyper: &HyperModel,
    z_raw: &[f64],
    m: usize,
    seed: u64,
) -> Result<BoundTermStats> {
    ensure_dim("covariate row", hyper.arch.input_dim, z_raw.len())?;
    Ok(bound_statistics_batch(hyper, z_raw, m, seed)?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalValues {
    pub kappa_l: f64,
    pub kappa_u: f64,
    pub quantile_level: f64,
}

/// `ceil(level * n)`-th order statistic of `values`.
pub fn nearest_rank_quantile(values: &mut [f64], level: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let rank = ((level * n as f64).ceil() as usize).clamp(1, n);
    values[rank - 1]
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "quantile level must lie in (0, 1), got {level}"
        )))
    }
}

/// Studentized max statistics per draw and their empirical quantiles.
pub fn critical_values(stats: &BoundTermStats, level: f64) -> Result<CriticalValues> {
    check_level(level)?;
    let m = stats.n_draws();
    check_draw_count(m)?;
    let mean = stats.means.to_array();
    let std = stats.stds.to_array();
    // the constant lower term never varies and is skipped
    let lower: Vec<usize> = (1..4).filter(|&j| std[j] > 0.0).collect();
    let upper: Vec<usize> = (4..8).filter(|&j| std[j] > 0.0).collect();
    let mut wl = Vec::with_capacity(m);
    let mut wu = Vec::with_capacity(m);
    for row in stats.draws.chunks_exact(8) {
        let stud = |j: usize| (row[j] - mean[j]) / (std[j] + STUDENT_EPS);
        wl.push(lower.iter().map(|&j| stud(j)).fold(f64::NEG_INFINITY, f64::max));
        wu.push(-upper.iter().map(|&j| stud(j)).fold(f64::INFINITY, f64::min));
    }
    let kappa = |w: &mut Vec<f64>, active: bool| {
        if active {
            nearest_rank_quantile(w, level).max(0.0)
        } else {
            0.0
        }
    };
    Ok(CriticalValues {
        kappa_l: kappa(&mut wl, !lower.is_empty()),
        kappa_u: kappa(&mut wu, !upper.is_empty()),
        quantile_level: level,
    })
}

/// Corrected interval from precomputed statistics.
pub fn corrected_interval(stats: &BoundTermStats, level: f64) -> Result<PnsInterval> {
    let cv = critical_values(stats, level)?;
    Ok(
        precision_corrected_interval(&stats.means, &stats.stds, cv.kappa_l, cv.kappa_u)?
            .with_method(Method::AnchEnn),
    )
}

/// End-to-end precision-corrected interval at one raw covariate row.
pub fn infer_interval(
    hyper: &HyperModel,
    z_raw: &[f64],
    m: usize,
    level: f64,
    seed: u64,
) -> Result<PnsInterval> {
    corrected_interval(&bound_statistics(hyper, z_raw, m, seed)?, level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::plug_in_interval;
    use crate::bounds::AtomVector;

    fn small() -> HyperModel {
        let cfg = EnnConfig {
            index_dim: 4,
            generator_hidden: 8,
            prior_hidden: 6,
            ..Default::default()
        };
        HyperModel::new(Architecture::new(3, 5, 2), &cfg, 11).unwrap()
    }

    #[test]
    fn prior_scale_zero_gives_generator_only() {
        let mut h = small();
        h.prior_scale = 0.0;
        let zeta = [0.3, -1.0, 0.2, 0.9];
        let p = h.sample_params(&zeta).unwrap();
        let g = h.generator_layout.forward(&h.generator, &zeta, 1).unwrap();
        assert_eq!(p.values, g.output());
    }

    #[test]
    fn sampling_is_deterministic_and_index_dependent() {
        let h = small();
        let a = h.sample_params(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        let b = h.sample_params(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        let c = h.sample_params(&[-0.4, 0.2, 1.3, 0.4]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(h.sample_params(&[0.0; 3]).is_err());
    }

    #[test]
    fn constant_draws_give_zero_std_and_plug_in() {
        let atoms = AtomVector::from_joint([0.2, 0.3, 0.1, 0.4], 0.5, 0.6);
        let t = bound_terms(&atoms).to_array();
        let draws: Vec<f64> = (0..50).flat_map(|_| t).collect();
        let stats = BoundTermStats::from_draws(draws).unwrap();
        assert!(stats.stds.to_array().iter().all(|&s| s == 0.0));
        let iv = corrected_interval(&stats, 0.975).unwrap();
        let pi = plug_in_interval(&atoms);
        assert_eq!((iv.lower, iv.upper), (pi.lower, pi.upper));
    }

    #[test]
    fn constant_standardized_maxima_give_that_constant() {
        // two draws per term pattern; every lower max equals 1/sqrt(2)·sqrt(2)=1
        let mut draws = Vec::new();
        for k in 0..10 {
            let s = if k % 2 == 0 { 1.0 } else { -1.0 };
            draws.extend_from_slice(&[0.0, s, -s, 0.0, 0.5 + s, 0.5, 0.5, 0.5]);
        }
        let stats = BoundTermStats::from_draws(draws).unwrap();
        let cv = critical_values(&stats, 0.975).unwrap();
        let expect = 1.0 / (stats.stds.lower[1] + STUDENT_EPS);
        assert!((cv.kappa_l - expect).abs() < 1e-12);
    }

    #[test]
    fn too_few_draws_rejected() {
        assert!(BoundTermStats::from_draws(vec![0.0; 8]).is_err());
        assert!(bound_statistics(&small(), &[0.0; 3], 1, 0).is_err());
    }

    #[test]
    fn per_draw_atoms_feasible_and_batch_matches_single() {
        let h = small();
        let rows = [0.1, 0.2, -0.5, 1.0, -1.0, 0.0];
        let batch = bound_statistics_batch(&h, &rows, 20, 4).unwrap();
        let single = bound_statistics(&h, &rows[3..], 20, 4).unwrap();
        assert_eq!(batch[1], single);
    }
}
