//! Replicate runner, aggregation and sweeps.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::baselines::{fit_baseline, plug_in_from_atoms, BaselineKind, CellFrequency};
use crate::bootstrap::{mb_critical_values, mb_interval, InfluenceConfig, InfluenceEngine, InfluenceMode};
use crate::checkpoint::Checkpoint;
use crate::bounds::{
    bound_terms, check_feasibility, envelope_interval, plug_in_interval, AtomVector, Method,
    PnsInterval, AUDIT_TOL,
};
use crate::data::{Dataset, Regime};
use crate::enn::{bound_statistics_batch, corrected_interval, train_enn, HyperModel};
use crate::error::{Error, Result};
use crate::eval::{aggregate_replicates, evaluate, write_replicates_csv, read_replicates_csv, EvalInputs, MetricsReport, ReplicateMetrics};
use crate::harness::config::{ExperimentConfig, ScmConfig};
use crate::neural::{self, AnchoredModel, Architecture};
use crate::optim::TrainConfig;
use crate::scm_highdim::{CovariateSource, HighDimScm};
use crate::scm_lowdim::{to_bits, LowDimScm};

/// A data-generating model with its oracle.
#[derive(Debug, Clone)]
pub enum Scenario {
    Low(LowDimScm),
    High(Box<HighDimScm>, CovariateSource),
}

impl Scenario {
    pub fn from_config(cfg: &ScmConfig) -> Result<Self> {
        if let Some(m) = cfg.lowdim_model()? {
            return Ok(Scenario::Low(m));
        }
        let ScmConfig::Highdim {
            covariates,
            synthetic_rows,
            synthetic_cols,
            generator,
            model,
        } = cfg
        else {
            unreachable!("low-dimensional case handled above")
        };
        let source = match covariates {
            Some(path) => CovariateSource::load(Path::new(path))?,
            None => CovariateSource::synthetic(*synthetic_rows, *synthetic_cols, generator.seed),
        };
        let scm = match model {
            Some(m) => {
                m.validate()?;
                m.clone()
            }
            None => HighDimScm::generate(&source, generator)?,
        };
        Ok(Scenario::High(Box::new(scm), source))
    }

    pub fn d_obs(&self) -> usize {
        match self {
            Scenario::Low(m) => m.d_obs(),
            Scenario::High(m, _) => m.d_obs(),
        }
    }

    pub fn sample(&self, n: usize, regime: Regime, seed: u64) -> Result<Dataset> {
        match self {
            Scenario::Low(m) => m.sample_dataset(n, regime, seed),
            Scenario::High(m, src) => m.sample(src, n, regime, seed),
        }
    }

    /// Row-major block of `n` observed covariate rows from the population.
    pub fn test_points(&self, n: usize, seed: u64) -> Vec<f64> {
        match self {
            Scenario::Low(m) => m
                .sample_observed_points(n, seed)
                .into_iter()
                .flatten()
                .map(f64::from)
                .collect(),
            Scenario::High(_, src) => {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                (0..n)
                    .flat_map(|_| src.row(rng.random_range(0..src.len())).to_vec())
                    .collect()
            }
        }
    }

    /// Oracle atoms and PNS at an observed covariate row.
    pub fn oracle(&self, z: &[f64]) -> Result<(AtomVector, f64)> {
        match self {
            Scenario::Low(m) => {
                let bits = to_bits(z)?;
                Ok((m.marginal_atoms(&bits)?, m.marginal_pns(&bits)?))
            }
            Scenario::High(m, _) => Ok((m.marginal_atoms(z)?, m.true_pns_obs(z)?)),
        }
    }

    /// Latent configurations with weights, for audits.
    pub fn hidden_weights(&self) -> Result<Vec<f64>> {
        match self {
            Scenario::Low(m) => Ok(m.hidden_configs().into_iter().map(|(_, w)| w).collect()),
            Scenario::High(m, _) => Ok(m.latent_configs()?.into_iter().map(|(_, w)| w).collect()),
        }
    }
}

/// Seed of one random stream within a replicate.
pub fn stream_seed(replicate_seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = replicate_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(stream.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub mod streams {
    pub const OBS: u64 = 1;
    pub const EXP: u64 = 2;
    pub const TEST: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const INIT: u64 = 5;
    pub const ENN_INIT: u64 = 6;
    pub const ENN_INFER: u64 = 7;
    pub const BOOTSTRAP: u64 = 8;
}

/// One method's output at one test point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointOutput {
    pub interval: PnsInterval,
    /// Uncorrected envelope of the point estimates the interval was built from.
    pub base: PnsInterval,
    pub atoms_valid: bool,
}

impl PointOutput {
    fn plain(interval: PnsInterval, atoms: &AtomVector) -> Self {
        Self {
            interval,
            base: interval,
            atoms_valid: check_feasibility(atoms, AUDIT_TOL),
        }
    }
}

/// Per-point dump row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub replicate: usize,
    pub point: usize,
    pub method: Method,
    pub lower: f64,
    pub upper: f64,
    pub crossed: bool,
    pub kappa_lower: f64,
    pub kappa_upper: f64,
    pub base_lower: f64,
    pub base_upper: f64,
    pub atoms_valid: bool,
    pub oracle_pns: f64,
    pub oracle_lower: f64,
    pub oracle_upper: f64,
}

/// Everything a replicate produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateOutput {
    pub metrics: Vec<ReplicateMetrics>,
    pub points: Vec<PointRecord>,
}

/// Settings shared by the method runners.
#[derive(Debug, Clone)]
pub struct MethodSettings {
    pub arch: Architecture,
    pub train: TrainConfig,
    pub enn: crate::enn::EnnConfig,
    pub bootstrap: InfluenceConfig,
    pub alpha: f64,
}

impl MethodSettings {
    pub fn from_config(cfg: &ExperimentConfig, input_dim: usize) -> Self {
        Self {
            arch: Architecture::new(input_dim, cfg.network.hidden, cfg.network.depth),
            train: cfg.train.clone(),
            enn: cfg.enn.clone(),
            bootstrap: cfg.bootstrap.clone(),
            alpha: cfg.alpha,
        }
    }
}

/// Distinct rows of a block and the index of each row's representative.
fn dedupe(rows: &[f64], d: usize) -> (Vec<f64>, Vec<usize>) {
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut unique = Vec::new();
    let mut map = Vec::with_capacity(rows.len() / d);
    for row in rows.chunks_exact(d) {
        let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
        let next = seen.len();
        let idx = *seen.entry(key).or_insert_with(|| {
            unique.extend_from_slice(row);
            next
        });
        map.push(idx);
    }
    (unique, map)
}

/// Bootstrap intervals at every test row from a trained anchored model.
pub fn mb_outputs(
    model: &AnchoredModel,
    obs: &Dataset,
    exp: &Dataset,
    rows: &[f64],
    mode: InfluenceMode,
    settings: &MethodSettings,
    seed: u64,
) -> Result<Vec<PointOutput>> {
    // same split and standardization the model was trained on
    let (_, data, _) = neural::prepare_training(obs, exp, &settings.train)?;
    let cfg = InfluenceConfig {
        mode,
        ..settings.bootstrap.clone()
    };
    let engine = InfluenceEngine::new(model, &data, cfg)?;
    let d = model.params.arch.input_dim;
    let (unique, map) = dedupe(rows, d);
    let preds = model.predict_rows(&unique)?;
    let mut out = Vec::with_capacity(unique.len() / d);
    for (u, z) in unique.chunks_exact(d).enumerate() {
        let cache = engine.influence_at(z)?;
        let cv = mb_critical_values(&cache, settings.bootstrap.replicates, settings.alpha, seed)?;
        let interval = mb_interval(&cache, &cv)?;
        out.push(PointOutput {
            interval,
            base: envelope_interval(&cache.terms).with_method(mode.method()),
            atoms_valid: check_feasibility(&preds[u].atoms, AUDIT_TOL),
        });
    }
    Ok(map.into_iter().map(|i| out[i]).collect())
}

/// ENN-corrected intervals at every test row.
pub fn enn_outputs(hyper: &HyperModel, rows: &[f64], settings: &MethodSettings, seed: u64) -> Result<Vec<PointOutput>> {
    let stats = bound_statistics_batch(hyper, rows, settings.enn.posterior_samples, seed)?;
    stats
        .iter()
        .map(|s| {
            Ok(PointOutput {
                interval: corrected_interval(s, settings.enn.quantile_level)?,
                base: envelope_interval(&s.means).with_method(Method::AnchEnn),
                atoms_valid: s.all_feasible,
            })
        })
        .collect()
}

/// Intervals from a trained model at every test row.
///
/// Bootstrap methods need the training data of an anchored checkpoint.
/// Random streams derive from `rep_seed` as in [`run_replicate`].
pub fn checkpoint_outputs(
    ckpt: &Checkpoint,
    method: Method,
    rows: &[f64],
    settings: &MethodSettings,
    data: Option<(&Dataset, &Dataset)>,
    rep_seed: u64,
) -> Result<Vec<PointOutput>> {
    let mismatch = || {
        Error::InvalidInput(format!(
            "a `{}` checkpoint cannot produce `{}` intervals",
            ckpt.kind_name(),
            method.name()
        ))
    };
    match (ckpt, method) {
        (Checkpoint::Anchored(m), Method::Anchored) => Ok(m
            .predict_rows(rows)?
            .iter()
            .map(|o| PointOutput::plain(plug_in_interval(&o.atoms).with_method(method), &o.atoms))
            .collect()),
        (Checkpoint::Anchored(m), Method::MbLastLayer | Method::MbFull) => {
            let (obs, exp) = data.ok_or_else(|| {
                Error::InvalidInput("bootstrap intervals need the training data".into())
            })?;
            let mode = if method == Method::MbFull {
                InfluenceMode::FullNetwork
            } else {
                InfluenceMode::LastLayer
            };
            mb_outputs(m, obs, exp, rows, mode, settings, stream_seed(rep_seed, streams::BOOTSTRAP))
        }
        (Checkpoint::Baseline(b), Method::SLearner | Method::TLearner) if b.kind.method() == method => Ok(b
            .predict_atoms(rows)?
            .into_iter()
            .map(|a| {
                let p = plug_in_from_atoms(a, method);
                PointOutput {
                    interval: p.interval,
                    base: p.interval,
                    atoms_valid: !p.violation,
                }
            })
            .collect()),
        (Checkpoint::Hyper(h), Method::AnchEnn) => {
            enn_outputs(h, rows, settings, stream_seed(rep_seed, streams::ENN_INFER))
        }
        _ => Err(mismatch()),
    }
}

/// Trains the model behind `method` with the seeds replicate `replicate` uses.
pub fn fit_checkpoint(
    cfg: &ExperimentConfig,
    method: Method,
    obs: &Dataset,
    exp: &Dataset,
    replicate: usize,
) -> Result<Checkpoint> {
    let rep_seed = cfg.seed.wrapping_add(replicate as u64);
    let s = |stream| stream_seed(rep_seed, stream);
    let mut settings = MethodSettings::from_config(cfg, obs.dim);
    settings.train.seed = s(streams::TRAIN);
    let (hidden, depth) = (settings.arch.hidden, settings.arch.depth);
    Ok(match method {
        Method::Anchored | Method::MbLastLayer | Method::MbFull => Checkpoint::Anchored(
            neural::train(s(streams::INIT), obs, exp, hidden, depth, &settings.train)?.0,
        ),
        Method::SLearner | Method::TLearner => {
            let kind = if method == Method::SLearner {
                BaselineKind::SLearner
            } else {
                BaselineKind::TLearner
            };
            Checkpoint::Baseline(fit_baseline(kind, s(streams::INIT), obs, exp, hidden, depth, &settings.train)?)
        }
        Method::AnchEnn => {
            let hyper = HyperModel::new(settings.arch, &settings.enn, s(streams::ENN_INIT))?;
            Checkpoint::Hyper(train_enn(hyper, obs, exp, &settings.train, settings.enn.draws_per_step)?.0)
        }
        Method::Oracle | Method::PlugIn | Method::CellFrequency => {
            return Err(Error::InvalidInput(format!(
                "method `{}` has no trained model",
                method.name()
            )))
        }
    })
}

/// Runs every configured method on one replicate.
pub fn run_replicate(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    n_obs: usize,
    n_exp: usize,
    replicate: usize,
) -> Result<ReplicateOutput> {
    let rep_seed = cfg.seed.wrapping_add(replicate as u64);
    let s = |stream| stream_seed(rep_seed, stream);
    let obs = scenario.sample(n_obs, Regime::Observational, s(streams::OBS))?;
    let exp = scenario.sample(n_exp, Regime::Experimental, s(streams::EXP))?;
    let d = scenario.d_obs();
    let rows = scenario.test_points(cfg.data.n_test, s(streams::TEST));
    let oracle: Vec<(AtomVector, f64)> = rows
        .chunks_exact(d)
        .map(|z| scenario.oracle(z))
        .collect::<Result<_>>()?;
    let oracle_iv: Vec<PnsInterval> = oracle.iter().map(|(a, _)| plug_in_interval(a)).collect();
    let oracle_pns: Vec<f64> = oracle.iter().map(|o| o.1).collect();
    let oracle_bounds: Vec<(f64, f64)> = oracle_iv.iter().map(|i| (i.lower, i.upper)).collect();

    let mut settings = MethodSettings::from_config(cfg, d);
    settings.train.seed = s(streams::TRAIN);
    let mut anchored: Option<Checkpoint> = None;
    let mut metrics = Vec::new();
    let mut points = Vec::new();
    for &method in &cfg.methods {
        let outs: Vec<PointOutput> = match method {
            Method::Oracle => oracle
                .iter()
                .map(|(a, _)| PointOutput::plain(plug_in_interval(a).with_method(Method::Oracle), a))
                .collect(),
            Method::PlugIn => unreachable!("rejected by config validation"),
            Method::CellFrequency => {
                let cf = CellFrequency::fit(&obs, &exp)?;
                rows.chunks_exact(d)
                    .map(|z| match cf.predict(z) {
                        Some(p) => PointOutput {
                            interval: p.interval,
                            base: p.interval,
                            atoms_valid: !p.violation,
                        },
                        None => {
                            let iv = PnsInterval {
                                lower: 0.0,
                                upper: 1.0,
                                crossed: false,
                                method,
                                kappa_lower: 0.0,
                                kappa_upper: 0.0,
                            };
                            PointOutput {
                                interval: iv,
                                base: iv,
                                atoms_valid: true,
                            }
                        }
                    })
                    .collect()
            }
            Method::Anchored | Method::MbLastLayer | Method::MbFull => {
                if anchored.is_none() {
                    anchored = Some(fit_checkpoint(cfg, Method::Anchored, &obs, &exp, replicate)?);
                }
                let model = anchored.as_ref().expect("trained above");
                checkpoint_outputs(model, method, &rows, &settings, Some((&obs, &exp)), rep_seed)?
            }
            _ => {
                let model = fit_checkpoint(cfg, method, &obs, &exp, replicate)?;
                checkpoint_outputs(&model, method, &rows, &settings, None, rep_seed)?
            }
        };
        let intervals: Vec<PnsInterval> = outs.iter().map(|o| o.interval).collect();
        let valid: Vec<bool> = outs.iter().map(|o| o.atoms_valid).collect();
        let mut m = evaluate(
            method,
            EvalInputs {
                intervals: &intervals,
                oracle_pns: &oracle_pns,
                oracle_bounds: &oracle_bounds,
                atoms_valid: &valid,
            },
            cfg.alpha,
        )?;
        m.replicate = replicate;
        m.n_obs = n_obs;
        m.n_exp = n_exp;
        metrics.push(m);
        for (i, o) in outs.iter().enumerate() {
            points.push(PointRecord {
                replicate,
                point: i,
                method,
                lower: o.interval.lower,
                upper: o.interval.upper,
                crossed: o.interval.crossed,
                kappa_lower: o.interval.kappa_lower,
                kappa_upper: o.interval.kappa_upper,
                base_lower: o.base.lower,
                base_upper: o.base.upper,
                atoms_valid: o.atoms_valid,
                oracle_pns: oracle_pns[i],
                oracle_lower: oracle_bounds[i].0,
                oracle_upper: oracle_bounds[i].1,
            });
        }
    }
    Ok(ReplicateOutput { metrics, points })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn points_csv(points: &[PointRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in points {
        w.serialize(p)?;
    }
    w.into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

fn shard_paths(dir: &Path, r: usize) -> (PathBuf, PathBuf) {
    (
        dir.join("replicates").join(format!("rep-{r:04}.csv")),
        dir.join("points").join(format!("rep-{r:04}.csv")),
    )
}

/// Loads a finished shard, if present and readable.
fn load_shard(dir: &Path, r: usize) -> Option<Vec<ReplicateMetrics>> {
    let (m, p) = shard_paths(dir, r);
    if !p.exists() {
        return None;
    }
    let rows = read_replicates_csv(fs::File::open(m).ok()?).ok()?;
    (!rows.is_empty()).then_some(rows)
}

fn run_or_resume(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    dir: &Path,
    n_obs: usize,
    n_exp: usize,
    r: usize,
) -> Result<Vec<ReplicateMetrics>> {
    if let Some(rows) = load_shard(dir, r) {
        return Ok(rows);
    }
    let out = run_replicate(cfg, scenario, n_obs, n_exp, r)?;
    let (m, p) = shard_paths(dir, r);
    write_atomic(&p, &points_csv(&out.points)?)?;
    let mut buf = Vec::new();
    write_replicates_csv(&out.metrics, &mut buf)?;
    write_atomic(&m, &buf)?;
    Ok(out.metrics)
}

fn run_all(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    dir: &Path,
    n_obs: usize,
    n_exp: usize,
) -> Result<Vec<Vec<ReplicateMetrics>>> {
    let reps = 0..cfg.replicates;
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
        pool.install(|| {
            reps.into_par_iter()
                .map(|r| run_or_resume(cfg, scenario, dir, n_obs, n_exp, r))
                .collect()
        })
    }
    #[cfg(not(feature = "parallel"))]
    {
        reps.map(|r| run_or_resume(cfg, scenario, dir, n_obs, n_exp, r))
            .collect()
    }
}

/// Directory name of one sweep setting.
pub fn setting_dir(n_obs: usize, n_exp: usize) -> String {
    format!("n_obs-{n_obs}_n_exp-{n_exp}")
}

/// Aggregates replicate rows per method, in configured method order.
pub fn aggregate_by_method(cfg: &ExperimentConfig, rows: &[ReplicateMetrics]) -> Result<Vec<MetricsReport>> {
    cfg.methods
        .iter()
        .map(|&m| {
            let sel: Vec<ReplicateMetrics> = rows.iter().filter(|r| r.method == m).cloned().collect();
            if sel.len() >= 2 {
                aggregate_replicates(&sel)
            } else {
                // a single replicate aggregates to itself with a zero-width interval
                let mut two = sel.clone();
                two.extend(sel);
                aggregate_replicates(&two).map(|mut r| {
                    r.n_replicates = 1;
                    r
                })
            }
        })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Runs (or resumes) every setting of an experiment under `out_dir`.
///
/// Writes per setting `replicates/`, `points/`, `replicates.csv`,
/// `points.csv` and `aggregate.json`, and at the top level the resolved
/// config and an `aggregate.json` covering all settings.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<MetricsReport>> {
    cfg.validate()?;
    let scenario = Scenario::from_config(&cfg.data.scm)?;
    fs::create_dir_all(out_dir)?;
    write_atomic(&out_dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    let settings = cfg.settings();
    let single = cfg.sweep.is_none();
    let mut all = Vec::new();
    for (n_obs, n_exp) in settings {
        let dir = if single {
            out_dir.to_path_buf()
        } else {
            out_dir.join(setting_dir(n_obs, n_exp))
        };
        fs::create_dir_all(dir.join("replicates"))?;
        fs::create_dir_all(dir.join("points"))?;
        let shards = run_all(cfg, &scenario, &dir, n_obs, n_exp)?;
        let rows: Vec<ReplicateMetrics> = shards.into_iter().flatten().collect();
        let mut buf = Vec::new();
        write_replicates_csv(&rows, &mut buf)?;
        write_atomic(&dir.join("replicates.csv"), &buf)?;
        let mut points = Vec::new();
        for r in 0..cfg.replicates {
            let (_, p) = shard_paths(&dir, r);
            let text = fs::read(&p)?;
            let mut rdr = csv::Reader::from_reader(&text[..]);
            for rec in rdr.deserialize() {
                let rec: PointRecord = rec?;
                points.push(rec);
            }
        }
        write_atomic(&dir.join("points.csv"), &points_csv(&points)?)?;
        let reports = aggregate_by_method(cfg, &rows)?;
        if !single {
            write_json(&dir.join("aggregate.json"), &reports)?;
        }
        all.extend(reports);
    }
    write_json(&out_dir.join("aggregate.json"), &all)?;
    Ok(all)
}

/// Reads every per-point record of a finished single-setting run.
pub fn read_points(dir: &Path) -> Result<Vec<PointRecord>> {
    let path = dir.join("points.csv");
    if !path.exists() {
        return Err(Error::MissingResults(path.display().to_string()));
    }
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| Ok(r?)).collect()
}

/// Oracle-only helper used by the dump and tests: bounds and PNS at rows.
pub fn oracle_table(scenario: &Scenario, rows: &[f64]) -> Result<Vec<(AtomVector, PnsInterval, f64)>> {
    rows.chunks_exact(scenario.d_obs())
        .map(|z| {
            let (a, pns) = scenario.oracle(z)?;
            Ok((a, plug_in_interval(&a).with_method(Method::Oracle), pns))
        })
        .collect()
}

/// Terms at oracle atoms, for cross-checks.
pub fn oracle_terms(scenario: &Scenario, z: &[f64]) -> Result<crate::bounds::BoundTerms> {
    Ok(bound_terms(&scenario.oracle(z)?.0))
}
