//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! nonzero when a criterion fails that is not listed in `KNOWN_SHORTFALLS`.
//!
//! `PNS_ACCEPTANCE_ONLY=1,4,9` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use pns_core::baselines::CellFrequency;
use pns_core::bootstrap::{
    mb_critical_values, InfluenceCache, InfluenceConfig, InfluenceEngine, InfluenceMode,
};
use pns_core::bounds::{
    bound_terms, check_feasibility, envelope_interval, plug_in_interval, BoundTerms, Method,
    TERM_COEFFICIENTS,
};
use pns_core::data::{GroupedData, Regime};
use pns_core::enn::{critical_values, BoundTermStats};
use pns_core::eval::{read_replicates_csv, ReplicateMetrics};
use pns_core::harness::config::ExperimentConfig;
use pns_core::harness::experiment::{read_points, run_experiment, stream_seed, streams, Scenario};
use pns_core::harness::oracle::oracle_dump;
use pns_core::harness::plot::emit_plot_data;
use pns_core::neural::{
    self, forward, forward_batch, loss, loss_value, loss_value_frozen_anchors,
    min_abs_preactivation, AnchoredModel, AnchoredParams, Architecture, GradientMode,
};
use pns_core::optim::TrainConfig;
use pns_core::scm_lowdim::LowDimScm;

/// Criteria expected to miss at desk scale; see the README.
const KNOWN_SHORTFALLS: [usize; 1] = [11];

/// Point coverage of the pre-registered pilot (`lowdim-desk`, seed 777,
/// 10 replicates): ENN-corrected, anchored, best plug-in.
const PILOT_COVERAGE: [(Method, f64); 3] = [
    (Method::AnchEnn, 0.9147),
    (Method::Anchored, 0.6370),
    (Method::TLearner, 0.5313),
];
const PILOT_BAND: f64 = 0.08;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("PNS_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |id: usize| only.as_ref().is_none_or(|v| v.contains(&id));

    let mut desk: Option<DeskRun> = None;
    let mut failed = Vec::new();
    for id in 1..=12 {
        if !wanted(id) {
            continue;
        }
        let start = Instant::now();
        let v = match id {
            1 => feasibility_by_construction(),
            2 => oracle_exactness(),
            3 => sampling_matches_enumeration(),
            4 => gradient_correctness(),
            5 => extremum_bias(),
            6..=8 => {
                let run = desk.get_or_insert_with(DeskRun::new);
                match id {
                    6 => violation_ordering(run),
                    7 => coverage_ordering(run),
                    _ => correction_monotonicity(run),
                }
            }
            9 => critical_value_oracle(),
            10 => influence_correctness(),
            11 => sensitivity_trend(),
            _ => determinism(),
        };
        let secs = start.elapsed().as_secs_f64();
        println!(
            "{} criterion {id:>2}: {} ({secs:.1}s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        if !v.pass {
            failed.push(id);
        }
    }
    let unexpected: Vec<usize> = failed
        .iter()
        .copied()
        .filter(|id| !KNOWN_SHORTFALLS.contains(id))
        .collect();
    println!(
        "acceptance: {} failed {:?}, known shortfalls {:?}, unexpected {:?}",
        failed.len(),
        failed,
        KNOWN_SHORTFALLS,
        unexpected
    );
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}

fn feasibility_by_construction() -> Verdict {
    const DRAWS: usize = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let arch = Architecture::new(4, 8, 2);
    let mut failures = 0;
    let mut extreme = 0;
    for i in 0..DRAWS {
        let mut params = AnchoredParams::init(arch, i as u64);
        // scales up to ~30x push the heads deep into saturation
        let scale = 10f64.powf(rng.random_range(-1.0..1.5));
        params.values.iter_mut().for_each(|v| *v *= scale);
        let z: Vec<f64> = (0..4)
            .map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal))
            .collect::<Vec<f64>>();
        let out = forward(&params, &z).unwrap();
        if out.logits.iter().chain(&out.deltas).any(|v| v.abs() > 20.0) {
            extreme += 1;
        }
        if !check_feasibility(&out.atoms, 1e-9) {
            failures += 1;
        }
    }
    verdict(
        failures == 0,
        format!("{failures} infeasible of {DRAWS} draws ({extreme} with a head output beyond ±20)"),
    )
}

fn oracle_exactness() -> Verdict {
    let scm = LowDimScm::li_model_1();
    let weight_sum: f64 = scm.hidden_configs().iter().map(|(_, w)| w).sum();
    let mut worst_simplex: f64 = (weight_sum - 1.0).abs();
    let mut infeasible = 0;
    let mut outside = 0;
    for z in scm.sample_observed_points(1000, 2) {
        let a = scm.marginal_atoms(&z).unwrap();
        let pns = scm.marginal_pns(&z).unwrap();
        worst_simplex = worst_simplex.max((a.joint().iter().sum::<f64>() - 1.0).abs());
        if !check_feasibility(&a, 1e-12) {
            infeasible += 1;
        }
        let t = bound_terms(&a);
        if pns < t.lower_envelope().0 - 1e-12 || pns > t.upper_envelope().0 + 1e-12 {
            outside += 1;
        }
    }
    verdict(
        worst_simplex <= 1e-12 && infeasible == 0 && outside == 0,
        format!(
            "1000 points: max partition error {worst_simplex:.1e}, {infeasible} infeasible, {outside} PNS outside bounds"
        ),
    )
}

fn sampling_matches_enumeration() -> Verdict {
    const N: usize = 1_000_000;
    let scm = LowDimScm::li_model_1();
    let z_obs = scm.sample_observed_points(1, 3).remove(0);
    let atoms = scm.marginal_atoms(&z_obs).unwrap();
    let d_obs = scm.d_obs();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let full = |rng: &mut ChaCha8Rng| {
        let mut z = scm.draw_z(rng);
        z[..d_obs].copy_from_slice(&z_obs);
        z
    };
    let mut cells = [0usize; 4];
    for _ in 0..N {
        let z = full(&mut rng);
        let (x, y) = scm.simulate_unit(&z, Regime::Observational, &mut rng);
        cells[(2 * x + y) as usize] += 1;
    }
    let mut arm_n = [0usize; 2];
    let mut arm_y = [0usize; 2];
    for _ in 0..N {
        let z = full(&mut rng);
        let (x, y) = scm.simulate_unit(&z, Regime::Experimental, &mut rng);
        arm_n[x as usize] += 1;
        arm_y[x as usize] += y as usize;
    }
    let mut worst: f64 = 0.0;
    for (c, &p) in atoms.joint().iter().enumerate() {
        let se = (p * (1.0 - p) / N as f64).sqrt();
        worst = worst.max((cells[c] as f64 / N as f64 - p).abs() / se);
    }
    for x in 0..2 {
        let mu = atoms.mu(x as u8);
        let se = (mu * (1.0 - mu) / arm_n[x] as f64).sqrt();
        worst = worst.max((arm_y[x] as f64 / arm_n[x] as f64 - mu).abs() / se);
    }
    verdict(
        worst <= 3.0,
        format!("largest deviation {worst:.2} binomial SEs over 4 cells and 2 arms (limit 3)"),
    )
}

/// Random toy batch with integer counts and standardized-scale covariates.
fn toy_batch(rng: &mut ChaCha8Rng, dim: usize) -> GroupedData {
    let groups = rng.random_range(4..9);
    let mut data = GroupedData::empty(dim);
    for _ in 0..groups {
        for _ in 0..dim {
            data.z.push(StandardNormal.sample(rng));
        }
        data.obs.push([(); 4].map(|_| rng.random_range(0..4) as f64));
        data.exp.push([(); 4].map(|_| rng.random_range(0..4) as f64));
    }
    data.obs[0][0] += 1.0;
    data.exp[0][3] += 1.0;
    data
}

fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let down = f(&xp);
            xp[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn gradient_correctness() -> Verdict {
    const CONFIGS: usize = 100;
    const H: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = [0.0f64; 2];
    let mut accepted = 0;
    let mut rejected = 0;
    let mut largest = 0;
    while accepted < CONFIGS {
        let arch = Architecture::new(
            rng.random_range(2..5),
            rng.random_range(3..7),
            rng.random_range(1..3),
        );
        let params = AnchoredParams::init(arch, rng.random());
        let batch = toy_batch(&mut rng, arch.input_dim);
        // finite differences straddling a ReLU kink are meaningless
        if min_abs_preactivation(&params, &batch.z).unwrap() < 1e-3 {
            rejected += 1;
            continue;
        }
        accepted += 1;
        largest = largest.max(params.len());
        let with = |v: &[f64]| AnchoredParams::from_values(arch, v.to_vec()).unwrap();
        let checks: [(GradientMode, Box<dyn Fn(&[f64]) -> f64>); 2] = [
            (
                GradientMode::Full,
                Box::new(|v: &[f64]| loss_value(&with(v), &batch).unwrap().total()),
            ),
            (
                GradientMode::Blocked,
                Box::new(|v: &[f64]| {
                    loss_value_frozen_anchors(&with(v), &params, &batch).unwrap().total()
                }),
            ),
        ];
        for (k, (mode, f)) in checks.iter().enumerate() {
            let (_, grad) = loss(&params, &batch, *mode).unwrap();
            let fd = central_difference(f, &params.values, H);
            for (g, d) in grad.iter().zip(&fd) {
                let rel = (g - d).abs() / g.abs().max(d.abs()).max(1e-6);
                worst[k] = worst[k].max(rel);
            }
        }
    }
    verdict(
        worst.iter().all(|w| *w < 1e-3),
        format!(
            "{CONFIGS} configs (≤{largest} params, {rejected} rejected near kinks): max relative error full {:.1e}, blocked {:.1e} (limit 1e-3)",
            worst[0], worst[1]
        ),
    )
}

/// Upper tail `P(Binomial(n, 1/2) >= k)`.
fn binomial_upper_tail(n: u64, k: u64) -> f64 {
    let ln_choose = |i: u64| -> f64 {
        (1..=i).map(|t| ((n - i + t) as f64 / t as f64).ln()).sum()
    };
    (k..=n)
        .map(|i| (ln_choose(i) - n as f64 * std::f64::consts::LN_2).exp())
        .sum()
}

fn extremum_bias() -> Verdict {
    let noisy = BoundTerms {
        lower: [0.02, 0.40, 0.68, 0.22],
        upper: [1.0; 4],
    };
    let toy = envelope_interval(&noisy).lower;

    const REPS: u64 = 200;
    let scenario = Scenario::Low(LowDimScm::li_model_1());
    let mut positive = 0;
    let mut mean_gap = 0.0;
    for r in 0..REPS {
        let seed = 90_000 + r;
        let obs = scenario
            .sample(20_000, Regime::Observational, stream_seed(seed, streams::OBS))
            .unwrap();
        let exp = scenario
            .sample(10_000, Regime::Experimental, stream_seed(seed, streams::EXP))
            .unwrap();
        let cf = CellFrequency::fit(&obs, &exp).unwrap();
        let rows = scenario.test_points(200, stream_seed(seed, streams::TEST));
        let mut gaps = Vec::new();
        for z in rows.chunks_exact(scenario.d_obs()) {
            if let Some(p) = cf.predict(z) {
                let oracle = plug_in_interval(&scenario.oracle(z).unwrap().0);
                gaps.push(p.interval.lower - oracle.lower);
            }
        }
        let gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
        mean_gap += gap / REPS as f64;
        if gap > 0.0 {
            positive += 1;
        }
    }
    let p = binomial_upper_tail(REPS, positive);
    verdict(
        toy == 0.68 && p < 0.05,
        format!(
            "toy lower {toy} vs truth 0.40; {positive}/{REPS} replicates with plug-in lower above oracle (mean gap {mean_gap:+.4}, sign-test p = {p:.1e})"
        ),
    )
}

struct DeskRun {
    rows: Vec<ReplicateMetrics>,
    points: Vec<pns_core::harness::experiment::PointRecord>,
    replicates: usize,
}

impl DeskRun {
    fn new() -> Self {
        let cfg = ExperimentConfig::preset("lowdim-desk").unwrap();
        let dir = tempfile::tempdir().unwrap();
        run_experiment(&cfg, dir.path()).unwrap();
        let rows = read_replicates_csv(fs::File::open(dir.path().join("replicates.csv")).unwrap()).unwrap();
        let points = read_points(dir.path()).unwrap();
        Self {
            rows,
            points,
            replicates: cfg.replicates,
        }
    }

    fn mean(&self, m: Method, f: fn(&ReplicateMetrics) -> f64) -> f64 {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.method == m).map(f).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn violation_ordering(run: &DeskRun) -> Verdict {
    let s = 1.0 - run.mean(Method::SLearner, |r| r.pct_valid);
    let t = 1.0 - run.mean(Method::TLearner, |r| r.pct_valid);
    let anchored = [Method::Anchored, Method::MbLastLayer, Method::AnchEnn];
    let anchored_invalid = run
        .rows
        .iter()
        .filter(|r| anchored.contains(&r.method) && r.pct_valid != 1.0)
        .count();
    verdict(
        s > 0.10 && t > 0.10 && anchored_invalid == 0,
        format!(
            "{} replicates: violation S {:.1}%, T {:.1}%, anchored methods {} replicates with any violation",
            run.replicates,
            100.0 * s,
            100.0 * t,
            anchored_invalid
        ),
    )
}

fn coverage_ordering(run: &DeskRun) -> Verdict {
    let cov = |m| run.mean(m, |r| r.point_coverage);
    let enn = cov(Method::AnchEnn);
    let anch = cov(Method::Anchored);
    let (best_name, best) = [Method::SLearner, Method::TLearner]
        .into_iter()
        .map(|m| (m, cov(m)))
        .fold((Method::SLearner, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    let pilot: Vec<String> = PILOT_COVERAGE
        .iter()
        .map(|(m, p)| {
            let v = if *m == Method::TLearner { best } else { cov(*m) };
            let name = if *m == Method::TLearner { "best plug-in" } else { m.name() };
            format!(
                "{name} {:+.3}{}",
                v - p,
                if (v - p).abs() <= PILOT_BAND { "" } else { " (outside ±0.08)" }
            )
        })
        .collect();
    verdict(
        enn > anch && anch > best && enn >= 0.90,
        format!(
            "point coverage anch_enn {enn:.3} > anchored {anch:.3} > {best_name} {best:.3}; vs pilot: {}",
            pilot.join(", ")
        ),
    )
}

fn correction_monotonicity(run: &DeskRun) -> Verdict {
    let mut per_method: BTreeMap<Method, usize> = BTreeMap::new();
    let mut violations = 0;
    for p in &run.points {
        *per_method.entry(p.method).or_default() += 1;
        if !(p.lower <= p.base_lower && p.upper >= p.base_upper) {
            violations += 1;
        }
    }
    verdict(
        violations == 0,
        format!(
            "{violations} exceptions over {} point intervals across {} methods",
            run.points.len(),
            per_method.len()
        ),
    )
}

fn empirical_quantile(mut v: Vec<f64>, level: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = ((level * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[k - 1]
}

fn critical_value_oracle() -> Verdict {
    const M: usize = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut draws = Vec::with_capacity(8 * M);
    for _ in 0..M {
        draws.push(0.0);
        for j in 1..8 {
            let z: f64 = StandardNormal.sample(&mut rng);
            draws.push(0.1 * j as f64 + 0.02 * (j + 1) as f64 * z);
        }
    }
    let stats = BoundTermStats::from_draws(draws).unwrap();
    let cv = critical_values(&stats, 0.975).unwrap();

    // brute force: quantiles of the max of 3 and of 4 standard normals
    let mut oracle_rng = ChaCha8Rng::seed_from_u64(10);
    let mut max_of = |k: usize| {
        let v: Vec<f64> = (0..1_000_000)
            .map(|_| {
                (0..k)
                    .map(|_| StandardNormal.sample(&mut oracle_rng))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        empirical_quantile(v, 0.975)
    };
    let (ql, qu) = (max_of(3), max_of(4));
    let el = (cv.kappa_l - ql).abs() / ql;
    let eu = (cv.kappa_u - qu).abs() / qu;
    verdict(
        el < 0.05 && eu < 0.05,
        format!(
            "kappa_l {:.4} vs {ql:.4} ({:.2}%), kappa_u {:.4} vs {qu:.4} ({:.2}%), M = {M}",
            cv.kappa_l,
            100.0 * el,
            cv.kappa_u,
            100.0 * eu
        ),
    )
}

/// Fourth-order central difference of the atoms at every group with respect
/// to each final-layer parameter: `jac[g][a][k]`.
fn head_jacobians(params: &AnchoredParams, z: &[f64]) -> Vec<Vec<Vec<f64>>> {
    let range = params.head_range();
    let groups = z.len() / params.arch.input_dim;
    let h = 1e-3;
    let mut jac = vec![vec![vec![0.0; range.len()]; 6]; groups];
    let mut p = params.clone();
    for (k, i) in range.clone().enumerate() {
        let mut eval = |delta: f64| {
            p.values[i] = params.values[i] + delta;
            forward_batch(&p, z).unwrap()
        };
        let (a2, a1, m1, m2) = (eval(2.0 * h), eval(h), eval(-h), eval(-2.0 * h));
        p.values[i] = params.values[i];
        for g in 0..groups {
            let (a2, a1, m1, m2) = (
                a2[g].atoms.to_array(),
                a1[g].atoms.to_array(),
                m1[g].atoms.to_array(),
                m2[g].atoms.to_array(),
            );
            for a in 0..6 {
                jac[g][a][k] = (-a2[a] + 8.0 * a1[a] - 8.0 * m1[a] + m2[a]) / (12.0 * h);
            }
        }
    }
    jac
}

/// Direct dense influence for the final layer, written from the definitions.
fn dense_influence(model: &AnchoredModel, data: &GroupedData, z_raw: &[f64], damping: f64) -> Vec<[f64; 8]> {
    let params = &model.params;
    let p = params.head_range().len();
    let n_obs: f64 = data.obs.iter().flatten().sum();
    let n_exp: f64 = data.exp.iter().flatten().sum();
    let (w_obs, w_exp, n) = (1.0 / n_obs, 1.0 / n_exp, n_obs + n_exp);
    let jac = head_jacobians(params, &data.z);
    let atoms: Vec<_> = forward_batch(params, &data.z)
        .unwrap()
        .iter()
        .map(|o| o.atoms)
        .collect();
    let mut hess = DMatrix::<f64>::identity(p, p) * damping;
    for (g, a) in atoms.iter().enumerate() {
        let joint = a.joint();
        let mut d = [0.0; 6];
        for c in 0..4 {
            d[c] = w_obs * data.obs[g][c] / (joint[c] * joint[c]);
        }
        for x in 0..2 {
            let mu = a.mu(x as u8);
            let (e0, e1) = (data.exp[g][2 * x], data.exp[g][2 * x + 1]);
            d[4 + x] = w_exp * (e1 / (mu * mu) + e0 / ((1.0 - mu) * (1.0 - mu)));
        }
        let j = DMatrix::from_fn(6, p, |r, c| jac[g][r][c]);
        hess += j.transpose() * DMatrix::from_diagonal(&DVector::from_row_slice(&d)) * &j;
    }
    let lu = hess.lu();
    let z = model.standardizer.transform(z_raw);
    let jz = &head_jacobians(params, &z)[0];
    let mut cells: Vec<(usize, usize, f64)> = Vec::new();
    for (g, a) in atoms.iter().enumerate() {
        let joint = a.joint();
        for c in 0..4 {
            if data.obs[g][c] > 0.0 {
                cells.push((g, c, -w_obs / joint[c]));
            }
        }
        for x in 0..2 {
            let mu = a.mu(x as u8);
            for y in 0..2 {
                if data.exp[g][2 * x + y] > 0.0 {
                    let s = if y == 1 { -1.0 / mu } else { 1.0 / (1.0 - mu) };
                    cells.push((g, 4 + x, w_exp * s));
                }
            }
        }
    }
    let mut psi = vec![[0.0; 8]; cells.len()];
    for (t, (coef, _)) in TERM_COEFFICIENTS.iter().enumerate() {
        let b = DVector::from_fn(p, |k, _| (0..6).map(|a| coef[a] * jz[a][k]).sum());
        if b.iter().all(|v| *v == 0.0) {
            continue;
        }
        let v = lu.solve(&b).unwrap();
        for (row, &(g, idx, s)) in cells.iter().enumerate() {
            let jv: f64 = (0..p).map(|k| jac[g][idx][k] * v[k]).sum();
            psi[row][t] = -n * s * jv;
        }
    }
    psi
}

fn influence_correctness() -> Verdict {
    let scenario = Scenario::Low(LowDimScm::li_model_1());
    let obs = scenario.sample(600, Regime::Observational, 11).unwrap();
    let exp = scenario.sample(600, Regime::Experimental, 12).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.01,
        batch_size: 256,
        epochs: 20,
        eval_every: 0,
        seed: 13,
        ..TrainConfig::default()
    };
    let (model, _) = neural::train(14, &obs, &exp, 8, 2, &cfg).unwrap();
    let data = GroupedData::from_datasets(&obs, &exp, &model.standardizer).unwrap();
    let p_last = model.params.head_range().len();
    let damping = 1e-3;
    let icfg = InfluenceConfig {
        mode: InfluenceMode::LastLayer,
        damping,
        cg_iters: 10 * p_last,
        ..InfluenceConfig::default()
    };
    let engine = InfluenceEngine::new(&model, &data, icfg).unwrap();
    let mut worst: f64 = 0.0;
    let points = scenario.test_points(3, 15);
    for z in points.chunks_exact(scenario.d_obs()) {
        let cg = engine.influence_at(z).unwrap();
        let direct = dense_influence(&model, &data, z, damping);
        let scale = direct.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in cg.psi.iter().zip(&direct) {
            for j in 0..8 {
                worst = worst.max((a[j] - b[j]).abs() / scale);
            }
        }
    }

    // single-term unit influence: the statistic is exactly standard normal
    const ROWS: usize = 400;
    let mut psi = vec![[0.0; 8]; ROWS];
    for row in &mut psi {
        row[1] = 1.0;
        row[4] = 1.0;
    }
    let cache = InfluenceCache::from_rows(psi.clone(), BoundTerms::zeros());
    let cv = mb_critical_values(&cache, 20_000, 0.05, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let s = (ROWS as f64).sqrt() / ROWS as f64;
    let (mut wl, mut wu) = (Vec::new(), Vec::new());
    for _ in 0..20_000 {
        let (mut sl, mut su) = (0.0, 0.0);
        for row in &psi {
            let xi: f64 = StandardNormal.sample(&mut rng);
            sl += xi * row[1];
            su += xi * row[4];
        }
        wl.push(sl / (ROWS as f64 * s));
        wu.push(-su / (ROWS as f64 * s));
    }
    let (dl, du) = (empirical_quantile(wl, 0.975), empirical_quantile(wu, 0.975));
    let el = (cv.kappa_l - dl).abs() / dl;
    let eu = (cv.kappa_u - du).abs() / du;
    verdict(
        worst <= 1e-6 && el < 0.05 && eu < 0.05,
        format!(
            "last-layer CG vs dense solve ({p_last} params): max relative error {worst:.1e} (limit 1e-6); bootstrap kappa {:.3}/{:.3} vs direct simulation {dl:.3}/{du:.3}",
            cv.kappa_l, cv.kappa_u
        ),
    )
}

fn sensitivity_trend() -> Verdict {
    let start = Instant::now();
    let cfg = ExperimentConfig::preset("lowdim-sweep").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let reports = run_experiment(&cfg, dir.path()).unwrap();
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let mut enn: Vec<_> = reports.iter().filter(|r| r.method == Method::AnchEnn).collect();
    enn.sort_by_key(|r| r.n_exp);
    let widths: Vec<f64> = enn.iter().map(|r| r.mean_width.value).collect();
    let covs: Vec<f64> = enn.iter().map(|r| r.id_set_coverage.value).collect();
    let monotone = widths.windows(2).all(|w| w[1] <= w[0]);
    let mean = covs.iter().sum::<f64>() / covs.len() as f64;
    let spread = covs.iter().map(|c| (c - mean).abs()).fold(0.0, f64::max);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ");
    verdict(
        monotone && spread <= 0.05 && minutes < 30.0,
        format!(
            "n_exp {:?}: width [{}] ({}), ID-set coverage [{}] (max deviation {spread:.3} from mean {mean:.3}, limit 0.05), {minutes:.1} min",
            enn.iter().map(|r| r.n_exp).collect::<Vec<_>>(),
            fmt(&widths),
            if monotone { "monotone" } else { "not monotone" },
            fmt(&covs)
        ),
    )
}

fn same_files(a: &Path, b: &Path, files: &[&str]) -> Vec<String> {
    files
        .iter()
        .filter(|f| fs::read(a.join(f)).ok() != fs::read(b.join(f)).ok())
        .map(|f| f.to_string())
        .collect()
}

fn determinism() -> Verdict {
    const FILES: [&str; 5] = [
        "aggregate.json",
        "replicates.csv",
        "points.csv",
        "plot_data.csv",
        "config.toml",
    ];
    let mut differing = Vec::new();
    let mut desk = ExperimentConfig::preset("lowdim-desk").unwrap();
    desk.replicates = 2;
    desk.data.n_test = 50;
    for cfg in [ExperimentConfig::preset("smoke").unwrap(), desk] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        for d in [&a, &b] {
            run_experiment(&cfg, d.path()).unwrap();
            emit_plot_data(d.path()).unwrap();
        }
        // a resumed run must match the uninterrupted one
        fs::remove_file(b.path().join("replicates/rep-0000.csv")).unwrap();
        fs::remove_file(b.path().join("points/rep-0000.csv")).unwrap();
        run_experiment(&cfg, b.path()).unwrap();
        emit_plot_data(b.path()).unwrap();
        differing.extend(
            same_files(a.path(), b.path(), &FILES)
                .into_iter()
                .map(|f| format!("{}:{f}", cfg.name)),
        );
    }
    let scenario = Scenario::Low(LowDimScm::li_model_1());
    let z = scenario.test_points(10, 18);
    let d1 = oracle_dump(&scenario, &z).unwrap().to_csv().unwrap();
    let d2 = oracle_dump(&scenario, &z).unwrap().to_csv().unwrap();
    if d1 != d2 {
        differing.push("oracle dump".into());
    }
    verdict(
        differing.is_empty(),
        format!(
            "two fresh runs and one resumed run of smoke and a reduced desk config, plus the oracle dump: {}",
            if differing.is_empty() {
                "byte-identical".to_string()
            } else {
                format!("differences in {}", differing.join(", "))
            }
        ),
    )
}
