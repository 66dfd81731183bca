use std::fs;

use pns_core::harness::config::ExperimentConfig;
use pns_core::harness::experiment::{read_points, run_experiment};
use pns_core::harness::plot::{emit_plot_data, read_aggregate};

fn smoke() -> ExperimentConfig {
    ExperimentConfig::preset("smoke").unwrap()
}

#[test]
fn smoke_run_is_resumable_and_deterministic() {
    let cfg = smoke();
    let a = tempfile::tempdir().unwrap();
    let reports = run_experiment(&cfg, a.path()).unwrap();
    assert_eq!(reports.len(), cfg.methods.len());
    let first = fs::read(a.path().join("aggregate.json")).unwrap();

    // drop one shard and the merged outputs, then resume
    fs::remove_file(a.path().join("points/rep-0001.csv")).unwrap();
    fs::remove_file(a.path().join("replicates/rep-0001.csv")).unwrap();
    fs::remove_file(a.path().join("aggregate.json")).unwrap();
    run_experiment(&cfg, a.path()).unwrap();
    assert_eq!(fs::read(a.path().join("aggregate.json")).unwrap(), first);

    let b = tempfile::tempdir().unwrap();
    run_experiment(&cfg, b.path()).unwrap();
    for f in ["aggregate.json", "replicates.csv", "points.csv"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }

    let points = read_points(a.path()).unwrap();
    assert_eq!(points.len(), cfg.replicates * cfg.data.n_test * cfg.methods.len());
    for p in &points {
        assert!(p.lower <= p.base_lower + 1e-12 && p.upper >= p.base_upper - 1e-12);
    }
}

#[test]
fn plot_rows_match_aggregate() {
    let cfg = smoke();
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&cfg, dir.path()).unwrap();
    let rows = emit_plot_data(dir.path()).unwrap();
    let agg = read_aggregate(dir.path()).unwrap();
    assert_eq!(rows.len(), agg.len() * 6);
    for r in &rows {
        let rep = agg.iter().find(|a| a.method == r.method).unwrap();
        let (_, s) = rep.metrics().into_iter().find(|(n, _)| *n == r.metric).unwrap();
        assert_eq!((s.value, s.ci_lo, s.ci_hi), (r.value, r.ci_lo, r.ci_hi));
    }
    let text = fs::read_to_string(dir.path().join("plot_data.csv")).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "method,n_obs,n_exp,metric,value,ci_lo,ci_hi"
    );
}

#[test]
fn missing_results_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        emit_plot_data(dir.path()),
        Err(pns_core::Error::MissingResults(_))
    ));
}
