//! `pnsb`: experiment harness for bounds on the probability of necessity and
//! sufficiency.
//!
//! Every subcommand reads an experiment config (a TOML file or a bundled
//! preset name) and accepts `--set key=value` overrides with dotted config
//! paths. Success prints a JSON summary on stdout and exits 0. Failure prints
//! one JSON error record on stderr and exits nonzero.

mod io;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use pns_core::bounds::Method;
use pns_core::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use pns_core::data::{Dataset, Regime};
use pns_core::eval::{evaluate, EvalInputs, ReplicateMetrics};
use pns_core::harness::config::{ExperimentConfig, SweepConfig, PRESETS};
use pns_core::harness::experiment::{
    checkpoint_outputs, fit_checkpoint, run_experiment, stream_seed, streams, MethodSettings,
    Scenario,
};
use pns_core::harness::oracle::oracle_dump;
use pns_core::harness::plot::emit_plot_data;
use pns_core::{Error, Result};

#[derive(Parser)]
#[command(name = "pnsb", version, about = "Finite-sample PNS bounds: data, training, inference and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every replicate of an experiment and write results.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run an experiment over a grid of sample sizes.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, short)]
        out: PathBuf,
        /// Observational sizes, comma separated.
        #[arg(long, value_delimiter = ',')]
        n_obs_grid: Vec<usize>,
        /// Experimental sizes, comma separated.
        #[arg(long, value_delimiter = ',')]
        n_exp_grid: Vec<usize>,
    },
    /// Sample one replicate's observational, experimental and test data.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        replicate: usize,
    },
    /// Train one method on generated data and write a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, short)]
        method: String,
        /// Directory holding `obs.csv` and `exp.csv`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        replicate: usize,
    },
    /// Produce intervals from a checkpoint at covariate points.
    Infer {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        /// CSV with columns `z0..`.
        #[arg(long)]
        points: PathBuf,
        /// Defaults to the checkpoint's own method.
        #[arg(long, short)]
        method: Option<String>,
        /// Training data directory; required by bootstrap methods.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        replicate: usize,
    },
    /// Score an interval file against the config's oracle.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        intervals: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Exact oracle atoms, bounds and PNS with audits.
    OracleDump {
        #[command(flatten)]
        config: ConfigArgs,
        /// CSV with columns `z0..`; otherwise `--n` population draws.
        #[arg(long)]
        points: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Long-format plot table from a finished run.
    PlotData {
        #[arg(long)]
        results: PathBuf,
    },
    /// List the bundled presets.
    Presets,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file path or bundled preset name.
    #[arg(long, short, default_value = "lowdim-desk")]
    config: String,
    /// Override a config key, e.g. `--set train.epochs=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    n_obs: Option<usize>,
    #[arg(long)]
    n_exp: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let text = if Path::new(&self.config).is_file() {
            fs::read_to_string(&self.config)?
        } else if let Some((_, t)) = PRESETS.iter().find(|(n, _)| *n == self.config) {
            t.to_string()
        } else {
            return Err(Error::Config {
                path: "--config".into(),
                message: format!("`{}` is neither a file nor a bundled preset", self.config),
            });
        };
        let mut sets: Vec<(String, String)> = Vec::new();
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("replicates", self.replicates.map(|v| v.to_string())),
            ("workers", self.workers.map(|v| v.to_string())),
            ("data.n_obs", self.n_obs.map(|v| v.to_string())),
            ("data.n_exp", self.n_exp.map(|v| v.to_string())),
            ("data.n_test", self.n_test.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                sets.push((k.into(), v));
            }
        }
        for s in &self.set {
            let (k, v) = s.split_once('=').ok_or_else(|| Error::Config {
                path: s.clone(),
                message: "override must look like KEY=VALUE".into(),
            })?;
            sets.push((k.trim().into(), v.trim().into()));
        }
        ExperimentConfig::from_toml(&io::apply_overrides(&text, &sets)?)
    }
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: ErrorBody<'a>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    code: &'a str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<String>,
}

fn emit_error(code: &str, message: String, path: Option<String>) {
    let rec = ErrorRecord {
        error: ErrorBody {
            code,
            message,
            path,
        },
    };
    eprintln!("{}", serde_json::to_string(&rec).expect("error record serializes"));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            emit_error("usage", e.render().to_string().trim().to_string(), None);
            return ExitCode::from(2);
        }
    };
    match dispatch(cli.command) {
        Ok(summary) => {
            if !summary.is_null() {
                println!("{summary}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let path = match &e {
                Error::Config { path, .. } => Some(path.clone()),
                _ => None,
            };
            emit_error(e.code(), e.to_string(), path);
            ExitCode::FAILURE
        }
    }
}

fn parse_method(name: &str) -> Result<Method> {
    Method::from_name(name).ok_or_else(|| {
        Error::InvalidInput(format!(
            "unknown method `{name}` (known: {})",
            Method::ALL.map(|m| m.name()).join(", ")
        ))
    })
}

fn read_pair(dir: &Path) -> Result<(Dataset, Dataset)> {
    let obs = Dataset::read_csv(fs::File::open(dir.join("obs.csv"))?, Regime::Observational)?;
    let exp = Dataset::read_csv(fs::File::open(dir.join("exp.csv"))?, Regime::Experimental)?;
    Ok((obs, exp))
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => Ok(fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn dispatch(cmd: Command) -> Result<serde_json::Value> {
    use serde_json::json;
    match cmd {
        Command::Run { config, out } => {
            let cfg = config.load()?;
            let reports = run_experiment(&cfg, &out)?;
            let rows = emit_plot_data(&out)?;
            Ok(json!({
                "command": "run",
                "out": out,
                "reports": reports.len(),
                "plot_rows": rows.len(),
            }))
        }
        Command::Sweep {
            config,
            out,
            n_obs_grid,
            n_exp_grid,
        } => {
            let mut cfg = config.load()?;
            if !n_obs_grid.is_empty() || !n_exp_grid.is_empty() {
                cfg.sweep = Some(SweepConfig {
                    n_obs: n_obs_grid,
                    n_exp: n_exp_grid,
                });
                cfg.validate()?;
            }
            if cfg.sweep.is_none() {
                return Err(Error::Config {
                    path: "sweep".into(),
                    message: "no sweep grid in the config or on the command line".into(),
                });
            }
            let reports = run_experiment(&cfg, &out)?;
            let rows = emit_plot_data(&out)?;
            Ok(json!({
                "command": "sweep",
                "out": out,
                "settings": cfg.settings().len(),
                "reports": reports.len(),
                "plot_rows": rows.len(),
            }))
        }
        Command::Generate {
            config,
            out,
            replicate,
        } => {
            let cfg = config.load()?;
            let scenario = Scenario::from_config(&cfg.data.scm)?;
            let rep_seed = cfg.seed.wrapping_add(replicate as u64);
            let obs = scenario.sample(cfg.data.n_obs, Regime::Observational, stream_seed(rep_seed, streams::OBS))?;
            let exp = scenario.sample(cfg.data.n_exp, Regime::Experimental, stream_seed(rep_seed, streams::EXP))?;
            let test = scenario.test_points(cfg.data.n_test, stream_seed(rep_seed, streams::TEST));
            fs::create_dir_all(&out)?;
            obs.write_csv(fs::File::create(out.join("obs.csv"))?)?;
            exp.write_csv(fs::File::create(out.join("exp.csv"))?)?;
            io::write_points(&out.join("test.csv"), &test, scenario.d_obs())?;
            Ok(json!({
                "command": "generate",
                "out": out,
                "n_obs": obs.len(),
                "n_exp": exp.len(),
                "n_test": cfg.data.n_test,
            }))
        }
        Command::Train {
            config,
            method,
            data,
            out,
            replicate,
        } => {
            let cfg = config.load()?;
            let method = parse_method(&method)?;
            let (obs, exp) = read_pair(&data)?;
            let ckpt = fit_checkpoint(&cfg, method, &obs, &exp, replicate)?;
            write_checkpoint(&ckpt, std::io::BufWriter::new(fs::File::create(&out)?))?;
            Ok(json!({
                "command": "train",
                "method": method,
                "checkpoint": ckpt.kind_name(),
                "out": out,
            }))
        }
        Command::Infer {
            config,
            model,
            points,
            method,
            data,
            out,
            replicate,
        } => {
            let cfg = config.load()?;
            let ckpt = read_checkpoint(std::io::BufReader::new(fs::File::open(&model)?))?;
            let method = match method {
                Some(m) => parse_method(&m)?,
                None => parse_method(ckpt.kind_name())?,
            };
            let (rows, d) = io::read_points(&points)?;
            let expected = match &ckpt {
                Checkpoint::Anchored(m) => m.standardizer.dim(),
                Checkpoint::Hyper(h) => h.standardizer.dim(),
                Checkpoint::Baseline(b) => b.standardizer.dim(),
            };
            if d != expected {
                return Err(Error::DimensionMismatch {
                    what: "covariate columns",
                    expected,
                    found: d,
                });
            }
            let pair = data.as_deref().map(read_pair).transpose()?;
            let settings = MethodSettings::from_config(&cfg, d);
            let rep_seed = cfg.seed.wrapping_add(replicate as u64);
            let outs = checkpoint_outputs(
                &ckpt,
                method,
                &rows,
                &settings,
                pair.as_ref().map(|(o, e)| (o, e)),
                rep_seed,
            )?;
            let text = io::intervals_csv(&rows, d, method, &outs)?;
            write_or_print(out.as_deref(), &text)?;
            Ok(match out {
                Some(p) => json!({"command": "infer", "method": method, "points": outs.len(), "out": p}),
                None => serde_json::Value::Null,
            })
        }
        Command::Evaluate {
            config,
            intervals,
            out,
        } => {
            let cfg = config.load()?;
            let scenario = Scenario::from_config(&cfg.data.scm)?;
            let groups = io::read_intervals(&intervals, scenario.d_obs())?;
            let mut metrics: Vec<ReplicateMetrics> = Vec::new();
            for g in groups {
                let mut pns = Vec::with_capacity(g.intervals.len());
                let mut bounds = Vec::with_capacity(g.intervals.len());
                for z in g.rows.chunks_exact(scenario.d_obs()) {
                    let (a, p) = scenario.oracle(z)?;
                    let iv = pns_core::bounds::plug_in_interval(&a);
                    pns.push(p);
                    bounds.push((iv.lower, iv.upper));
                }
                let mut m = evaluate(
                    g.method,
                    EvalInputs {
                        intervals: &g.intervals,
                        oracle_pns: &pns,
                        oracle_bounds: &bounds,
                        atoms_valid: &g.valid,
                    },
                    cfg.alpha,
                )?;
                m.n_obs = cfg.data.n_obs;
                m.n_exp = cfg.data.n_exp;
                metrics.push(m);
            }
            let mut text = serde_json::to_string_pretty(&metrics)?;
            text.push('\n');
            write_or_print(out.as_deref(), &text)?;
            Ok(match out {
                Some(p) => json!({"command": "evaluate", "methods": metrics.len(), "out": p}),
                None => serde_json::Value::Null,
            })
        }
        Command::OracleDump {
            config,
            points,
            n,
            format,
            out,
        } => {
            let cfg = config.load()?;
            let scenario = Scenario::from_config(&cfg.data.scm)?;
            let rows = match points {
                Some(p) => {
                    let (rows, d) = io::read_points(&p)?;
                    if d != scenario.d_obs() {
                        return Err(Error::DimensionMismatch {
                            what: "covariate columns",
                            expected: scenario.d_obs(),
                            found: d,
                        });
                    }
                    rows
                }
                None => scenario.test_points(n, cfg.seed),
            };
            let dump = oracle_dump(&scenario, &rows)?;
            let text = match format {
                Format::Csv => dump.to_csv()?,
                Format::Json => {
                    let mut t = serde_json::to_string_pretty(&dump)?;
                    t.push('\n');
                    t
                }
            };
            write_or_print(out.as_deref(), &text)?;
            if !dump.audit.passed {
                return Err(Error::InvalidInput(format!("oracle audit failed: {:?}", dump.audit)));
            }
            Ok(match out {
                Some(p) => json!({"command": "oracle-dump", "rows": dump.rows.len(), "audit_passed": true, "out": p}),
                None => serde_json::Value::Null,
            })
        }
        Command::PlotData { results } => {
            let rows = emit_plot_data(&results)?;
            Ok(json!({
                "command": "plot-data",
                "out": results.join("plot_data.csv"),
                "rows": rows.len(),
            }))
        }
        Command::Presets => {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            Ok(json!({"presets": names}))
        }
    }
}
