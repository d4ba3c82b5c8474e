//! `ase`: run experiments, sweeps and offline fits, generate maps and
//! aggregate metrics CSVs.

mod check;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use ase_core::env::mapgen::{self, MapProfile};
use ase_core::harness::lander::run_lander_episode;
use ase_core::harness::nav::{evaluate_condition, NavWorld};
use ase_core::harness::track::run_delay_sweep;
use ase_core::harness::{
    read_metrics_csv, run_experiment, summarize, Condition, EnvironmentConfig, EpisodeMetrics, ExperimentConfig,
    TrackExperimentConfig,
};
use ase_core::learner::{fit_user_model, read_demonstrations, Demonstration, FitResult, LogisticFamily, OptimizerConfig};
use ase_core::user::DistortedPerceptUser;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "ase", version, about = "Assistive state estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment from a JSON config.
    Run {
        config: PathBuf,
        /// Overrides the config's metrics path.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Overrides the config's demonstration log path.
        #[arg(long)]
        demos: Option<PathBuf>,
        /// Writes the online learner's estimates, one row per refit.
        #[arg(long)]
        theta_trace: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Exit nonzero if any per-episode sanity property fails.
        #[arg(long)]
        check: bool,
    },
    #[command(subcommand)]
    Sweep(Sweep),
    /// Fit the user model offline to a demonstration log.
    Fit {
        /// Experiment config naming the environment and simulated-user family.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Starting parameters; the unbiased model when absent.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        init: Option<Vec<f64>>,
    },
    /// Generate a random grid map.
    GenMap {
        #[arg(long, default_value = "five_by_five")]
        profile: MapProfile,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize metrics CSVs per environment and condition.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        /// Writes the summaries as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit nonzero if any condition ordering is violated.
        #[arg(long)]
        check: bool,
    },
}

#[derive(Debug, Subcommand)]
enum Sweep {
    /// Delay-track returns over `d_max` and conditions on paired seeds.
    Delay {
        /// Delay-track experiment parameters; defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,2,5,10,20")]
        d_max: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "oracle,ase,unassisted,random")]
        conditions: Vec<Condition>,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        check: bool,
    },
    /// Offline parameter recovery over growing unassisted datasets.
    Dataset {
        /// Experiment config with a grid_nav or tilt_lander environment.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10,50,200")]
        sizes: Vec<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        check: bool,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(violations) if violations.is_empty() => ExitCode::SUCCESS,
        Ok(violations) => {
            for v in &violations {
                eprintln!("check failed: {v}");
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("ase: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Runs a command and returns the `--check` violations.
fn dispatch(command: Command) -> Result<Vec<String>> {
    match command {
        Command::Run {
            config,
            metrics,
            demos,
            theta_trace,
            seed,
            episodes,
            check,
        } => {
            let mut cfg = load_config(&config)?;
            cfg.metrics_path = metrics.or(cfg.metrics_path);
            cfg.demonstrations_path = demos.or(cfg.demonstrations_path);
            cfg.root_seed = seed.unwrap_or(cfg.root_seed);
            cfg.episodes = episodes.unwrap_or(cfg.episodes);
            let output = run_experiment(&cfg)?;
            if let Some(path) = theta_trace {
                emit_rows(Some(&path), theta_trace_rows(&output.theta_trace))?;
            }
            println!("{}", serde_json::to_string_pretty(&summarize(&output.metrics))?);
            Ok(if check {
                check::check_run(cfg.environment.name(), cfg.episodes, &output)
            } else {
                Vec::new()
            })
        }
        Command::Sweep(Sweep::Delay {
            config,
            d_max,
            conditions,
            episodes,
            seed,
            out,
            check,
        }) => {
            let c: TrackExperimentConfig = match config {
                Some(path) => serde_json::from_str(&read(&path)?).with_context(|| format!("parsing {}", path.display()))?,
                None => TrackExperimentConfig::default(),
            };
            c.track.validate()?;
            let cells = run_delay_sweep(&c, &d_max, &conditions, episodes, seed)?;
            let mut rows = vec![vec!["d_max".into(), "condition".into(), "mean_return".into(), "mean_belief_accuracy".into()]];
            rows.extend(cells.iter().map(|cell| {
                vec![
                    cell.d_max.to_string(),
                    cell.condition.to_string(),
                    cell.mean_return.to_string(),
                    cell.mean_belief_accuracy.to_string(),
                ]
            }));
            emit_rows(out.as_deref(), rows)?;
            Ok(if check { check::check_delay_sweep(&cells) } else { Vec::new() })
        }
        Command::Sweep(Sweep::Dataset {
            config,
            sizes,
            seed,
            out,
            check,
        }) => {
            let cfg = load_config(&config)?;
            let errors = dataset_sweep(&cfg, &sizes, seed.unwrap_or(cfg.root_seed), out.as_deref())?;
            Ok(if check { check::check_dataset_sweep(&errors) } else { Vec::new() })
        }
        Command::Fit {
            config,
            demos,
            out,
            init,
        } => {
            let cfg = load_config(&config)?;
            let file = File::open(&demos).with_context(|| format!("opening {}", demos.display()))?;
            let data = read_demonstrations(BufReader::new(file))?;
            let fit = fit(&cfg, &data, init)?;
            let json = serde_json::to_string_pretty(&fit)?;
            match out {
                Some(path) => std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?,
                None => println!("{json}"),
            }
            eprintln!(
                "theta_hat = {:?}, log-likelihood = {:.6}, converged = {}",
                fit.theta_hat, fit.log_likelihood, fit.converged
            );
            Ok(Vec::new())
        }
        Command::GenMap { profile, seed, out } => {
            let json = mapgen::generate(profile, seed).to_json();
            match out {
                Some(path) => std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?,
                None => println!("{json}"),
            }
            Ok(Vec::new())
        }
        Command::Report { metrics, out, check } => {
            let mut rows = Vec::new();
            for path in &metrics {
                let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
                rows.extend(read_metrics_csv(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?);
            }
            report(&rows, out.as_deref())?;
            Ok(if check { check::check_report(&rows) } else { Vec::new() })
        }
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::from_json(&read(path)?).with_context(|| format!("config {}", path.display()))
}

fn optimizer(cfg: &ExperimentConfig) -> OptimizerConfig {
    cfg.learner.as_ref().map(|l| l.optimizer).unwrap_or_default()
}

fn fit(cfg: &ExperimentConfig, data: &[Demonstration], init: Option<Vec<f64>>) -> Result<FitResult> {
    let init = init.or_else(|| cfg.learner.as_ref().and_then(|l| l.init_theta.clone()));
    match &cfg.environment {
        EnvironmentConfig::GridNav(c) => {
            let world = NavWorld::new(c.clone())?;
            let dim = c.layout.dim(&world.env);
            let init = init.unwrap_or_else(|| vec![1.0; dim]);
            if init.len() != dim {
                bail!("grid_nav layout needs {dim} parameters, got {}", init.len());
            }
            let family = world.family(data)?;
            Ok(fit_user_model(&family, data, &init, &optimizer(cfg))?)
        }
        EnvironmentConfig::TiltLander(c) => {
            let id = DistortedPerceptUser::identity();
            let init = init.unwrap_or(vec![id.theta0, id.theta1]);
            if init.len() != 2 {
                bail!("tilt_lander needs 2 parameters, got {}", init.len());
            }
            let family = LogisticFamily { kappa: c.kappa };
            Ok(fit_user_model(&family, data, &init, &optimizer(cfg))?)
        }
        other => bail!("no learnable user model for {}", other.name()),
    }
}

/// Generates `max(sizes)` unassisted demonstrations, fits each prefix and
/// returns `(size, parameter error)` pairs.
fn dataset_sweep(cfg: &ExperimentConfig, sizes: &[usize], seed: u64, out: Option<&Path>) -> Result<Vec<(usize, f64)>> {
    let n = sizes.iter().copied().max().unwrap_or(0);
    if n == 0 {
        bail!("dataset sizes must be positive");
    }
    let (data, truth): (Vec<Demonstration>, Vec<f64>) = match &cfg.environment {
        EnvironmentConfig::GridNav(c) => {
            let world = NavWorld::new(c.clone())?;
            let episodes = evaluate_condition(&world, Condition::Unassisted, None, seed, 0..n as u64)?;
            (episodes.into_iter().map(|e| e.demonstration).collect(), c.user_theta.clone())
        }
        EnvironmentConfig::TiltLander(c) => (
            (0..n as u64)
                .map(|e| run_lander_episode(c, Condition::Unassisted, None, seed, e).map(|(d, _)| d))
                .collect::<ase_core::harness::Result<_>>()?,
            c.true_theta.to_vec(),
        ),
        other => bail!("no learnable user model for {}", other.name()),
    };
    let mut rows = vec![vec![
        "size".into(),
        "theta_hat".into(),
        "error".into(),
        "log_likelihood".into(),
        "converged".into(),
    ]];
    let mut errors = Vec::new();
    for &size in sizes {
        let result = fit(cfg, &data[..size], None)?;
        let error = result
            .theta_hat
            .iter()
            .zip(&truth)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        errors.push((size, error));
        rows.push(vec![
            size.to_string(),
            join(&result.theta_hat),
            error.to_string(),
            result.log_likelihood.to_string(),
            result.converged.to_string(),
        ]);
    }
    emit_rows(out, rows)?;
    Ok(errors)
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

fn theta_trace_rows(trace: &[Vec<f64>]) -> Vec<Vec<String>> {
    let dim = trace.first().map_or(0, Vec::len);
    let mut rows = vec![std::iter::once("refit".to_string())
        .chain((0..dim).map(|i| format!("theta_{i}")))
        .collect()];
    rows.extend(
        trace
            .iter()
            .enumerate()
            .map(|(k, t)| std::iter::once(k.to_string()).chain(t.iter().map(f64::to_string)).collect()),
    );
    rows
}

fn write_rows<W: Write>(writer: W, rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes CSV rows to `out`, or to stdout.
fn emit_rows(out: Option<&Path>, rows: Vec<Vec<String>>) -> Result<()> {
    match out {
        Some(path) => {
            let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            write_rows(BufWriter::new(file), rows)
        }
        None => write_rows(std::io::stdout().lock(), rows),
    }
}

fn report(rows: &[EpisodeMetrics], out: Option<&Path>) -> Result<()> {
    let mut groups: BTreeMap<(String, String), Vec<EpisodeMetrics>> = BTreeMap::new();
    for m in rows {
        groups.entry((m.environment.clone(), m.condition.clone())).or_default().push(m.clone());
    }
    let fmt = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_default();
    let mut table = vec![[
        "environment",
        "condition",
        "episodes",
        "success_rate",
        "distance_to_goal_normalized",
        "time_to_goal",
        "belief_in_true_state",
        "mean_return",
        "mean_abs_tilt",
        "final_accuracy",
    ]
    .map(String::from)
    .to_vec()];
    let mut summaries = Vec::new();
    for ((env, condition), group) in &groups {
        let s = summarize(group);
        table.push(vec![
            env.clone(),
            condition.clone(),
            s.episodes.to_string(),
            fmt(s.success_rate),
            fmt(s.distance_to_goal_normalized),
            fmt(s.time_to_goal),
            fmt(s.belief_in_true_state),
            fmt(s.mean_return),
            fmt(s.mean_abs_tilt),
            fmt(s.final_accuracy),
        ]);
        let mut value = serde_json::to_value(&s)?;
        if env == "row_reveal" {
            value["accuracy_curve"] = check::accuracy_curve(rows, condition).into();
        }
        summaries.push(value);
    }
    write_rows(std::io::stdout().lock(), table)?;
    if let Some(path) = out {
        std::fs::write(path, serde_json::to_string_pretty(&summaries)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
