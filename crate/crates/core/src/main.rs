//! Command-line harness for the pendulum identification-and-control
//! experiments.
//!
//! Exit codes: 0 on success, 2 when a run completes but fails the
//! convergence criterion, 1 on any error. Logging is controlled by the
//! BAYESFBLIN_LOG environment variable (error, warn, info, debug).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bayesfblin::config::ExperimentConfig;
use bayesfblin::harness::{self, RunRecord};
use bayesfblin::persist::ModelBundle;
use bayesfblin::{Error, Result, State};

#[derive(Parser)]
#[command(name = "bayesfblin", version, about = "Online GP identification with feedback-linearising control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its trajectory and metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Warm-start models from a persisted bundle.
        #[arg(long)]
        model_in: Option<PathBuf>,
        /// Persist the trained models after the run.
        #[arg(long)]
        model_out: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Refit kernel hyperparameters on pilot data and write a new config.
    OptimizeHypers {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model_in: PathBuf,
        #[arg(long)]
        config_out: PathBuf,
    },
    /// Recompute metrics from a trajectory CSV.
    Metrics {
        #[arg(long)]
        run: PathBuf,
        /// Goal state as "q,qdot"; defaults to the upright goal (pi, 0).
        #[arg(long)]
        xi: Option<String>,
    },
    /// Run every config matching a glob and write an aggregate report.
    Batch {
        #[arg(long)]
        configs: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("BAYESFBLIN_LOG", "warn"),
    )
    .init();

    match dispatch(Cli::parse()) {
        Ok(all_converged) => {
            if all_converged {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Returns whether every executed run converged.
fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { config, model_in, model_out, out_dir } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if cfg.name.is_none() {
                cfg.name = Some(stem(&config));
            }
            if model_in.is_some() {
                cfg.model_in = model_in;
            }
            if model_out.is_some() {
                cfg.model_out = model_out;
            }
            let record = harness::run(&cfg)?;
            print_summary(&record);
            let ok = record.metrics.converged;
            harness::report(&[record], &out_dir)?;
            Ok(ok)
        }
        Command::OptimizeHypers { config, model_in, config_out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let pilot = ModelBundle::load(&model_in)?;
            let optimized = harness::optimize_mode(&cfg, &pilot)?;
            optimized.save(&config_out)?;
            println!(
                "kernel_a -> {}, kernel_b -> {}",
                serde_json::to_string(&optimized.kernel_a).unwrap_or_default(),
                serde_json::to_string(&optimized.kernel_b).unwrap_or_default()
            );
            Ok(true)
        }
        Command::Metrics { run, xi } => {
            let rows = harness::read_trajectory_csv(&run)?;
            let xi = parse_xi(xi.as_deref())?;
            let delta_u = match rows.as_slice() {
                [first, second, ..] => second.t - first.t,
                _ => return Err(Error::Config("trajectory has fewer than two rows".into())),
            };
            let (energy, error) = harness::integrate_metrics(&rows, &xi, delta_u);
            let t_f = rows.last().map(|r| r.t + delta_u).unwrap_or(0.0);
            let converged = harness::is_converged(&rows, &xi, t_f);
            println!(
                "{}",
                serde_json::json!({
                    "energy": energy,
                    "error": error,
                    "converged": converged,
                    "rows": rows.len(),
                })
            );
            Ok(converged)
        }
        Command::Batch { configs, out_dir } => {
            let paths = expand_glob(&configs)?;
            if paths.is_empty() {
                return Err(Error::Config(format!("no configs match '{configs}'")));
            }
            // Runs are independent; execute them on worker threads and join
            // before writing the aggregate table.
            let records: Vec<Result<RunRecord>> = std::thread::scope(|scope| {
                let handles: Vec<_> = paths
                    .iter()
                    .map(|path| {
                        scope.spawn(move || {
                            let mut cfg = ExperimentConfig::load(path)?;
                            if cfg.name.is_none() {
                                cfg.name = Some(stem(path));
                            }
                            harness::run(&cfg)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
            });
            let mut ok = true;
            let mut done = Vec::with_capacity(records.len());
            for record in records {
                let record = record?;
                print_summary(&record);
                ok &= record.metrics.converged;
                done.push(record);
            }
            harness::report(&done, &out_dir)?;
            Ok(ok)
        }
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
}

fn parse_xi(arg: Option<&str>) -> Result<State> {
    let Some(text) = arg else {
        return Ok(State::scalar(std::f64::consts::PI, 0.0));
    };
    let parts: Vec<&str> = text.split(',').collect();
    let [q, v] = parts.as_slice() else {
        return Err(Error::Config(format!("expected 'q,qdot', got '{text}'")));
    };
    let parse = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("bad goal component '{s}'")))
    };
    Ok(State::scalar(parse(q)?, parse(v)?))
}

fn expand_glob(pattern: &str) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| Error::Config(format!("bad glob '{pattern}': {e}")))?
        .filter_map(|entry| entry.ok())
        .collect();
    paths.sort();
    Ok(paths)
}

fn print_summary(record: &RunRecord) {
    println!(
        "{}: converged={} energy={:.2} error={:.2} data=({}, {}) probes=({}, {}) terminal=({:.4}, {:.4}){}",
        record.name,
        record.metrics.converged,
        record.metrics.energy,
        record.metrics.error,
        record.metrics.n_data_a,
        record.metrics.n_data_b,
        record.metrics.probes_a,
        record.metrics.probes_b,
        record.metrics.terminal[0],
        record.metrics.terminal[1],
        if record.incomplete { " INCOMPLETE" } else { "" }
    );
}
