//! Experiment orchestration: the decide/hold/integrate loop, warm starts,
//! metric computation and CSV/JSON reporting.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::config::{ControllerKind, ExperimentConfig, HyperMode};
use crate::controller::{baseline_p, Controller, Counters, StepKind};
use crate::dynamics::{integrate_hold, ControlAffinePlant, State};
use crate::error::{Error, Result};
use crate::gp::{GpModel, OptimizeBounds};
use crate::lognormal::LogNormalModel;
use crate::persist::ModelBundle;

/// Mean goal distance over the final window below this value counts as a
/// converged run.
pub const CONVERGENCE_TOLERANCE: f64 = 0.05;
/// Length of the terminal window the convergence criterion averages over.
pub const CONVERGENCE_WINDOW: f64 = 1.0;

/// One controller period of a recorded trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub t: f64,
    pub x1: f64,
    pub x2: f64,
    pub u: f64,
    pub phase: StepKind,
    pub mean_a: f64,
    pub var_a: f64,
    pub mean_b: f64,
    pub var_b: f64,
}

/// Scalar summary of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub energy: f64,
    pub error: f64,
    pub n_data_a: usize,
    pub n_data_b: usize,
    pub converged: bool,
    pub terminal: [f64; 2],
    pub probes_a: u64,
    pub probes_b: u64,
    pub rejected_b: u64,
    pub incomplete: bool,
}

/// Full record of one run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub name: String,
    pub rows: Vec<StepRow>,
    pub terminal: State,
    pub incomplete: bool,
    pub counters: Counters,
    pub metrics: RunMetrics,
}

/// Builds the posterior model grid a config describes, fresh or warm-started.
fn build_models(config: &ExperimentConfig) -> Result<ModelBundle> {
    if let Some(path) = &config.model_in {
        return ModelBundle::load(path);
    }
    let a = GpModel::new(config.kernel_a.clone(), 0.0)?;
    let b_gp = GpModel::new(config.kernel_b.clone(), 0.0)?;
    let b = LogNormalModel::new(b_gp, config.log_noise_b);
    Ok(ModelBundle::new(vec![a], vec![vec![b]]))
}

/// Runs one experiment to completion.
///
/// Deterministic given the config (the only random element is the seeded
/// hyperparameter search). `model_in` warm-starts the posterior models;
/// `model_out` persists them after the run.
pub fn run(config: &ExperimentConfig) -> Result<RunRecord> {
    config.validate()?;
    let plant = config.plant.build()?;
    let xi = config.xi_state();
    let name = config.display_name("run");
    let steps = (config.t_f / config.delta_u).round() as usize;

    let mut x = config.x0_state();
    let mut rows: Vec<StepRow> = Vec::with_capacity(steps);
    let mut incomplete = false;

    let mut sp_controller = match config.controller {
        ControllerKind::Sp => {
            let mut bundle = build_models(config)?;
            if config.hyper_mode == HyperMode::OptimizeMarginalLikelihood {
                if config.model_in.is_none() {
                    return Err(Error::Config(
                        "hyper_mode optimize_marginal_likelihood needs model_in pilot data".into(),
                    ));
                }
                bundle = optimize_bundle(&bundle, config.optimize_restarts, config.seed)?;
            }
            Some(Controller::new(config.controller_config(), bundle.a_models, bundle.b_models)?)
        }
        ControllerKind::P => None,
    };

    // The proportional baselines are continuous controllers: the feedback
    // enters the plant right-hand side instead of being sampled and held.
    let closed_baseline = match config.controller {
        ControllerKind::P => {
            let gain = config.gain.expect("validated");
            let inner = config.plant.build()?;
            let goal = xi.clone();
            Some(ControlAffinePlant::from_parts(
                inner.n(),
                inner.m(),
                move |s: &State| {
                    inner.drift(s) + inner.input(s) * baseline_p(s, &goal, gain)
                },
                |_s: &State| nalgebra::DMatrix::zeros(1, 1),
            ))
        }
        ControllerKind::Sp => None,
    };

    for i in 0..steps {
        let t = i as f64 * config.delta_u;
        let (u, kind, stats) = match &mut sp_controller {
            Some(c) => {
                let stats = posterior_stats(c, &x);
                let decision = c.decide(t, &x);
                (decision.control, decision.kind, stats)
            }
            None => {
                let gain = config.gain.expect("validated");
                (baseline_p(&x, &xi, gain), StepKind::Normal, [0.0; 4])
            }
        };
        rows.push(StepRow {
            t,
            x1: x.position[0],
            x2: x.velocity[0],
            u: u[0],
            phase: kind,
            mean_a: stats[0],
            var_a: stats[1],
            mean_b: stats[2],
            var_b: stats[3],
        });
        let stepped = match &closed_baseline {
            Some(closed) => integrate_hold(
                closed,
                &x,
                &nalgebra::DVector::zeros(closed.m()),
                config.delta_u,
                config.integrator_tol,
            ),
            None => integrate_hold(&plant, &x, &u, config.delta_u, config.integrator_tol),
        };
        match stepped {
            Ok(next) => x = next,
            Err(e) => {
                log::error!("run '{name}' aborted: {e}");
                incomplete = true;
                break;
            }
        }
    }

    let counters = sp_controller.as_ref().map(|c| c.counters()).unwrap_or_default();
    let (n_a, n_b) = sp_controller.as_ref().map(|c| c.dataset_sizes()).unwrap_or((0, 0));

    if let (Some(c), Some(path)) = (&sp_controller, &config.model_out) {
        let bundle = ModelBundle::new(c.a_models().to_vec(), c.b_models().to_vec());
        bundle.save(path)?;
    }

    let (energy, error) = integrate_metrics(&rows, &xi, config.delta_u);
    let converged = !incomplete && is_converged(&rows, &xi, config.t_f);
    let metrics = RunMetrics {
        energy,
        error,
        n_data_a: n_a,
        n_data_b: n_b,
        converged,
        terminal: [x.position[0], x.velocity[0]],
        probes_a: counters.probes_a,
        probes_b: counters.probes_b,
        rejected_b: counters.rejected_b,
        incomplete,
    };
    Ok(RunRecord { name, rows, terminal: x, incomplete, counters, metrics })
}

fn posterior_stats(c: &Controller, x: &State) -> [f64; 4] {
    let mean_a = c.mean_a(x).map(|v| v[0]).unwrap_or(f64::NAN);
    let var_a = c.var_a(x).unwrap_or(f64::NAN);
    let xv = x.to_vector();
    let b = &c.b_models()[0][0];
    let mean_b = b.linear_mean(xv.as_slice()).unwrap_or(f64::NAN);
    let var_b = b.linear_variance(xv.as_slice()).unwrap_or(f64::NAN);
    [mean_a, var_a, mean_b, var_b]
}

/// Rectangle-rule integrals of control energy and squared goal distance,
/// exact for the zero-order-hold control signal.
pub fn integrate_metrics(rows: &[StepRow], xi: &State, delta_u: f64) -> (f64, f64) {
    let mut energy = 0.0;
    let mut error = 0.0;
    for row in rows {
        let dq = row.x1 - xi.position[0];
        let dv = row.x2 - xi.velocity[0];
        energy += row.u * row.u * delta_u;
        error += (dq * dq + dv * dv) * delta_u;
    }
    (energy, error)
}

/// Terminal-window convergence: mean goal distance over the last
/// [`CONVERGENCE_WINDOW`] seconds below [`CONVERGENCE_TOLERANCE`].
pub fn is_converged(rows: &[StepRow], xi: &State, t_f: f64) -> bool {
    let start = t_f - CONVERGENCE_WINDOW;
    let tail: Vec<f64> = rows
        .iter()
        .filter(|r| r.t >= start)
        .map(|r| {
            let dq = r.x1 - xi.position[0];
            let dv = r.x2 - xi.velocity[0];
            (dq * dq + dv * dv).sqrt()
        })
        .collect();
    if tail.is_empty() {
        return false;
    }
    tail.iter().sum::<f64>() / (tail.len() as f64) < CONVERGENCE_TOLERANCE
}

/// Refits every model in the bundle (with at least two points) by marginal
/// likelihood; models with too little data are passed through unchanged.
pub fn optimize_bundle(bundle: &ModelBundle, restarts: usize, seed: u64) -> Result<ModelBundle> {
    let mut out = bundle.clone();
    for (i, model) in out.a_models.iter_mut().enumerate() {
        if model.len() < 2 {
            log::warn!("drift model {i} has {} points; kernel left unchanged", model.len());
            continue;
        }
        let bounds = OptimizeBounds::default_for(model.kernel());
        *model = model.optimize_hyperparameters(&bounds, restarts, seed)?;
    }
    for (i, row) in out.b_models.iter_mut().enumerate() {
        for (j, model) in row.iter_mut().enumerate() {
            if model.log_gp.len() < 2 {
                log::warn!(
                    "input-gain model ({i},{j}) has {} points; kernel left unchanged",
                    model.log_gp.len()
                );
                continue;
            }
            let bounds = OptimizeBounds::default_for(model.log_gp.kernel());
            model.log_gp = model.log_gp.optimize_hyperparameters(&bounds, restarts, seed)?;
        }
    }
    Ok(out)
}

/// Replaces the config's kernels with marginal-likelihood fits on pilot data.
///
/// The returned config is self-contained: its hyper mode is `fixed` so that
/// running it does not re-optimise.
pub fn optimize_mode(config: &ExperimentConfig, pilot: &ModelBundle) -> Result<ExperimentConfig> {
    if pilot.a_models.iter().all(|m| m.is_empty()) {
        return Err(Error::Optimization("pilot data has no drift observations".into()));
    }
    let optimized = optimize_bundle(pilot, config.optimize_restarts, config.seed)?;
    let mut out = config.clone();
    out.kernel_a = optimized.a_models[0].kernel().clone();
    out.kernel_b = optimized.b_models[0][0].log_gp.kernel().clone();
    out.hyper_mode = HyperMode::Fixed;
    Ok(out)
}

pub const TRAJECTORY_HEADER: &str = "t,x1,x2,u,phase,mean_a,var_a,mean_b,var_b";

/// Writes one trajectory CSV. Floats use the shortest representation that
/// parses back to the identical bits.
pub fn write_trajectory_csv(record: &RunRecord, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(record.rows.len() * 64);
    out.push_str(TRAJECTORY_HEADER);
    out.push('\n');
    for r in &record.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.t,
            r.x1,
            r.x2,
            r.u,
            r.phase.label(),
            r.mean_a,
            r.var_a,
            r.mean_b,
            r.var_b
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parses a trajectory CSV produced by [`write_trajectory_csv`].
pub fn read_trajectory_csv(path: &Path) -> Result<Vec<StepRow>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == TRAJECTORY_HEADER => {}
        other => {
            return Err(Error::Config(format!(
                "{}: unexpected trajectory header {other:?}",
                path.display()
            )))
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::Config(format!(
                "{}: line {} has {} fields",
                path.display(),
                idx + 2,
                fields.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i].parse().map_err(|_| {
                Error::Config(format!("{}: bad number '{}' on line {}", path.display(), fields[i], idx + 2))
            })
        };
        rows.push(StepRow {
            t: num(0)?,
            x1: num(1)?,
            x2: num(2)?,
            u: num(3)?,
            phase: StepKind::parse(fields[4]).ok_or_else(|| {
                Error::Config(format!("{}: bad phase '{}' on line {}", path.display(), fields[4], idx + 2))
            })?,
            mean_a: num(5)?,
            var_a: num(6)?,
            mean_b: num(7)?,
            var_b: num(8)?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Serialize, Deserialize)]
struct AggregateEntry {
    name: String,
    energy: f64,
    error: f64,
    n_data_a: usize,
    n_data_b: usize,
    converged: bool,
    incomplete: bool,
    terminal: [f64; 2],
}

/// Writes per-run trajectory CSVs plus aggregate metrics as CSV and JSON.
pub fn report(records: &[RunRecord], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    for record in records {
        write_trajectory_csv(record, &out_dir.join(format!("{}.csv", record.name)))?;
    }

    let entries: Vec<AggregateEntry> = records
        .iter()
        .map(|r| AggregateEntry {
            name: r.name.clone(),
            energy: r.metrics.energy,
            error: r.metrics.error,
            n_data_a: r.metrics.n_data_a,
            n_data_b: r.metrics.n_data_b,
            converged: r.metrics.converged,
            incomplete: r.incomplete,
            terminal: r.metrics.terminal,
        })
        .collect();

    let json_path = out_dir.join("metrics.json");
    let json = serde_json::to_string_pretty(&serde_json::json!({ "runs": entries }))
        .map_err(|e| Error::json(json_path.display().to_string(), e))?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(json_path.display().to_string(), e))?;

    let csv_path = out_dir.join("metrics.csv");
    let mut file = std::fs::File::create(&csv_path)
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    writeln!(file, "name,energy,error,n_data_a,n_data_b,converged,incomplete")
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    for e in &entries {
        writeln!(
            file,
            "{},{},{},{},{},{},{}",
            e.name, e.energy, e.error, e.n_data_a, e.n_data_b, e.converged, e.incomplete
        )
        .map_err(|err| Error::io(csv_path.display().to_string(), err))?;
    }
    Ok(())
}

/// Ordinary least squares fit y = slope * x + intercept with R^2.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, intercept, r2)
}

/// Fits log ||x(t) - xi|| over rows with t in [t_start, t_end]; returns the
/// decay rate (positive means shrinking error) and the fit R^2.
pub fn fit_error_decay(rows: &[StepRow], xi: &State, t_start: f64, t_end: f64) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.t >= t_start && r.t <= t_end)
        .filter_map(|r| {
            let dq = r.x1 - xi.position[0];
            let dv = r.x2 - xi.velocity[0];
            let err = (dq * dq + dv * dv).sqrt();
            (err > 1e-14).then(|| (r.t, err.ln()))
        })
        .collect();
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let (slope, _intercept, r2) = fit_line(&xs, &ys);
    (-slope, r2)
}

/// The control vector as recorded in a row (scalar plants).
pub fn row_control(row: &StepRow) -> DVector<f64> {
    DVector::from_vec(vec![row.u])
}
