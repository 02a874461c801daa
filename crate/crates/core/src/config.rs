//! Experiment configuration: one JSON file per run.
//!
//! The schema mirrors the experiment parameter tables: plant parameters,
//! controller timing/thresholds/gains, initial and goal states, kernels and
//! noise levels, horizon and seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::ControllerConfig;
use crate::dynamics::{ControlAffinePlant, PendulumParams, State};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::lognormal::LogNoiseMode;

/// Plant selection. Only the torque-actuated pendulum is wired to the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "plant", rename_all = "snake_case")]
pub enum PlantConfig {
    Pendulum(PendulumParams),
}

impl PlantConfig {
    pub fn build(&self) -> Result<ControlAffinePlant> {
        match self {
            PlantConfig::Pendulum(p) => {
                p.validate()?;
                Ok(ControlAffinePlant::pendulum(*p))
            }
        }
    }
}

/// Which policy drives the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    /// Stochastic-process learning controller.
    Sp,
    /// Proportional baseline with a fixed gain.
    P,
}

/// Whether kernels are used as given or refit by marginal likelihood before
/// the run (which requires pilot data via `model_in`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperMode {
    Fixed,
    OptimizeMarginalLikelihood,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub plant: PlantConfig,
    pub controller: ControllerKind,
    /// Baseline feedback gain; required when `controller` is `p`.
    #[serde(default)]
    pub gain: Option<f64>,
    pub delta_u: f64,
    pub delta_lambda: f64,
    pub theta_var_a: f64,
    pub theta_var_b: f64,
    /// Initial state [q, qdot].
    pub x0: [f64; 2],
    /// Goal state [q, qdot].
    pub xi: [f64; 2],
    pub w1: f64,
    pub w2: f64,
    pub t_f: f64,
    #[serde(default = "default_u_probe")]
    pub u_probe: f64,
    /// Probing window; defaults to the full horizon.
    #[serde(default)]
    pub probe_budget_end: Option<f64>,
    pub kernel_a: KernelSpec,
    pub kernel_b: KernelSpec,
    pub obs_noise_a: f64,
    pub log_noise_b: LogNoiseMode,
    #[serde(default)]
    pub deriv_variance: Option<f64>,
    #[serde(default = "default_true")]
    pub observe_velocity: bool,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_hyper_mode")]
    pub hyper_mode: HyperMode,
    /// Restarts for marginal-likelihood optimisation.
    #[serde(default = "default_restarts")]
    pub optimize_restarts: usize,
    #[serde(default)]
    pub model_in: Option<PathBuf>,
    #[serde(default)]
    pub model_out: Option<PathBuf>,
    #[serde(default = "default_tol")]
    pub integrator_tol: f64,
}

fn default_u_probe() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

fn default_seed() -> u64 {
    0
}

fn default_hyper_mode() -> HyperMode {
    HyperMode::Fixed
}

fn default_restarts() -> usize {
    8
}

fn default_tol() -> f64 {
    1e-8
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let config: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_f >= 0.0) {
            return Err(Error::Config(format!("t_f = {} must be nonnegative", self.t_f)));
        }
        if self.controller == ControllerKind::P && self.gain.is_none() {
            return Err(Error::Config("baseline controller needs a gain".into()));
        }
        self.kernel_a.validate()?;
        self.kernel_b.validate()?;
        if self.t_f > 0.0 {
            self.controller_config().validate()?;
        }
        Ok(())
    }

    pub fn x0_state(&self) -> State {
        State::scalar(self.x0[0], self.x0[1])
    }

    pub fn xi_state(&self) -> State {
        State::scalar(self.xi[0], self.xi[1])
    }

    pub fn controller_config(&self) -> ControllerConfig {
        ControllerConfig {
            delta_u: self.delta_u,
            delta_lambda: self.delta_lambda,
            theta_var_a: self.theta_var_a,
            theta_var_b: self.theta_var_b,
            w1: self.w1,
            w2: self.w2,
            xi: self.xi_state(),
            u_probe: self.u_probe,
            probe_budget_end: self.probe_budget_end.unwrap_or(self.t_f),
            obs_noise_a: self.obs_noise_a,
            deriv_variance: self.deriv_variance,
            observe_velocity: self.observe_velocity,
        }
    }

    /// Display name: explicit name, else the stem of the config file.
    pub fn display_name(&self, fallback: &str) -> String {
        self.name.clone().unwrap_or_else(|| fallback.to_string())
    }
}
