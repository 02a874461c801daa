//! Online Bayesian identification and control of fully-actuated
//! control-affine mechanical systems.
//!
//! The drift function is learned with Gaussian-process regression on
//! central-difference acceleration estimates; the (positive) control-input
//! function with a log-normal process. A variance-triggered state machine
//! decides when to probe the plant for either function, and between probes a
//! feedback-linearising outer loop with a proportional inner law steers the
//! expected closed loop like a double integrator. The harness reproduces the
//! torque-actuated pendulum experiments end to end.

pub mod config;
pub mod controller;
pub mod dynamics;
pub mod error;
pub mod estimation;
pub mod gp;
pub mod harness;
pub mod kernels;
pub mod lognormal;
pub mod ode;
pub mod persist;

pub use config::{ControllerKind, ExperimentConfig, HyperMode, PlantConfig};
pub use controller::{
    baseline_p, inner_law, outer_law, Controller, ControllerConfig, Phase, StepKind,
};
pub use dynamics::{
    integrate_hold, pendulum_drift, pendulum_energy, pendulum_input, ControlAffinePlant,
    PendulumParams, State,
};
pub use error::{Error, Result};
pub use estimation::{central_difference, DerivativeEstimate, SampleWindow};
pub use gp::{GpModel, OptimizeBounds, TrainingPoint};
pub use harness::{run, RunMetrics, RunRecord, StepRow};
pub use kernels::{KernelKind, KernelSpec};
pub use lognormal::{LogNoiseMode, LogNormalModel};
pub use persist::ModelBundle;
