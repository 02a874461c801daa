//! Derivative estimation from sampled trajectories.
//!
//! Probes hold the control over three consecutive controller calls; the three
//! observed states form a `SampleWindow` and the second-order central
//! difference attributes a derivative estimate to the middle sample.

use nalgebra::DVector;

use crate::dynamics::State;
use crate::error::{Error, Result};

/// Maximum deviation from uniform spacing tolerated between samples.
const SPACING_TOLERANCE: f64 = 1e-9;

/// Three uniformly spaced samples of the observed state.
#[derive(Debug, Clone)]
pub struct SampleWindow {
    pub times: [f64; 3],
    pub states: [State; 3],
}

impl SampleWindow {
    pub fn new(times: [f64; 3], states: [State; 3]) -> Result<Self> {
        let d1 = times[1] - times[0];
        let d2 = times[2] - times[1];
        if !(d1 > 0.0) {
            return Err(Error::Window(format!("non-increasing timestamps {times:?}")));
        }
        if (d1 - d2).abs() > SPACING_TOLERANCE {
            return Err(Error::Window(format!(
                "non-uniform spacing: {d1} vs {d2} exceeds {SPACING_TOLERANCE}"
            )));
        }
        Ok(SampleWindow { times, states })
    }

    pub fn spacing(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    pub fn midpoint_time(&self) -> f64 {
        self.times[1]
    }

    pub fn midpoint_state(&self) -> &State {
        &self.states[1]
    }
}

/// Componentwise derivative estimate attributed to the window midpoint.
#[derive(Debug, Clone)]
pub struct DerivativeEstimate {
    pub time: f64,
    /// Estimated d/dt of the configuration (should track the velocity).
    pub position_rate: DVector<f64>,
    /// Estimated d/dt of the velocity -- the acceleration target fed to the
    /// drift and input-function learners.
    pub acceleration: DVector<f64>,
}

/// Second-order central difference over the full observed state:
/// (x(t + 2d) - x(t)) / (2 d), exact on quadratics.
pub fn central_difference(window: &SampleWindow) -> DerivativeEstimate {
    let h2 = 2.0 * window.spacing();
    DerivativeEstimate {
        time: window.midpoint_time(),
        position_rate: (&window.states[2].position - &window.states[0].position) / h2,
        acceleration: (&window.states[2].velocity - &window.states[0].velocity) / h2,
    }
}

/// Configuration-only variant for plants where the velocity is not measured:
/// the velocity at the midpoint comes from the central stencil on q and the
/// acceleration from the three-point second difference on q.
pub fn central_difference_from_positions(window: &SampleWindow) -> DerivativeEstimate {
    let h = window.spacing();
    let q0 = &window.states[0].position;
    let q1 = &window.states[1].position;
    let q2 = &window.states[2].position;
    DerivativeEstimate {
        time: window.midpoint_time(),
        position_rate: (q2 - q0) / (2.0 * h),
        acceleration: (q2 - q1 * 2.0 + q0) / (h * h),
    }
}
