//! Ground-truth plants and sample-and-hold simulation.
//!
//! A plant is a control-affine second-order system: qddot = a(x) + b(x) u.
//! The simulator integrates the smooth ODE between controller calls while the
//! control is held constant.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode;

/// Configuration/velocity pair of a mechanical system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub position: DVector<f64>,
    pub velocity: DVector<f64>,
}

impl State {
    pub fn new(position: DVector<f64>, velocity: DVector<f64>) -> Result<Self> {
        if position.len() != velocity.len() {
            return Err(Error::Dimension { expected: position.len(), got: velocity.len() });
        }
        Ok(State { position, velocity })
    }

    /// Single-joint convenience constructor.
    pub fn scalar(q: f64, qdot: f64) -> Self {
        State {
            position: DVector::from_vec(vec![q]),
            velocity: DVector::from_vec(vec![qdot]),
        }
    }

    pub fn dim(&self) -> usize {
        self.position.len()
    }

    /// Flattened [q; qdot], the input fed to the learned models.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(2 * self.dim());
        v.rows_mut(0, self.dim()).copy_from(&self.position);
        v.rows_mut(self.dim(), self.dim()).copy_from(&self.velocity);
        v
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        let n = v.len() / 2;
        State {
            position: v.rows(0, n).into_owned(),
            velocity: v.rows(n, n).into_owned(),
        }
    }

    /// Euclidean distance to another state over [q; qdot].
    pub fn distance(&self, other: &State) -> f64 {
        (&self.to_vector() - other.to_vector()).norm()
    }
}

type DriftFn = dyn Fn(&State) -> DVector<f64> + Send + Sync;
type InputFn = dyn Fn(&State) -> DMatrix<f64> + Send + Sync;

/// A control-affine plant: configuration dimension, control dimension, drift
/// a(x) and input matrix b(x).
pub struct ControlAffinePlant {
    n: usize,
    m: usize,
    drift: Box<DriftFn>,
    input: Box<InputFn>,
}

impl ControlAffinePlant {
    pub fn from_parts(
        n: usize,
        m: usize,
        drift: impl Fn(&State) -> DVector<f64> + Send + Sync + 'static,
        input: impl Fn(&State) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        ControlAffinePlant { n, m, drift: Box::new(drift), input: Box::new(input) }
    }

    pub fn pendulum(params: PendulumParams) -> Self {
        let p = params;
        ControlAffinePlant::from_parts(
            1,
            1,
            move |x| DVector::from_vec(vec![pendulum_drift(&p, x)]),
            move |_| DMatrix::from_element(1, 1, pendulum_input(&p)),
        )
    }

    /// qddot = u: the expected closed loop under exact inversion.
    pub fn double_integrator() -> Self {
        ControlAffinePlant::from_parts(
            1,
            1,
            |_| DVector::zeros(1),
            |_| DMatrix::identity(1, 1),
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn drift(&self, x: &State) -> DVector<f64> {
        (self.drift)(x)
    }

    pub fn input(&self, x: &State) -> DMatrix<f64> {
        (self.input)(x)
    }

    /// Full-actuation check for square input matrices: the condition number
    /// at `x` must stay below `max_cond`.
    pub fn check_full_rank(&self, x: &State, max_cond: f64) -> Result<()> {
        let b = self.input(x);
        if b.nrows() != b.ncols() {
            return Err(Error::Config("rank check requires a square input matrix".into()));
        }
        let svd = b.svd(false, false);
        let max = svd.singular_values.max();
        let min = svd.singular_values.min();
        if min <= 0.0 || max / min >= max_cond {
            return Err(Error::Conditioning(if min > 0.0 { max / min } else { f64::INFINITY }));
        }
        Ok(())
    }
}

impl std::fmt::Debug for ControlAffinePlant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlAffinePlant")
            .field("n", &self.n)
            .field("m", &self.m)
            .finish()
    }
}

/// Physical parameters of the torque-actuated pendulum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    /// Length (m).
    pub l: f64,
    /// Mass (kg).
    #[serde(rename = "m")]
    pub mass: f64,
    /// Viscous friction coefficient.
    pub r: f64,
    /// Gravity (m/s^2).
    #[serde(default = "default_gravity")]
    pub g: f64,
}

fn default_gravity() -> f64 {
    9.81
}

impl PendulumParams {
    pub fn new(l: f64, mass: f64, r: f64) -> Result<Self> {
        let p = PendulumParams { l, mass, r, g: default_gravity() };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l > 0.0) || !(self.mass > 0.0) {
            return Err(Error::Config("pendulum length and mass must be positive".into()));
        }
        if self.r < 0.0 {
            return Err(Error::Config("pendulum friction must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Drift of the rigid pendulum: -(g/l) sin(q) - r/(m l^2) qdot.
///
/// q = 0 is the hanging (stable) equilibrium; the experiments steer to the
/// upright q = pi.
pub fn pendulum_drift(params: &PendulumParams, x: &State) -> f64 {
    let q = x.position[0];
    let qdot = x.velocity[0];
    -(params.g / params.l) * q.sin() - params.r / (params.mass * params.l * params.l) * qdot
}

/// Constant input gain of the pendulum: 1 / (m l^2).
pub fn pendulum_input(params: &PendulumParams) -> f64 {
    1.0 / (params.mass * params.l * params.l)
}

/// Total mechanical energy of the pendulum, used as a conservation oracle for
/// the frictionless case.
pub fn pendulum_energy(params: &PendulumParams, x: &State) -> f64 {
    let q = x.position[0];
    let qdot = x.velocity[0];
    0.5 * params.mass * params.l * params.l * qdot * qdot
        - params.mass * params.g * params.l * q.cos()
}

/// Integrates the plant over one hold interval of length `dt` with the
/// control held constant.
pub fn integrate_hold(
    plant: &ControlAffinePlant,
    x0: &State,
    u: &DVector<f64>,
    dt: f64,
    tol: f64,
) -> Result<State> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("hold interval dt = {dt} must be positive")));
    }
    if u.len() != plant.m() {
        return Err(Error::Dimension { expected: plant.m(), got: u.len() });
    }
    let n = plant.n();
    let y0 = x0.to_vector();
    let rhs = |_t: f64, y: &DVector<f64>| {
        let state = State::from_vector(y);
        let accel = plant.drift(&state) + plant.input(&state) * u;
        let mut dy = DVector::zeros(2 * n);
        dy.rows_mut(0, n).copy_from(&state.velocity);
        dy.rows_mut(n, n).copy_from(&accel);
        dy
    };
    let y = ode::integrate(rhs, &y0, dt, tol)?;
    Ok(State::from_vector(&y))
}
