//! Online identification-and-control policy.
//!
//! Between learning episodes the controller applies the inversion law
//! u = E[b]^{-1} (u' - E[a]) with the proportional inner law u'. At each
//! learning-check time it compares posterior variances against thresholds:
//! if the drift is too uncertain it holds u = 0 for three calls and admits a
//! drift observation; if the drift is settled but an input channel is too
//! uncertain it holds u_probe e_j for three calls and admits an input-gain
//! observation into the log-normal model. Probes are never pre-empted.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::State;
use crate::error::{Error, Result};
use crate::estimation::{self, SampleWindow};
use crate::gp::{GpModel, TrainingPoint};
use crate::lognormal::LogNormalModel;

/// Condition-number ceiling for inverting the posterior mean input matrix.
pub const MAX_INPUT_CONDITION: f64 = 1e8;

/// Timing, thresholds and gains of the policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerConfig {
    /// Control period (s); the controller is called every `delta_u`.
    pub delta_u: f64,
    /// Learning-check period (s); must be an integer multiple of `delta_u`.
    pub delta_lambda: f64,
    /// Posterior-variance threshold that triggers drift probing.
    pub theta_var_a: f64,
    /// Log-space posterior-variance threshold that triggers input probing.
    pub theta_var_b: f64,
    /// Inner-law gains.
    pub w1: f64,
    pub w2: f64,
    /// Goal state.
    pub xi: State,
    /// Probe torque magnitude for input-channel probes.
    pub u_probe: f64,
    /// No probe may start (or still be running) past this time.
    pub probe_budget_end: f64,
    /// Observation-noise variance attached to admitted drift targets.
    pub obs_noise_a: f64,
    /// Assumed variance of the derivative estimate entering input-gain
    /// observations; defaults to `obs_noise_a` when absent.
    #[serde(default)]
    pub deriv_variance: Option<f64>,
    /// When false, velocities are reconstructed from configurations with the
    /// same stencils instead of being read from the state.
    #[serde(default = "default_true")]
    pub observe_velocity: bool,
}

fn default_true() -> bool {
    true
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_u > 0.0) {
            return Err(Error::Config("delta_u must be positive".into()));
        }
        if self.delta_lambda < self.delta_u {
            return Err(Error::Config("delta_lambda must be >= delta_u".into()));
        }
        let ratio = self.delta_lambda / self.delta_u;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "delta_lambda / delta_u = {ratio} must be an integer"
            )));
        }
        if !(self.w1 > 0.0) || !(self.w2 > 0.0) {
            return Err(Error::Config("inner-law gains must be positive".into()));
        }
        if !(self.u_probe > 0.0) {
            return Err(Error::Config("u_probe must be positive".into()));
        }
        if self.obs_noise_a < 0.0 {
            return Err(Error::Config("obs_noise_a must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn check_stride(&self) -> u64 {
        (self.delta_lambda / self.delta_u).round() as u64
    }

    pub fn deriv_variance(&self) -> f64 {
        self.deriv_variance.unwrap_or(self.obs_noise_a)
    }
}

/// Internal phase of the probing state machine. The step index counts the
/// samples already recorded for the running probe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Phase {
    Normal,
    ProbingA { step: u8 },
    ProbingB { channel: usize, step: u8 },
}

/// What a single controller call emitted, for run logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Normal,
    ProbeA,
    ProbeB(usize),
}

impl StepKind {
    pub fn label(&self) -> String {
        match self {
            StepKind::Normal => "normal".to_string(),
            StepKind::ProbeA => "probe_a".to_string(),
            StepKind::ProbeB(j) => format!("probe_b{j}"),
        }
    }

    pub fn parse(s: &str) -> Option<StepKind> {
        match s {
            "normal" => Some(StepKind::Normal),
            "probe_a" => Some(StepKind::ProbeA),
            other => other.strip_prefix("probe_b").and_then(|j| j.parse().ok().map(StepKind::ProbeB)),
        }
    }
}

/// One controller call's output.
#[derive(Debug, Clone)]
pub struct Decision {
    pub control: DVector<f64>,
    pub kind: StepKind,
}

/// Bookkeeping over a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub probes_a: u64,
    pub probes_b: u64,
    pub admitted_a: u64,
    pub admitted_b: u64,
    pub rejected_b: u64,
    pub fallbacks: u64,
}

impl Counters {
    pub fn probes_total(&self) -> u64 {
        self.probes_a + self.probes_b
    }
}

/// The learning controller: posterior models plus the probing state machine.
#[derive(Debug)]
pub struct Controller {
    config: ControllerConfig,
    /// One drift model per configuration dimension.
    a_models: Vec<GpModel>,
    /// Input-gain models indexed [row][channel].
    b_models: Vec<Vec<LogNormalModel>>,
    phase: Phase,
    held_control: DVector<f64>,
    window: Vec<(f64, State)>,
    calls: u64,
    counters: Counters,
}

impl Controller {
    pub fn new(
        config: ControllerConfig,
        a_models: Vec<GpModel>,
        b_models: Vec<Vec<LogNormalModel>>,
    ) -> Result<Self> {
        config.validate()?;
        let n = a_models.len();
        if n == 0 || b_models.len() != n {
            return Err(Error::Config("need one drift model per dimension".into()));
        }
        let m = b_models[0].len();
        if m == 0 || b_models.iter().any(|row| row.len() != m) {
            return Err(Error::Config("ragged input-gain model grid".into()));
        }
        Ok(Controller {
            config,
            a_models,
            b_models,
            phase: Phase::Normal,
            held_control: DVector::zeros(m),
            window: Vec::with_capacity(3),
            calls: 0,
            counters: Counters::default(),
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn phase(&self) -> &Phase {
        &self.phase
    }

    pub fn a_models(&self) -> &[GpModel] {
        &self.a_models
    }

    pub fn b_models(&self) -> &[Vec<LogNormalModel>] {
        &self.b_models
    }

    /// Replaces the posterior models wholesale (warm start).
    pub fn set_models(&mut self, a: Vec<GpModel>, b: Vec<Vec<LogNormalModel>>) -> Result<()> {
        if a.len() != self.a_models.len() || b.len() != self.b_models.len() {
            return Err(Error::Config("model grid shape mismatch".into()));
        }
        self.a_models = a;
        self.b_models = b;
        Ok(())
    }

    pub fn dataset_sizes(&self) -> (usize, usize) {
        let a = self.a_models.iter().map(|m| m.len()).sum();
        let b = self.b_models.iter().flatten().map(|m| m.log_gp.len()).sum();
        (a, b)
    }

    fn n(&self) -> usize {
        self.a_models.len()
    }

    fn m(&self) -> usize {
        self.b_models[0].len()
    }

    /// Largest drift-posterior variance across dimensions at `x`.
    pub fn var_a(&self, x: &State) -> Result<f64> {
        let xv = x.to_vector();
        let mut worst: f64 = 0.0;
        for m in &self.a_models {
            worst = worst.max(m.posterior(xv.as_slice())?.1);
        }
        Ok(worst)
    }

    /// Largest log-space posterior variance in channel `j` at `x`.
    pub fn var_log_b(&self, x: &State, j: usize) -> Result<f64> {
        let xv = x.to_vector();
        let mut worst: f64 = 0.0;
        for row in &self.b_models {
            worst = worst.max(row[j].log_variance_at(xv.as_slice())?);
        }
        Ok(worst)
    }

    /// Posterior drift mean vector at `x`.
    pub fn mean_a(&self, x: &State) -> Result<DVector<f64>> {
        let xv = x.to_vector();
        let mut out = DVector::zeros(self.n());
        for (i, m) in self.a_models.iter().enumerate() {
            out[i] = m.posterior(xv.as_slice())?.0;
        }
        Ok(out)
    }

    /// Posterior linear-mean input matrix at `x`.
    pub fn mean_b(&self, x: &State) -> Result<DMatrix<f64>> {
        let xv = x.to_vector();
        let mut out = DMatrix::zeros(self.n(), self.m());
        for (i, row) in self.b_models.iter().enumerate() {
            for (j, m) in row.iter().enumerate() {
                out[(i, j)] = m.linear_mean(xv.as_slice())?;
            }
        }
        Ok(out)
    }

    /// One controller call at time `t` with observed state `x`. Calls must
    /// arrive every `delta_u` seconds in order.
    pub fn decide(&mut self, t: f64, x: &State) -> Decision {
        let call_index = self.calls;
        self.calls += 1;

        if self.phase != Phase::Normal {
            return self.continue_probe(t, x);
        }

        let is_check = call_index % self.config.check_stride() == 0;
        // A probe occupies [t, t + 2 delta_u]; it must finish before the
        // budget so that no probing step is ever emitted past it.
        let within_budget = t + 2.0 * self.config.delta_u < self.config.probe_budget_end;
        if is_check && within_budget {
            match self.maybe_start_probe(t, x) {
                Ok(Some(decision)) => return decision,
                Ok(None) => {}
                Err(e) => {
                    log::warn!("learning check failed at t = {t:.3}: {e}; skipping probe");
                }
            }
        }
        self.normal_control(x)
    }

    fn maybe_start_probe(&mut self, t: f64, x: &State) -> Result<Option<Decision>> {
        if self.var_a(x)? > self.config.theta_var_a {
            self.phase = Phase::ProbingA { step: 0 };
            self.held_control = DVector::zeros(self.m());
            self.window.clear();
            self.window.push((t, x.clone()));
            self.counters.probes_a += 1;
            return Ok(Some(Decision { control: self.held_control.clone(), kind: StepKind::ProbeA }));
        }
        for j in 0..self.m() {
            if self.var_log_b(x, j)? > self.config.theta_var_b {
                self.phase = Phase::ProbingB { channel: j, step: 0 };
                let mut u = DVector::zeros(self.m());
                u[j] = self.config.u_probe;
                self.held_control = u;
                self.window.clear();
                self.window.push((t, x.clone()));
                self.counters.probes_b += 1;
                return Ok(Some(Decision {
                    control: self.held_control.clone(),
                    kind: StepKind::ProbeB(j),
                }));
            }
        }
        Ok(None)
    }

    fn continue_probe(&mut self, t: f64, x: &State) -> Decision {
        self.window.push((t, x.clone()));
        let kind = match self.phase {
            Phase::ProbingA { .. } => StepKind::ProbeA,
            Phase::ProbingB { channel, .. } => StepKind::ProbeB(channel),
            Phase::Normal => unreachable!("continue_probe in normal phase"),
        };
        let control = self.held_control.clone();

        if self.window.len() == 3 {
            match self.take_window() {
                Ok(w) => match kind {
                    StepKind::ProbeA => {
                        if let Err(e) = self.admit_a(&w) {
                            log::warn!("drift admission failed at t = {t:.3}: {e}");
                        }
                    }
                    StepKind::ProbeB(j) => {
                        let u_j = self.config.u_probe;
                        self.admit_b(&w, j, u_j);
                    }
                    StepKind::Normal => unreachable!(),
                },
                Err(e) => log::warn!("probe window invalid at t = {t:.3}: {e}"),
            }
            self.phase = Phase::Normal;
        } else {
            match &mut self.phase {
                Phase::ProbingA { step } => *step += 1,
                Phase::ProbingB { step, .. } => *step += 1,
                Phase::Normal => unreachable!(),
            }
        }
        Decision { control, kind }
    }

    fn take_window(&mut self) -> Result<SampleWindow> {
        let samples = std::mem::take(&mut self.window);
        let [s0, s1, s2]: [(f64, State); 3] = samples
            .try_into()
            .map_err(|_| Error::Window("probe window does not hold three samples".into()))?;
        SampleWindow::new([s0.0, s1.0, s2.0], [s0.1, s1.1, s2.1])
    }

    fn estimate(&self, window: &SampleWindow) -> estimation::DerivativeEstimate {
        if self.config.observe_velocity {
            estimation::central_difference(window)
        } else {
            estimation::central_difference_from_positions(window)
        }
    }

    /// The state a probe observation is attributed to. When velocities are
    /// not observed directly the reconstructed estimate stands in.
    fn midpoint_state(&self, window: &SampleWindow) -> State {
        let mid = window.midpoint_state().clone();
        if self.config.observe_velocity {
            mid
        } else {
            let est = self.estimate(window);
            State { position: mid.position, velocity: est.position_rate }
        }
    }

    /// Conditions the drift models on the derivative estimate of a zero-hold
    /// window.
    pub fn admit_a(&mut self, window: &SampleWindow) -> Result<()> {
        let est = self.estimate(window);
        let state = self.midpoint_state(window);
        let xv = state.to_vector();
        for (i, model) in self.a_models.iter_mut().enumerate() {
            let point =
                TrainingPoint::new(xv.as_slice().to_vec(), est.acceleration[i], self.config.obs_noise_a);
            *model = model.condition(point)?;
        }
        self.counters.admitted_a += 1;
        Ok(())
    }

    /// Converts a probe window under u = u_j e_j into input-gain observations
    /// b_ij = (yddot_i - E[a_i]) / u_j, propagating variance into log-space
    /// noise. Nonpositive estimates are counted and dropped.
    pub fn admit_b(&mut self, window: &SampleWindow, j: usize, u_j: f64) {
        if u_j == 0.0 {
            self.counters.rejected_b += 1;
            return;
        }
        let est = self.estimate(window);
        let state = self.midpoint_state(window);
        let xv = state.to_vector();
        let mut admitted_any = false;
        for i in 0..self.n() {
            let stats = self.a_models[i].posterior(xv.as_slice());
            let (mean_a, var_a) = match stats {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("drift posterior failed during input admission: {e}");
                    self.counters.rejected_b += 1;
                    continue;
                }
            };
            let b_est = (est.acceleration[i] - mean_a) / u_j;
            let linear_variance = (self.config.deriv_variance() + var_a) / (u_j * u_j);
            match self.b_models[i][j].observe(xv.as_slice(), b_est, linear_variance) {
                Ok(next) => {
                    self.b_models[i][j] = next;
                    admitted_any = true;
                }
                Err(Error::InvalidObservation(v)) => {
                    log::debug!("rejected nonpositive input-gain estimate {v:.4}");
                    self.counters.rejected_b += 1;
                }
                Err(e) => {
                    log::warn!("input-gain admission failed: {e}");
                    self.counters.rejected_b += 1;
                }
            }
        }
        if admitted_any {
            self.counters.admitted_b += 1;
        }
    }

    /// Inversion control with the inner proportional law; degrades to the
    /// documented fallbacks when the models misbehave.
    fn normal_control(&mut self, x: &State) -> Decision {
        let u_prime = inner_law(x, &self.config.xi, self.config.w1, self.config.w2);
        let (mean_a, mean_b) = match (self.mean_a(x), self.mean_b(x)) {
            (Ok(a), Ok(b)) if a.iter().all(|v| v.is_finite()) && b.iter().all(|v| v.is_finite()) => {
                (a, b)
            }
            _ => {
                // Model evaluation failed: drive with the inner law alone.
                log::warn!("model evaluation failed; using inner law directly");
                self.counters.fallbacks += 1;
                return Decision { control: u_prime, kind: StepKind::Normal };
            }
        };
        match outer_law(&mean_a, &mean_b, &u_prime) {
            Ok(u) => Decision { control: u, kind: StepKind::Normal },
            Err(e) => {
                log::warn!("inversion failed ({e}); holding zero control for this step");
                self.counters.fallbacks += 1;
                Decision { control: DVector::zeros(self.m()), kind: StepKind::Normal }
            }
        }
    }
}

/// Inversion law u = E[b]^{-1} (-E[a] + u').
pub fn outer_law(
    mean_a: &DVector<f64>,
    mean_b: &DMatrix<f64>,
    u_prime: &DVector<f64>,
) -> Result<DVector<f64>> {
    if mean_b.nrows() != mean_b.ncols() {
        return Err(Error::Config("inversion requires a square input matrix".into()));
    }
    if mean_b.nrows() != mean_a.len() || u_prime.len() != mean_a.len() {
        return Err(Error::Dimension { expected: mean_b.nrows(), got: mean_a.len() });
    }
    let svd = mean_b.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 0.0 || smax / smin >= MAX_INPUT_CONDITION {
        return Err(Error::Conditioning(if smin > 0.0 { smax / smin } else { f64::INFINITY }));
    }
    let rhs = u_prime - mean_a;
    svd.solve(&rhs, 0.0).map_err(|e| Error::Numerical(e.to_string()))
}

/// Proportional inner law u' = w1 (xi_1 - x1) + w2 (xi_2 - x2).
pub fn inner_law(x: &State, xi: &State, w1: f64, w2: f64) -> DVector<f64> {
    w1 * (&xi.position - &x.position) + w2 * (&xi.velocity - &x.velocity)
}

/// Baseline proportional controller applied directly as torque, no inversion:
/// u = k ((xi_1 - x1) + (xi_2 - x2)).
pub fn baseline_p(x: &State, xi: &State, k: f64) -> DVector<f64> {
    k * ((&xi.position - &x.position) + (&xi.velocity - &x.velocity))
}
