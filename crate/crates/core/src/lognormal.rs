//! Positivity-constrained process for the control-input function.
//!
//! The input function is modelled as exp of a GP: observations enter in log
//! space, queries come back out in linear space via the log-normal moment
//! formulas. The linear mean grows with log-space variance, which is what
//! makes the downstream inversion controller cautious where data is scarce.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{GpModel, TrainingPoint};

/// How a linear-space estimate variance maps to log-space observation noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LogNoiseMode {
    /// A fixed log-space variance for every observation.
    Fixed { value: f64 },
    /// Delta-method propagation: var_log = max(floor, var_linear / b^2).
    DeltaMethod { floor: f64 },
}

impl LogNoiseMode {
    pub fn log_variance(&self, b_estimate: f64, linear_variance: f64) -> f64 {
        match *self {
            LogNoiseMode::Fixed { value } => value,
            LogNoiseMode::DeltaMethod { floor } => {
                floor.max(linear_variance / (b_estimate * b_estimate))
            }
        }
    }
}

/// A GP over log b, reported in linear space.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename = "lognormal")]
pub struct LogNormalModel {
    pub log_gp: GpModel,
    pub noise: LogNoiseMode,
}

impl LogNormalModel {
    pub fn new(log_gp: GpModel, noise: LogNoiseMode) -> Self {
        LogNormalModel { log_gp, noise }
    }

    /// Conditions the underlying GP on log(b_estimate).
    ///
    /// Nonpositive estimates cannot enter log space and signal a probe whose
    /// estimate has the wrong sign; they are rejected for the caller to count.
    pub fn observe(&self, x: &[f64], b_estimate: f64, linear_variance: f64) -> Result<LogNormalModel> {
        if !(b_estimate > 0.0) || !b_estimate.is_finite() {
            return Err(Error::InvalidObservation(b_estimate));
        }
        let log_noise = self.noise.log_variance(b_estimate, linear_variance.max(0.0));
        let log_gp = self.log_gp.condition(TrainingPoint::new(
            x.to_vec(),
            b_estimate.ln(),
            log_noise,
        ))?;
        Ok(LogNormalModel { log_gp, noise: self.noise })
    }

    /// E[b(x)] = exp(mu_log + sigma_log^2 / 2); strictly positive.
    pub fn linear_mean(&self, x: &[f64]) -> Result<f64> {
        let (mu, var) = self.log_gp.posterior(x)?;
        Ok((mu + 0.5 * var).exp())
    }

    /// Var[b(x)] = exp(2 mu_log + sigma_log^2) (exp(sigma_log^2) - 1).
    pub fn linear_variance(&self, x: &[f64]) -> Result<f64> {
        let (mu, var) = self.log_gp.posterior(x)?;
        Ok((2.0 * mu + var).exp() * (var.exp_m1()))
    }

    /// Posterior variance of log b(x), the quantity probing triggers on.
    pub fn log_variance_at(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_gp.posterior(x)?.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelSpec;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn model(sf: f64, noise: LogNoiseMode) -> LogNormalModel {
        let gp = GpModel::new(
            KernelSpec::squared_exponential(vec![1.0, 1.0], sf).unwrap(),
            0.0,
        )
        .unwrap();
        LogNormalModel::new(gp, noise)
    }

    #[test]
    fn observe_stores_log_target() {
        let m = model(1.0, LogNoiseMode::Fixed { value: 0.1 });
        let m = m.observe(&[0.0, 0.0], 2.0, 0.0).unwrap();
        assert_relative_eq!(m.log_gp.data()[0].target, 0.693147, epsilon = 1e-6);
        assert_relative_eq!(m.log_gp.data()[0].noise_variance, 0.1);
    }

    #[test]
    fn delta_method_noise_from_linear_variance() {
        let m = model(1.0, LogNoiseMode::DeltaMethod { floor: 1e-6 });
        let m = m.observe(&[0.0, 0.0], 2.0, 0.4).unwrap();
        assert_relative_eq!(m.log_gp.data()[0].noise_variance, 0.1, epsilon = 1e-15);
    }

    #[test]
    fn nonpositive_estimate_is_rejected() {
        let m = model(1.0, LogNoiseMode::Fixed { value: 0.1 });
        assert!(matches!(m.observe(&[0.0, 0.0], 0.0, 0.1), Err(Error::InvalidObservation(_))));
        assert!(matches!(m.observe(&[0.0, 0.0], -3.0, 0.1), Err(Error::InvalidObservation(_))));
        assert!(m.log_gp.is_empty());
    }

    #[test]
    fn prior_linear_mean_inflated_by_half_variance() {
        // prior log-variance 0.01 -> exp(0.005).
        let m = model(0.1, LogNoiseMode::Fixed { value: 0.1 });
        let mean = m.linear_mean(&[0.3, -0.7]).unwrap();
        assert_relative_eq!(mean, 1.005013, epsilon = 1e-6);

        // prior log-variance 2 -> exp(1) = e.
        let m = model(2.0_f64.sqrt(), LogNoiseMode::Fixed { value: 0.1 });
        let mean = m.linear_mean(&[0.0, 0.0]).unwrap();
        assert_relative_eq!(mean, std::f64::consts::E, epsilon = 1e-9);
    }

    #[test]
    fn linear_variance_formula() {
        // mu = 0, var = 1 -> e (e - 1).
        let m = model(1.0, LogNoiseMode::Fixed { value: 0.1 });
        let v = m.linear_variance(&[0.0, 0.0]).unwrap();
        assert_relative_eq!(v, 4.670774, epsilon = 1e-6);

        // var = 0: deterministic log value.
        let tiny = model(1e-12, LogNoiseMode::Fixed { value: 0.1 });
        assert!(tiny.linear_variance(&[0.0, 0.0]).unwrap() < 1e-20);
    }

    #[test]
    fn monte_carlo_oracle_for_both_moments() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        // Draws of exp(z), z ~ N(0.3, 0.5): the formulas say
        // mean = exp(0.55), var = exp(0.6 + 0.5) (exp(0.5) - 1).
        let mu = 0.3f64;
        let var = 0.5f64;
        let normal = Normal::new(mu, var.sqrt()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let b: f64 = normal.sample(&mut rng);
            let e = b.exp();
            sum += e;
            sum_sq += e * e;
        }
        let emp_mean = sum / n as f64;
        let emp_var = sum_sq / n as f64 - emp_mean * emp_mean;
        let formula_mean = (mu + 0.5 * var).exp();
        let formula_var = (2.0 * mu + var).exp() * var.exp_m1();
        assert!((emp_mean - formula_mean).abs() / formula_mean < 0.01);
        assert!((emp_var - formula_var).abs() / formula_var < 0.02);
    }

    #[test]
    fn near_noiseless_observation_is_recovered_in_linear_space() {
        let m = model(1.0, LogNoiseMode::Fixed { value: 1e-14 });
        let b = 1.7;
        let m = m.observe(&[0.2, 0.4], b, 0.0).unwrap();
        let mean = m.linear_mean(&[0.2, 0.4]).unwrap();
        assert!((mean - b).abs() < 1e-6, "{mean} vs {b}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn linear_mean_is_strictly_positive(
            obs in prop::collection::vec(
                (prop::collection::vec(-3.0..3.0f64, 2), 0.01..50.0f64),
                0..6,
            ),
            q in prop::collection::vec(-4.0..4.0f64, 2),
        ) {
            let mut m = model(1.0, LogNoiseMode::Fixed { value: 0.1 });
            for (x, b) in &obs {
                m = m.observe(x, *b, 0.0).unwrap();
            }
            prop_assert!(m.linear_mean(&q).unwrap() > 0.0);
            prop_assert!(m.linear_variance(&q).unwrap() >= 0.0);
        }

        /// With the log-mean fixed, the linear mean grows with log-variance.
        #[test]
        fn linear_mean_increases_with_log_variance(
            mu in -2.0..2.0f64,
            v1 in 0.0..3.0f64,
            bump in 0.01..2.0f64,
        ) {
            let low = (mu + 0.5 * v1).exp();
            let high = (mu + 0.5 * (v1 + bump)).exp();
            prop_assert!(high > low);
        }
    }
}
