//! Covariance functions over state space.
//!
//! Two stationary ARD kernels are provided: squared-exponential and rational
//! quadratic, each with one lengthscale per input dimension. Hyperparameters
//! are carried around as plain data (`KernelSpec`) so they can be serialised,
//! perturbed by the optimiser and shared between models.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    #[serde(rename = "se_ard")]
    SquaredExponentialArd,
    #[serde(rename = "rq_ard")]
    RationalQuadraticArd,
}

/// Hyperparameters of an ARD kernel.
///
/// `lengthscales` has one entry per input dimension, `output_scale` is the
/// signal standard deviation, and `alpha` is the rational-quadratic shape
/// parameter (ignored for the squared-exponential kernel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub lengthscales: Vec<f64>,
    pub output_scale: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    2.0
}

impl KernelSpec {
    pub fn squared_exponential(lengthscales: Vec<f64>, output_scale: f64) -> Result<Self> {
        let spec = KernelSpec {
            kind: KernelKind::SquaredExponentialArd,
            lengthscales,
            output_scale,
            alpha: default_alpha(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn rational_quadratic(
        lengthscales: Vec<f64>,
        output_scale: f64,
        alpha: f64,
    ) -> Result<Self> {
        let spec = KernelSpec {
            kind: KernelKind::RationalQuadraticArd,
            lengthscales,
            output_scale,
            alpha,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Number of input dimensions the kernel expects.
    pub fn input_dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// Checks the positivity invariants on all hyperparameters.
    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.is_empty() {
            return Err(Error::Config("kernel needs at least one lengthscale".into()));
        }
        for (d, &l) in self.lengthscales.iter().enumerate() {
            if !(l > 0.0) || !l.is_finite() {
                return Err(Error::Config(format!("lengthscale[{d}] = {l} must be positive")));
            }
        }
        if !(self.output_scale > 0.0) || !self.output_scale.is_finite() {
            return Err(Error::Config(format!(
                "output_scale = {} must be positive",
                self.output_scale
            )));
        }
        if self.kind == KernelKind::RationalQuadraticArd && (!(self.alpha > 0.0) || !self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha = {} must be positive", self.alpha)));
        }
        Ok(())
    }

    /// Evaluates k(x, x').
    pub fn evaluate(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let dim = self.input_dim();
        if x.len() != dim {
            return Err(Error::Dimension { expected: dim, got: x.len() });
        }
        if y.len() != dim {
            return Err(Error::Dimension { expected: dim, got: y.len() });
        }
        // Scaled squared distance sum_d (x_d - y_d)^2 / l_d^2.
        let r2: f64 = x
            .iter()
            .zip(y)
            .zip(&self.lengthscales)
            .map(|((&a, &b), &l)| {
                let d = (a - b) / l;
                d * d
            })
            .sum();
        let sf2 = self.output_scale * self.output_scale;
        let k = match self.kind {
            KernelKind::SquaredExponentialArd => sf2 * (-0.5 * r2).exp(),
            KernelKind::RationalQuadraticArd => {
                sf2 * (1.0 + r2 / (2.0 * self.alpha)).powf(-self.alpha)
            }
        };
        Ok(k)
    }

    /// Assembles the Gram matrix G[i][j] = k(x_i, x_j) + noise_i * delta_ij.
    pub fn gram(&self, inputs: &[Vec<f64>], noise: &Noise) -> Result<DMatrix<f64>> {
        let n = inputs.len();
        noise.check_len(n)?;
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let k = self.evaluate(&inputs[i], &inputs[j])?;
                g[(i, j)] = k;
                g[(j, i)] = k;
            }
            g[(i, i)] += noise.at(i);
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite entry in Gram matrix".into()));
        }
        Ok(g)
    }
}

/// Per-point observation noise for Gram assembly: a scalar broadcast or one
/// nonnegative variance per point.
#[derive(Debug, Clone)]
pub enum Noise {
    Scalar(f64),
    PerPoint(Vec<f64>),
}

impl Noise {
    fn check_len(&self, n: usize) -> Result<()> {
        match self {
            Noise::Scalar(_) => Ok(()),
            Noise::PerPoint(v) if v.len() == n => Ok(()),
            Noise::PerPoint(v) => Err(Error::Dimension { expected: n, got: v.len() }),
        }
    }

    fn at(&self, i: usize) -> f64 {
        match self {
            Noise::Scalar(s) => *s,
            Noise::PerPoint(v) => v[i],
        }
    }
}
