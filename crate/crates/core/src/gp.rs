//! Exact Gaussian-process regression with heteroscedastic observation noise.
//!
//! A `GpModel` is a zero-mean GP conditioned on a dataset of scalar targets.
//! The Gram matrix carries `base_noise_variance` plus each point's own
//! `noise_variance` on its diagonal, which is how derivative-estimate
//! uncertainty is propagated into the posterior. The Cholesky factor and the
//! solve of (K+S)^{-1} y are cached; `condition` returns a fresh model so
//! readers never observe a half-updated factorisation.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{KernelKind, KernelSpec, Noise};

/// One observation: an input state, a scalar target and the extra
/// observation-noise variance attached to this particular point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPoint {
    pub input: Vec<f64>,
    pub target: f64,
    pub noise_variance: f64,
}

impl TrainingPoint {
    pub fn new(input: Vec<f64>, target: f64, noise_variance: f64) -> Self {
        TrainingPoint { input, target, noise_variance }
    }
}

/// Points closer than this (Euclidean, in input space) replace an existing
/// point instead of growing the dataset.
pub const DEDUP_DISTANCE: f64 = 1e-6;

/// Negative posterior variances above this bound are treated as roundoff and
/// clamped to zero; anything below it is clamped too but logged.
const VARIANCE_ROUNDOFF: f64 = -1e-8;

/// Serialised face of a model: the caches are rebuilt on load.
#[derive(Serialize, Deserialize)]
struct GpModelRepr {
    kernel: KernelSpec,
    base_noise_variance: f64,
    data: Vec<TrainingPoint>,
}

/// Exact GP posterior over a scalar function of state.
#[derive(Debug, Serialize, Deserialize)]
#[serde(try_from = "GpModelRepr", into = "GpModelRepr")]
pub struct GpModel {
    kernel: KernelSpec,
    base_noise_variance: f64,
    data: Vec<TrainingPoint>,
    /// Lower-triangular factor of K + S (with any jitter that was needed).
    factor: Option<DMatrix<f64>>,
    /// Cached solve of (K + S)^{-1} y.
    alpha: DVector<f64>,
    clamp_warnings: AtomicU64,
}

impl Clone for GpModel {
    fn clone(&self) -> Self {
        GpModel {
            kernel: self.kernel.clone(),
            base_noise_variance: self.base_noise_variance,
            data: self.data.clone(),
            factor: self.factor.clone(),
            alpha: self.alpha.clone(),
            clamp_warnings: AtomicU64::new(self.clamp_warnings.load(Ordering::Relaxed)),
        }
    }
}

impl TryFrom<GpModelRepr> for GpModel {
    type Error = Error;

    fn try_from(repr: GpModelRepr) -> Result<Self> {
        let mut model = GpModel::new(repr.kernel, repr.base_noise_variance)?;
        model.data = repr.data;
        model.refactor()?;
        Ok(model)
    }
}

impl From<GpModel> for GpModelRepr {
    fn from(m: GpModel) -> Self {
        GpModelRepr {
            kernel: m.kernel,
            base_noise_variance: m.base_noise_variance,
            data: m.data,
        }
    }
}

impl GpModel {
    pub fn new(kernel: KernelSpec, base_noise_variance: f64) -> Result<Self> {
        kernel.validate()?;
        if base_noise_variance < 0.0 || !base_noise_variance.is_finite() {
            return Err(Error::Config(format!(
                "base_noise_variance = {base_noise_variance} must be nonnegative"
            )));
        }
        Ok(GpModel {
            kernel,
            base_noise_variance,
            data: Vec::new(),
            factor: None,
            alpha: DVector::zeros(0),
            clamp_warnings: AtomicU64::new(0),
        })
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn base_noise_variance(&self) -> f64 {
        self.base_noise_variance
    }

    pub fn data(&self) -> &[TrainingPoint] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of times a (slightly) negative posterior variance was clamped.
    pub fn clamp_warning_count(&self) -> u64 {
        self.clamp_warnings.load(Ordering::Relaxed)
    }

    fn per_point_noise(&self) -> Noise {
        Noise::PerPoint(
            self.data
                .iter()
                .map(|p| self.base_noise_variance + p.noise_variance)
                .collect(),
        )
    }

    fn inputs(&self) -> Vec<Vec<f64>> {
        self.data.iter().map(|p| p.input.clone()).collect()
    }

    fn targets(&self) -> DVector<f64> {
        DVector::from_iterator(self.data.len(), self.data.iter().map(|p| p.target))
    }

    /// Rebuilds the Cholesky factor and alpha vector from the current data,
    /// escalating diagonal jitter on failure.
    fn refactor(&mut self) -> Result<()> {
        if self.data.is_empty() {
            self.factor = None;
            self.alpha = DVector::zeros(0);
            return Ok(());
        }
        let gram = self.kernel.gram(&self.inputs(), &self.per_point_noise())?;
        let chol = cholesky_with_jitter(&gram)?;
        self.alpha = chol.solve(&self.targets());
        self.factor = Some(chol.unpack());
        Ok(())
    }

    /// Adds a training point and returns the reconditioned model.
    ///
    /// A point within [`DEDUP_DISTANCE`] of an existing input replaces that
    /// entry instead of growing the dataset.
    pub fn condition(&self, point: TrainingPoint) -> Result<GpModel> {
        if point.input.len() != self.kernel.input_dim() {
            return Err(Error::Dimension {
                expected: self.kernel.input_dim(),
                got: point.input.len(),
            });
        }
        let mut next = self.clone();
        match next.data.iter().position(|p| euclid(&p.input, &point.input) < DEDUP_DISTANCE) {
            Some(i) => next.data[i] = point,
            None => next.data.push(point),
        }
        next.refactor()?;
        Ok(next)
    }

    /// Posterior mean and variance of the latent function at `x`.
    ///
    /// An empty model reports the prior: (0, k(x,x)).
    pub fn posterior(&self, x: &[f64]) -> Result<(f64, f64)> {
        let prior = self.kernel.evaluate(x, x)?;
        let Some(factor) = &self.factor else {
            return Ok((0.0, prior));
        };
        let n = self.data.len();
        let kx = DVector::from_iterator(
            n,
            self.data
                .iter()
                .map(|p| self.kernel.evaluate(x, &p.input))
                .collect::<Result<Vec<_>>>()?,
        );
        let mean = kx.dot(&self.alpha);
        // var = k(x,x) - || L^{-1} k ||^2
        let v = factor
            .clone()
            .solve_lower_triangular(&kx)
            .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
        let mut variance = prior - v.norm_squared();
        if variance < 0.0 {
            if variance < VARIANCE_ROUNDOFF {
                log::warn!("posterior variance {variance:.3e} clamped to 0");
            }
            self.clamp_warnings.fetch_add(1, Ordering::Relaxed);
            variance = 0.0;
        }
        Ok((mean, variance))
    }

    /// log p(y | X, theta) for the current dataset.
    pub fn log_marginal_likelihood(&self) -> Result<f64> {
        if self.data.is_empty() {
            return Err(Error::Numerical("log marginal likelihood of empty dataset".into()));
        }
        let factor = self.factor.as_ref().expect("non-empty model has a factor");
        let n = self.data.len() as f64;
        let y = self.targets();
        let log_det: f64 = 2.0 * factor.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(-0.5 * y.dot(&self.alpha) - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln())
    }

    /// Maximises the log marginal likelihood over the kernel hyperparameters
    /// with a seeded multi-restart simplex search in log-space.
    ///
    /// Restart 0 starts from the current hyperparameters, the remaining
    /// `restarts - 1` start from uniform draws inside `bounds`, so the result
    /// is never worse than the model it replaces.
    pub fn optimize_hyperparameters(
        &self,
        bounds: &OptimizeBounds,
        restarts: usize,
        seed: u64,
    ) -> Result<GpModel> {
        if self.data.len() < 2 {
            return Err(Error::Optimization(format!(
                "need at least 2 training points, have {}",
                self.data.len()
            )));
        }
        if restarts == 0 {
            return Err(Error::Optimization("restarts must be >= 1".into()));
        }
        bounds.check(&self.kernel)?;

        let objective = |theta: &[f64]| -> f64 {
            let spec = bounds.spec_from_log_params(&self.kernel, theta);
            match self.with_kernel(spec) {
                Ok(m) => m.log_marginal_likelihood().unwrap_or(f64::NEG_INFINITY),
                Err(_) => f64::NEG_INFINITY,
            }
        };

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let current = bounds.clamp(&log_params(&self.kernel));
        let mut best_theta = current.clone();
        let mut best_val = objective(&current);

        for r in 0..restarts {
            let start = if r == 0 {
                current.clone()
            } else {
                bounds
                    .lower
                    .iter()
                    .zip(&bounds.upper)
                    .map(|(&lo, &hi)| rng.random_range(lo..=hi))
                    .collect()
            };
            let (theta, val) = nelder_mead(&objective, &start, bounds, 500);
            if val > best_val {
                best_val = val;
                best_theta = theta;
            }
        }

        if !best_val.is_finite() {
            return Err(Error::Optimization(
                "no restart produced a finite log marginal likelihood".into(),
            ));
        }
        self.with_kernel(bounds.spec_from_log_params(&self.kernel, &best_theta))
    }

    /// Same data and noise under a different kernel; refactorises.
    pub fn with_kernel(&self, kernel: KernelSpec) -> Result<GpModel> {
        kernel.validate()?;
        if kernel.input_dim() != self.kernel.input_dim() {
            return Err(Error::Dimension {
                expected: self.kernel.input_dim(),
                got: kernel.input_dim(),
            });
        }
        let mut next = self.clone();
        next.kernel = kernel;
        next.refactor()?;
        Ok(next)
    }

    /// Lower-triangular factor of the (jittered) Gram matrix, for inspection.
    pub fn factor(&self) -> Option<&DMatrix<f64>> {
        self.factor.as_ref()
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Cholesky with escalating diagonal jitter: start at 1e-10 * trace/n and
/// multiply by 10 until the factorisation succeeds or the jitter passes 1e-4.
fn cholesky_with_jitter(gram: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(gram.clone()) {
        return Ok(c);
    }
    let n = gram.nrows() as f64;
    let mut jitter = 1e-10 * gram.trace() / n;
    while jitter <= 1e-4 {
        let mut g = gram.clone();
        for i in 0..gram.nrows() {
            g[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(g) {
            log::debug!("gram factorised with jitter {jitter:.3e}");
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical(
        "Gram matrix not positive definite after jitter escalation".into(),
    ))
}

/// Hyperparameters as a log-space vector: [ln l_1 .. ln l_d, ln sigma_f]
/// plus ln alpha for rational-quadratic kernels.
fn log_params(spec: &KernelSpec) -> Vec<f64> {
    let mut p: Vec<f64> = spec.lengthscales.iter().map(|l| l.ln()).collect();
    p.push(spec.output_scale.ln());
    if spec.kind == KernelKind::RationalQuadraticArd {
        p.push(spec.alpha.ln());
    }
    p
}

/// Box bounds, in log-space, over the kernel hyperparameter vector.
#[derive(Debug, Clone)]
pub struct OptimizeBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl OptimizeBounds {
    /// Lengthscales in [0.05, 20], output scale in [0.05, 100] and (for RQ)
    /// alpha in [0.1, 100].
    pub fn default_for(spec: &KernelSpec) -> OptimizeBounds {
        let d = spec.input_dim();
        let mut lower: Vec<f64> = vec![0.05f64.ln(); d];
        let mut upper: Vec<f64> = vec![20.0f64.ln(); d];
        lower.push(0.05f64.ln());
        upper.push(100.0f64.ln());
        if spec.kind == KernelKind::RationalQuadraticArd {
            lower.push(0.1f64.ln());
            upper.push(100.0f64.ln());
        }
        OptimizeBounds { lower, upper }
    }

    fn param_count(spec: &KernelSpec) -> usize {
        spec.input_dim() + 1 + usize::from(spec.kind == KernelKind::RationalQuadraticArd)
    }

    fn check(&self, spec: &KernelSpec) -> Result<()> {
        let want = Self::param_count(spec);
        if self.lower.len() != want || self.upper.len() != want {
            return Err(Error::Dimension { expected: want, got: self.lower.len() });
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| l > u) {
            return Err(Error::Config("optimisation bounds with lower > upper".into()));
        }
        Ok(())
    }

    fn clamp(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&t, (&lo, &hi))| t.clamp(lo, hi))
            .collect()
    }

    fn spec_from_log_params(&self, template: &KernelSpec, theta: &[f64]) -> KernelSpec {
        let theta = self.clamp(theta);
        let d = template.input_dim();
        let mut spec = template.clone();
        for (l, &t) in spec.lengthscales.iter_mut().zip(&theta[..d]) {
            *l = t.exp();
        }
        spec.output_scale = theta[d].exp();
        if template.kind == KernelKind::RationalQuadraticArd {
            spec.alpha = theta[d + 1].exp();
        }
        spec
    }
}

/// Derivative-free simplex maximisation with projection onto box bounds.
fn nelder_mead<F: Fn(&[f64]) -> f64>(
    f: &F,
    start: &[f64],
    bounds: &OptimizeBounds,
    max_iter: usize,
) -> (Vec<f64>, f64) {
    let dim = start.len();
    let proj = |p: &[f64]| bounds.clamp(p);

    // Initial simplex: the start plus a 5% (in log-space, i.e. additive 0.05)
    // step along each coordinate.
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    let p0 = proj(start);
    simplex.push((p0.clone(), f(&p0)));
    for i in 0..dim {
        let mut p = p0.clone();
        p[i] += if p[i] + 0.05 <= bounds.upper[i] { 0.05 } else { -0.05 };
        let p = proj(&p);
        let v = f(&p);
        simplex.push((p, v));
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    for _ in 0..max_iter {
        // Descending by objective value: best first (maximisation).
        simplex.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        let best = simplex[0].1;
        let worst = simplex[dim].1;
        if best.is_finite() && worst.is_finite() && (best - worst).abs() < 1e-10 {
            break;
        }

        let centroid: Vec<f64> = (0..dim)
            .map(|i| simplex[..dim].iter().map(|(p, _)| p[i]).sum::<f64>() / dim as f64)
            .collect();
        let xw = simplex[dim].0.clone();

        let reflect: Vec<f64> =
            proj(&(0..dim).map(|i| centroid[i] + alpha * (centroid[i] - xw[i])).collect::<Vec<_>>());
        let fr = f(&reflect);

        if fr > simplex[0].1 {
            let expand: Vec<f64> = proj(
                &(0..dim).map(|i| centroid[i] + gamma * (reflect[i] - centroid[i])).collect::<Vec<_>>(),
            );
            let fe = f(&expand);
            simplex[dim] = if fe > fr { (expand, fe) } else { (reflect, fr) };
        } else if fr > simplex[dim - 1].1 {
            simplex[dim] = (reflect, fr);
        } else {
            let contract: Vec<f64> =
                proj(&(0..dim).map(|i| centroid[i] + rho * (xw[i] - centroid[i])).collect::<Vec<_>>());
            let fc = f(&contract);
            if fc > simplex[dim].1 {
                simplex[dim] = (contract, fc);
            } else {
                // Shrink towards the best vertex.
                let xb = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let p: Vec<f64> = entry
                        .0
                        .iter()
                        .zip(&xb)
                        .map(|(&x, &b)| b + sigma * (x - b))
                        .collect();
                    let p = proj(&p);
                    let v = f(&p);
                    *entry = (p, v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    simplex[0].clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn se_model(ls: Vec<f64>, sf: f64, noise: f64) -> GpModel {
        GpModel::new(KernelSpec::squared_exponential(ls, sf).unwrap(), noise).unwrap()
    }

    /// Dense-inverse reference: mean, variance and LML straight from the
    /// definition, independent of the Cholesky path.
    fn dense_oracle(model: &GpModel, x: &[f64]) -> (f64, f64, f64) {
        let n = model.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] = model
                    .kernel()
                    .evaluate(&model.data()[i].input, &model.data()[j].input)
                    .unwrap();
            }
            k[(i, i)] += model.base_noise_variance() + model.data()[i].noise_variance;
        }
        let kinv = k.clone().try_inverse().expect("oracle inverse");
        let y = DVector::from_iterator(n, model.data().iter().map(|p| p.target));
        let kx = DVector::from_iterator(
            n,
            model.data().iter().map(|p| model.kernel().evaluate(x, &p.input).unwrap()),
        );
        let mean = kx.dot(&(&kinv * &y));
        let var = model.kernel().evaluate(x, x).unwrap() - kx.dot(&(&kinv * &kx));
        let lml = -0.5 * y.dot(&(&kinv * &y))
            - 0.5 * k.determinant().ln()
            - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        (mean, var, lml)
    }

    #[test]
    fn noise_free_point_interpolates() {
        let m = se_model(vec![1.0], 1.0, 0.0)
            .condition(TrainingPoint::new(vec![0.3], 3.0, 0.0))
            .unwrap();
        let (mean, var) = m.posterior(&[0.3]).unwrap();
        assert_relative_eq!(mean, 3.0, epsilon = 1e-10);
        assert!(var.abs() < 1e-8);
    }

    #[test]
    fn noisy_point_shrinks_towards_prior_mean() {
        // noise equal to signal variance: mean = k/(k+s) * y = 3/2.
        let m = se_model(vec![1.0], 1.0, 0.0)
            .condition(TrainingPoint::new(vec![0.0], 3.0, 1.0))
            .unwrap();
        let (mean, _) = m.posterior(&[0.0]).unwrap();
        assert_relative_eq!(mean, 1.5, epsilon = 1e-12);
    }

    #[test]
    fn two_point_model_matches_dense_inverse() {
        let m = se_model(vec![0.8, 1.2], 1.3, 0.01)
            .condition(TrainingPoint::new(vec![0.0, 0.5], 1.0, 0.0))
            .unwrap()
            .condition(TrainingPoint::new(vec![0.7, -0.2], -0.5, 0.02))
            .unwrap();
        let x = [0.3, 0.1];
        let (mean, var) = m.posterior(&x).unwrap();
        let (om, ov, olml) = dense_oracle(&m, &x);
        assert_relative_eq!(mean, om, epsilon = 1e-10);
        assert_relative_eq!(var, ov, epsilon = 1e-10);
        assert_relative_eq!(m.log_marginal_likelihood().unwrap(), olml, epsilon = 1e-10);
    }

    #[test]
    fn empty_model_reports_prior() {
        let m = se_model(vec![1.0], 1.0, 0.0);
        let (mean, var) = m.posterior(&[2.0]).unwrap();
        assert_eq!(mean, 0.0);
        assert_relative_eq!(var, 1.0);
    }

    #[test]
    fn far_from_data_recovers_prior() {
        let m = se_model(vec![0.5], 1.0, 0.01)
            .condition(TrainingPoint::new(vec![0.0], 2.0, 0.0))
            .unwrap();
        let (mean, var) = m.posterior(&[50.0]).unwrap();
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn lml_single_point_analytic() {
        // k(x,x) = 1, no noise, y = 0: -0.5 ln(2 pi).
        let m = se_model(vec![1.0], 1.0, 0.0)
            .condition(TrainingPoint::new(vec![0.0], 0.0, 0.0))
            .unwrap();
        let lml = m.log_marginal_likelihood().unwrap();
        assert_relative_eq!(lml, -0.918939, epsilon = 1e-6);

        // k + s = 2, y = 2: -1 - 0.5 ln(4 pi).
        let m = se_model(vec![1.0], 1.0, 1.0)
            .condition(TrainingPoint::new(vec![0.0], 2.0, 0.0))
            .unwrap();
        let lml = m.log_marginal_likelihood().unwrap();
        assert_relative_eq!(lml, -1.0 - 0.5 * (4.0 * std::f64::consts::PI).ln(), epsilon = 1e-12);
    }

    #[test]
    fn factor_reconstructs_gram() {
        let mut m = se_model(vec![1.0, 1.0], 1.5, 0.01);
        for i in 0..6 {
            let x = vec![(i as f64 * 0.37).sin(), (i as f64 * 0.61).cos()];
            m = m.condition(TrainingPoint::new(x, i as f64 * 0.1, 0.005)).unwrap();
        }
        let gram = m
            .kernel()
            .gram(
                &m.data().iter().map(|p| p.input.clone()).collect::<Vec<_>>(),
                &Noise::PerPoint(
                    m.data().iter().map(|p| m.base_noise_variance() + p.noise_variance).collect(),
                ),
            )
            .unwrap();
        let l = m.factor().unwrap();
        let recon = l * l.transpose();
        let rel = (&recon - &gram).norm() / gram.norm();
        assert!(rel < 1e-8, "relative Frobenius error {rel}");
    }

    #[test]
    fn dedup_replaces_nearby_point() {
        let m = se_model(vec![1.0], 1.0, 0.01)
            .condition(TrainingPoint::new(vec![0.5], 1.0, 0.0))
            .unwrap()
            .condition(TrainingPoint::new(vec![0.5 + 1e-9], 2.0, 0.0))
            .unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.data()[0].target, 2.0);
    }

    #[test]
    fn duplicate_states_condition_without_failure() {
        // Two deliberately distinct-but-close points (outside the dedup
        // radius) exercise the jitter path with zero noise.
        let m = se_model(vec![1.0], 1.0, 0.0)
            .condition(TrainingPoint::new(vec![0.5], 1.0, 0.0))
            .unwrap()
            .condition(TrainingPoint::new(vec![0.5 + 1e-5], 1.0, 0.0))
            .unwrap();
        assert_eq!(m.len(), 2);
        let (mean, _) = m.posterior(&[0.5]).unwrap();
        assert_relative_eq!(mean, 1.0, epsilon = 1e-4);
    }

    #[test]
    fn recovers_lengthscale_from_synthetic_draw() {
        use rand_distr::{Distribution, StandardNormal};
        let true_ls = 0.5;
        let n = 40;
        let noise = 1e-4;
        let inputs: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 * 0.1]).collect();
        let spec = KernelSpec::squared_exponential(vec![true_ls], 1.0).unwrap();
        let gram = spec.gram(&inputs, &Noise::Scalar(noise)).unwrap();
        let chol = Cholesky::new(gram).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(&mut rng)));
        let y = chol.l() * z;

        // Start far from the truth.
        let mut m = se_model(vec![5.0], 2.0, noise);
        for (x, &t) in inputs.iter().zip(y.iter()) {
            m = m.condition(TrainingPoint::new(x.clone(), t, 0.0)).unwrap();
        }
        let bounds = OptimizeBounds::default_for(m.kernel());
        let fitted = m.optimize_hyperparameters(&bounds, 6, 3).unwrap();
        let ls = fitted.kernel().lengthscales[0];
        assert!(
            ls > true_ls / 2.0 && ls < true_ls * 2.0,
            "recovered lengthscale {ls} not within factor 2 of {true_ls}"
        );
        assert!(
            fitted.log_marginal_likelihood().unwrap() >= m.log_marginal_likelihood().unwrap()
        );
    }

    #[test]
    fn restart_from_optimum_never_worsens() {
        let mut m = se_model(vec![1.0], 1.0, 0.01);
        for i in 0..8 {
            m = m
                .condition(TrainingPoint::new(vec![i as f64 * 0.4], (i as f64 * 0.4).sin(), 0.0))
                .unwrap();
        }
        let bounds = OptimizeBounds::default_for(m.kernel());
        let once = m.optimize_hyperparameters(&bounds, 4, 9).unwrap();
        let again = once.optimize_hyperparameters(&bounds, 1, 9).unwrap();
        assert!(
            again.log_marginal_likelihood().unwrap()
                >= once.log_marginal_likelihood().unwrap() - 1e-9
        );
    }

    #[test]
    fn optimize_requires_two_points() {
        let m = se_model(vec![1.0], 1.0, 0.01)
            .condition(TrainingPoint::new(vec![0.0], 1.0, 0.0))
            .unwrap();
        let bounds = OptimizeBounds::default_for(m.kernel());
        assert!(matches!(m.optimize_hyperparameters(&bounds, 3, 1), Err(Error::Optimization(_))));
    }

    #[test]
    fn persistence_round_trip_is_bit_exact() {
        let mut m = se_model(vec![0.1 + 0.2], 1.0 / 3.0, 0.01);
        m = m.condition(TrainingPoint::new(vec![2.0_f64.sqrt()], 0.3337, 1e-7)).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        let back: GpModel = serde_json::from_str(&text).unwrap();
        assert_eq!(m.data()[0].input[0].to_bits(), back.data()[0].input[0].to_bits());
        assert_eq!(m.data()[0].target.to_bits(), back.data()[0].target.to_bits());
        assert_eq!(
            m.kernel().lengthscales[0].to_bits(),
            back.kernel().lengthscales[0].to_bits()
        );
        let (m0, v0) = m.posterior(&[0.5]).unwrap();
        let (m1, v1) = back.posterior(&[0.5]).unwrap();
        assert_eq!(m0.to_bits(), m1.to_bits());
        assert_eq!(v0.to_bits(), v1.to_bits());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Factorised path vs dense inverse on datasets of up to 8 points.
        #[test]
        fn oracle_equivalence(
            pts in prop::collection::vec((prop::collection::vec(-3.0..3.0f64, 2), -2.0..2.0f64), 1..=8),
            q in prop::collection::vec(-3.0..3.0f64, 2),
            ls in 0.3..3.0f64,
            sf in 0.3..3.0f64,
        ) {
            let mut m = se_model(vec![ls, ls * 1.3], sf, 1e-3);
            for (x, y) in &pts {
                m = m.condition(TrainingPoint::new(x.clone(), *y, 1e-4)).unwrap();
            }
            let (mean, var) = m.posterior(&q).unwrap();
            let (om, ov, olml) = dense_oracle(&m, &q);
            prop_assert!((mean - om).abs() < 1e-8, "mean {} vs {}", mean, om);
            prop_assert!((var - ov.max(0.0)).abs() < 1e-8, "var {} vs {}", var, ov);
            prop_assert!((m.log_marginal_likelihood().unwrap() - olml).abs() < 1e-8);
        }

        /// Conditioning on one more point never increases posterior variance.
        #[test]
        fn variance_shrinks_monotonically(
            pts in prop::collection::vec((prop::collection::vec(-3.0..3.0f64, 2), -2.0..2.0f64), 1..=6),
            extra in (prop::collection::vec(-3.0..3.0f64, 2), -2.0..2.0f64),
            queries in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 2), 3),
        ) {
            let mut m = se_model(vec![1.0, 1.0], 1.0, 1e-3);
            for (x, y) in &pts {
                m = m.condition(TrainingPoint::new(x.clone(), *y, 1e-4)).unwrap();
            }
            let grown = m.condition(TrainingPoint::new(extra.0, extra.1, 1e-4)).unwrap();
            for q in &queries {
                let (_, before) = m.posterior(q).unwrap();
                let (_, after) = grown.posterior(q).unwrap();
                prop_assert!(after <= before + 1e-8, "variance grew: {} -> {}", before, after);
            }
        }
    }
}
