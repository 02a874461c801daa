//! Embedded Runge-Kutta 4(5) integration with Dormand-Prince coefficients.
//!
//! Fixed right-hand side over one hold interval, adaptive step size with the
//! usual mixed absolute/relative error norm and a PI-free step controller.

use nalgebra::DVector;

use crate::error::{Error, Result};

const STAGES: usize = 7;

// Dormand-Prince 5(4) Butcher tableau.
const C: [f64; STAGES] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; STAGES] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// 5th-order solution weights (row 7 of A, FSAL).
const B5: [f64; STAGES] =
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
/// Embedded 4th-order weights for the error estimate.
const B4: [f64; STAGES] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const MIN_SCALE: f64 = 0.2;
const MAX_SCALE: f64 = 5.0;
const MAX_STEPS: usize = 2_000_000;

/// Integrates dy/dt = f(t, y) from t = 0 to t = span, with both absolute and
/// relative tolerance set to `tol`.
pub fn integrate<F>(f: F, y0: &DVector<f64>, span: f64, tol: f64) -> Result<DVector<f64>>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    assert!(span > 0.0, "integration span must be positive");
    let atol = tol;
    let rtol = tol;

    let mut t = 0.0;
    let mut y = y0.clone();
    let mut k: Vec<DVector<f64>> = vec![DVector::zeros(y.len()); STAGES];
    k[0] = f(t, &y);
    let mut h = (span / 100.0).min(1e-2).max(1e-6 * span);

    for _ in 0..MAX_STEPS {
        if t >= span {
            return Ok(y);
        }
        h = h.min(span - t);
        if h < f64::EPSILON * span.max(1.0) * 4.0 {
            return Err(Error::Integration {
                time_reached: t,
                reason: "step size underflow".into(),
            });
        }

        for s in 1..STAGES {
            let mut ys = y.clone();
            for (j, kj) in k.iter().enumerate().take(s) {
                if A[s][j] != 0.0 {
                    ys.axpy(h * A[s][j], kj, 1.0);
                }
            }
            k[s] = f(t + C[s] * h, &ys);
        }

        let mut y5 = y.clone();
        let mut y4 = y.clone();
        for s in 0..STAGES {
            if B5[s] != 0.0 {
                y5.axpy(h * B5[s], &k[s], 1.0);
            }
            if B4[s] != 0.0 {
                y4.axpy(h * B4[s], &k[s], 1.0);
            }
        }

        if y5.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration {
                time_reached: t,
                reason: "non-finite state during integration".into(),
            });
        }

        // RMS of the componentwise error against atol + rtol * |y|.
        let mut err_sq = 0.0;
        for i in 0..y.len() {
            let scale = atol + rtol * y[i].abs().max(y5[i].abs());
            let e = (y5[i] - y4[i]) / scale;
            err_sq += e * e;
        }
        let err = (err_sq / y.len() as f64).sqrt();

        if err <= 1.0 {
            t += h;
            y = y5;
            // FSAL: the last stage is f at the accepted point.
            k[0] = k[STAGES - 1].clone();
        }
        let scale = if err == 0.0 {
            MAX_SCALE
        } else {
            (SAFETY * err.powf(-0.2)).clamp(MIN_SCALE, MAX_SCALE)
        };
        h *= scale;
    }
    Err(Error::Integration { time_reached: t, reason: "step budget exhausted".into() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exponential_decay() {
        let y0 = DVector::from_vec(vec![1.0]);
        let y = integrate(|_, y| -y.clone(), &y0, 2.0, 1e-10).unwrap();
        assert_relative_eq!(y[0], (-2.0f64).exp(), epsilon = 1e-9);
    }

    #[test]
    fn harmonic_oscillator_round_trip() {
        let y0 = DVector::from_vec(vec![1.0, 0.0]);
        let period = 2.0 * std::f64::consts::PI;
        let y = integrate(
            |_, y| DVector::from_vec(vec![y[1], -y[0]]),
            &y0,
            period,
            1e-10,
        )
        .unwrap();
        assert_relative_eq!(y[0], 1.0, epsilon = 1e-8);
        assert!(y[1].abs() < 1e-8);
    }

    #[test]
    fn halving_tolerance_self_convergence() {
        let y0 = DVector::from_vec(vec![0.3, -1.2]);
        let rhs = |_: f64, y: &DVector<f64>| DVector::from_vec(vec![y[1], -(y[0].sin()) - 0.1 * y[1]]);
        for tol in [1e-6, 1e-8] {
            let a = integrate(rhs, &y0, 5.0, tol).unwrap();
            let b = integrate(rhs, &y0, 5.0, tol / 2.0).unwrap();
            let diff = (&a - &b).norm();
            assert!(diff <= 10.0 * tol, "tol {tol}: endpoint moved by {diff}");
        }
    }

    #[test]
    fn non_finite_dynamics_reports_time_reached() {
        let y0 = DVector::from_vec(vec![1.0]);
        // Finite-time blowup: y' = y^2 diverges at t = 1.
        let err = integrate(|_, y| DVector::from_vec(vec![y[0] * y[0]]), &y0, 2.0, 1e-8);
        match err {
            Err(Error::Integration { time_reached, .. }) => {
                assert!(time_reached <= 1.01, "blowup reported at {time_reached}")
            }
            other => panic!("expected integration error, got {other:?}"),
        }
    }
}
