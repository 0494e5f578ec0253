//! Adaptive Dormand-Prince 5(4) integrator for small fixed-size systems.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            rtol: 1e-9,
            atol: 1e-12,
            max_steps: 1_000_000,
        }
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// 5th minus 4th order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn axpy<const N: usize>(y: &[f64; N], terms: &[(f64, &[f64; N])], h: f64) -> [f64; N] {
    let mut out = *y;
    for (c, k) in terms {
        for i in 0..N {
            out[i] += h * c * k[i];
        }
    }
    out
}

/// Integrates `dy/dt = f(t, y)` from `t0` and returns the state at each of
/// `times` (nondecreasing, all `>= t0`). Steps are clipped to land exactly
/// on every requested time.
pub fn dopri5<const N: usize, F>(f: F, t0: f64, y0: [f64; N], times: &[f64], tol: Tolerances) -> Result<Vec<[f64; N]>>
where
    F: Fn(f64, &[f64; N]) -> [f64; N],
{
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidInput("output times must be nondecreasing".into()));
    }
    if times.first().is_some_and(|t| *t < t0) {
        return Err(Error::InvalidInput("output times precede the initial time".into()));
    }
    let mut out = Vec::with_capacity(times.len());
    let mut t = t0;
    let mut y = y0;
    let mut k1 = f(t, &y);
    let span = times.last().map_or(0.0, |tl| tl - t0);
    let mut h = if span > 0.0 { span * 1e-3 } else { 0.0 };
    let mut steps = 0usize;

    for &target in times {
        while t < target {
            if steps >= tol.max_steps {
                return Err(Error::Integrator {
                    time: t,
                    reason: "step budget exhausted".into(),
                });
            }
            steps += 1;
            let remaining = target - t;
            let last = h >= remaining;
            let step = if last { remaining } else { h };

            let k2 = f(t + C2 * step, &axpy(&y, &[(A21, &k1)], step));
            let k3 = f(t + C3 * step, &axpy(&y, &[(A31, &k1), (A32, &k2)], step));
            let k4 = f(t + C4 * step, &axpy(&y, &[(A41, &k1), (A42, &k2), (A43, &k3)], step));
            let k5 = f(
                t + C5 * step,
                &axpy(&y, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)], step),
            );
            let k6 = f(
                t + step,
                &axpy(&y, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)], step),
            );
            let y_new = axpy(&y, &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)], step);
            let k7 = f(t + step, &y_new);

            let mut err = 0.0;
            for i in 0..N {
                let e = step * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
                let sc = tol.atol + tol.rtol * y[i].abs().max(y_new[i].abs());
                err += (e / sc).powi(2);
            }
            err = (err / N as f64).sqrt();
            if !err.is_finite() {
                return Err(Error::Integrator {
                    time: t,
                    reason: "non-finite error estimate".into(),
                });
            }

            if err <= 1.0 {
                t = if last { target } else { t + step };
                y = y_new;
                k1 = k7;
            }
            let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            let next = step * factor;
            // Do not let a short clipped final step shrink the step size.
            if !(last && err <= 1.0) || next > h {
                h = next;
            }
            if h < 1e-14 * t.abs().max(span) {
                return Err(Error::Integrator {
                    time: t,
                    reason: "step size underflow".into(),
                });
            }
        }
        out.push(y);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_oscillator() {
        let times: Vec<f64> = (0..=100).map(|i| i as f64 * 0.2).collect();
        let ys = dopri5(|_, y: &[f64; 2]| [y[1], -y[0]], 0.0, [1.0, 0.0], &times, Tolerances::default()).unwrap();
        for (t, y) in times.iter().zip(&ys) {
            assert!((y[0] - t.cos()).abs() < 1e-8, "t={t}");
        }
    }

    #[test]
    fn rejects_unordered_times() {
        assert!(dopri5(|_, y: &[f64; 1]| [y[0]], 0.0, [1.0], &[1.0, 0.5], Tolerances::default()).is_err());
    }

    #[test]
    fn repeated_times_allowed() {
        let ys = dopri5(|_, y: &[f64; 1]| [-y[0]], 0.0, [1.0], &[0.0, 0.5, 0.5], Tolerances::default()).unwrap();
        assert_eq!(ys[0][0], 1.0);
        assert_eq!(ys[1], ys[2]);
    }
}
