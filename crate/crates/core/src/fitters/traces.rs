//! Rabi-trace calibration and magnon Rabi fits.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::nlls::{nlls_solve, FitResult, NllsOptions, ParamSet};
use super::Samples;
use crate::error::{Error, Result};
use crate::magnon::{ensemble_average_evolution, spin_flip_background, EnsembleSpread, LindbladParams};

/// Strongest sinusoid in `y - mean(y)`: (frequency, sine weight, cosine weight).
fn dominant_frequency(samples: &Samples) -> Option<(f64, f64, f64)> {
    let n = samples.len();
    let span = samples.span();
    if n < 4 || !(span > 0.0) {
        return None;
    }
    let mean = samples.y.iter().sum::<f64>() / n as f64;
    let t0 = samples.x.iter().cloned().fold(f64::INFINITY, f64::min);
    let f_max = 0.5 * (n - 1) as f64 / span;
    let step = 0.02 / span;
    let mut best: Option<(f64, f64, f64, f64)> = None;
    let mut f = 0.25 / span;
    while f <= f_max {
        let (mut s, mut c) = (0.0, 0.0);
        for i in 0..n {
            let arg = 2.0 * PI * f * (samples.x[i] - t0);
            let y = samples.y[i] - mean;
            s += y * arg.sin();
            c += y * arg.cos();
        }
        let power = s * s + c * c;
        if best.map_or(true, |b| power > b.0) {
            best = Some((power, f, 2.0 * s / n as f64, 2.0 * c / n as f64));
        }
        f += step;
    }
    best.map(|b| (b.1, b.2, b.3))
}

fn wrap_phase(p: f64) -> f64 {
    let w = (p + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI { PI } else { w }
}

/// Damped Rabi oscillation `offset + (amplitude/2) exp(-rate t) sin(2 pi f t + phase)`.
///
/// `amplitude` is peak to peak. Parameters: `frequency`, `amplitude`,
/// `decay_rate`, `offset`, `phase`, plus the derived `decay_time`. The decay
/// rate is bounded below by `1 / (1000 span)`; an undamped trace returns that
/// cap with a warning.
pub fn fit_damped_sine(samples: &Samples) -> Result<FitResult> {
    if samples.len() < 6 {
        return Err(Error::InvalidInput(format!("need at least 6 samples, got {}", samples.len())));
    }
    let lo = samples.y.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = samples.y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-12 * hi.abs().max(lo.abs())) {
        return Err(Error::Degenerate("trace has zero oscillation amplitude".into()));
    }
    let span = samples.span();
    let t0 = samples.x.iter().cloned().fold(f64::INFINITY, f64::min);
    let (f0, a, b) = dominant_frequency(samples).ok_or_else(|| Error::Degenerate("no oscillation found".into()))?;
    let mean = samples.y.iter().sum::<f64>() / samples.len() as f64;
    let rate_cap = 1.0 / (1000.0 * span);

    let mut params = ParamSet::new();
    let i_f = params.push("frequency", f0, 0.0, f64::INFINITY);
    let i_a = params.push("amplitude", 2.0 * a.hypot(b), 0.0, f64::INFINITY);
    let i_r = params.push("decay_rate", (1.0 / span).max(rate_cap), rate_cap, f64::INFINITY);
    let i_o = params.free("offset", mean);
    // Phase referenced to t0 during the fit.
    let i_p = params.free("phase", b.atan2(a));
    let mut fit = nlls_solve(
        |p| {
            samples.residuals(|t| {
                let dt = t - t0;
                p[i_o] + 0.5 * p[i_a] * (-p[i_r] * dt).exp() * (2.0 * PI * p[i_f] * dt + p[i_p]).sin()
            })
        },
        &params,
        &NllsOptions::default(),
    )?;
    // Refer the phase back to t = 0.
    fit.estimates[i_p] = wrap_phase(fit.estimates[i_p] - 2.0 * PI * fit.estimates[i_f] * t0);
    if t0 != 0.0 {
        // Amplitude and decay are referenced to t0 as well.
        fit.estimates[i_a] *= (fit.estimates[i_r] * t0).exp();
        fit.sigmas[i_a] *= (fit.estimates[i_r] * t0).exp();
    }
    let rate = fit.estimates[i_r];
    let rate_sigma = fit.sigmas[i_r];
    fit.push_derived("decay_time", 1.0 / rate, rate_sigma / (rate * rate));
    if fit.pinned[i_r] {
        fit.warnings.push("no resolvable damping; decay time reported at its cap".into());
    }
    if !(fit.estimates[i_a] > 2.0 * fit.sigmas[i_a]) {
        fit.warnings.push("oscillation amplitude consistent with zero".into());
    }
    if fit.estimates[i_f] * span < 1.0 {
        fit.warnings.push("trace spans less than one oscillation period".into());
    }
    Ok(fit)
}

/// Spin-down population from counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub values: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Rescales counts by the peak-to-peak Rabi amplitude. Values are never
/// clamped; any outside [-0.1, 1.1] are flagged.
pub fn counts_to_population(counts: &[f64], rabi_amplitude_counts: f64) -> Result<Population> {
    if !(rabi_amplitude_counts > 0.0) || !rabi_amplitude_counts.is_finite() {
        return Err(Error::InvalidInput(format!(
            "Rabi amplitude must be positive, got {rabi_amplitude_counts}"
        )));
    }
    let values: Vec<f64> = counts.iter().map(|c| c / rabi_amplitude_counts).collect();
    let outside: Vec<usize> = values
        .iter()
        .enumerate()
        .filter(|(_, v)| !(-0.1..=1.1).contains(*v))
        .map(|(i, _)| i)
        .collect();
    let mut warnings = Vec::new();
    if !outside.is_empty() {
        warnings.push(format!("{} populations outside [-0.1, 1.1] at indices {:?}", outside.len(), outside));
    }
    Ok(Population { values, warnings })
}

/// Off-resonant saturation `0.5 (1 - exp(-2 gamma1 t)) + background` with `gamma1 >= 0`.
pub fn fit_background_gamma1(samples: &Samples) -> Result<FitResult> {
    if samples.len() < 4 {
        return Err(Error::InvalidInput(format!("need at least 4 samples, got {}", samples.len())));
    }
    let first = (0..samples.len())
        .min_by(|&a, &b| samples.x[a].total_cmp(&samples.x[b]))
        .expect("nonempty");
    let last = (0..samples.len())
        .max_by(|&a, &b| samples.x[a].total_cmp(&samples.x[b]))
        .expect("nonempty");
    let b0 = samples.y[first] - spin_flip_background(0.0, samples.x[first]);
    let rise = (samples.y[last] - b0).clamp(1e-6, 0.49);
    let t_last = samples.x[last].max(f64::MIN_POSITIVE);
    let g0 = -(1.0 - 2.0 * rise).ln() / (2.0 * t_last);
    let mut params = ParamSet::new();
    let i_g = params.push("gamma1", g0, 0.0, f64::INFINITY);
    let i_b = params.free("background", b0);
    let opts = NllsOptions { allow_singular: true, ..NllsOptions::default() };
    nlls_solve(
        |p| samples.residuals(|t| spin_flip_background(p[i_g], t) + p[i_b]),
        &params,
        &opts,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnonRabiFit {
    /// (estimate, sigma) in Hz.
    pub omega_mag_negative: (f64, f64),
    pub omega_mag_positive: (f64, f64),
    pub omega_mag_mean: (f64, f64),
    /// Shared dephasing rate, 1/s.
    pub gamma_dephasing: (f64, f64),
    pub fit: FitResult,
}

struct Trace<'a> {
    samples: &'a Samples,
    times: Vec<f64>,
    index: Vec<usize>,
}

impl<'a> Trace<'a> {
    fn new(samples: &'a Samples) -> Self {
        let mut times = samples.x.clone();
        times.sort_by(f64::total_cmp);
        times.dedup();
        let index = samples
            .x
            .iter()
            .map(|t| times.partition_point(|v| v < t))
            .collect();
        Self { samples, times, index }
    }

    fn residuals(&self, params: &LindbladParams, spread: &EnsembleSpread, out: &mut Vec<f64>) -> bool {
        match ensemble_average_evolution(params, spread, &self.times) {
            Ok(pred) => {
                for (i, &k) in self.index.iter().enumerate() {
                    out.push((pred[k] - self.samples.y[i]) * self.samples.weight(i));
                }
                true
            }
            Err(_) => false,
        }
    }
}

/// Fits both magnon sidebands at one splitting with a shared dephasing rate.
///
/// Traces are spin-down populations driven on resonance from the ground
/// state; `gamma1` is held fixed and `t2_star` sets the Overhauser spread.
pub fn fit_magnon_rabi(negative: &Samples, positive: &Samples, gamma1: f64, t2_star: f64) -> Result<MagnonRabiFit> {
    for s in [negative, positive] {
        if s.len() < 4 {
            return Err(Error::InvalidInput("each sideband trace needs at least 4 samples".into()));
        }
        if s.x.iter().any(|t| *t < 0.0) {
            return Err(Error::InvalidInput("drive times must be nonnegative".into()));
        }
    }
    if !(gamma1 >= 0.0) {
        return Err(Error::InvalidInput("gamma1 must be nonnegative".into()));
    }
    let spread = EnsembleSpread::with_default_grid(t2_star)?;
    let traces = [Trace::new(negative), Trace::new(positive)];
    let lindblad = |omega_mag: f64, gamma: f64| LindbladParams {
        omega_mag,
        delta: 0.0,
        gamma1,
        gamma_dephasing: gamma,
    };
    let trace_cost = |tr: &Trace, omega: f64, gamma: f64| {
        let mut r = Vec::new();
        if tr.residuals(&lindblad(omega, gamma), &spread, &mut r) {
            r.iter().map(|v| v * v).sum::<f64>()
        } else {
            f64::INFINITY
        }
    };

    // Coarse seed: periodogram frequency per trace, then a joint grid over the
    // shared rate with a per-trace frequency scale.
    let f_seed: Vec<f64> = traces
        .iter()
        .map(|tr| dominant_frequency(tr.samples).map_or(1.0 / tr.samples.span(), |d| d.0))
        .collect();
    let gammas = [0.0, 1e5, 3e5, 1e6, 3e6, 1e7, 3e7];
    let scales = [0.7, 0.85, 1.0, 1.15, 1.3];
    let mut best = (f64::INFINITY, 0.0, [f_seed[0], f_seed[1]]);
    for &g in &gammas {
        let mut total = 0.0;
        let mut omegas = [0.0; 2];
        for (k, tr) in traces.iter().enumerate() {
            let (c, w) = scales
                .iter()
                .map(|s| (trace_cost(tr, s * f_seed[k], g), s * f_seed[k]))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .expect("nonempty");
            total += c;
            omegas[k] = w;
        }
        if total < best.0 {
            best = (total, g, omegas);
        }
    }

    let mut params = ParamSet::new();
    let i_n = params.push("omega_mag_negative", best.2[0], 0.0, f64::INFINITY);
    let i_p = params.push("omega_mag_positive", best.2[1], 0.0, f64::INFINITY);
    let i_g = params.push("gamma_dephasing", best.1, 0.0, f64::INFINITY);
    let n_resid = negative.len() + positive.len();
    let mut fit = nlls_solve(
        |p| {
            let mut r = Vec::with_capacity(n_resid);
            let ok = traces[0].residuals(&lindblad(p[i_n], p[i_g]), &spread, &mut r)
                && traces[1].residuals(&lindblad(p[i_p], p[i_g]), &spread, &mut r);
            if ok {
                r
            } else {
                vec![f64::INFINITY; n_resid]
            }
        },
        &params,
        &NllsOptions { allow_singular: true, ..NllsOptions::default() },
    )?;
    let (wn, sn) = (fit.estimates[i_n], fit.sigmas[i_n]);
    let (wp, sp) = (fit.estimates[i_p], fit.sigmas[i_p]);
    let mean = (0.5 * (wn + wp), 0.5 * sn.hypot(sp));
    fit.push_derived("omega_mag_mean", mean.0, mean.1);
    Ok(MagnonRabiFit {
        omega_mag_negative: (wn, sn),
        omega_mag_positive: (wp, sp),
        omega_mag_mean: mean,
        gamma_dephasing: (fit.estimates[i_g], fit.sigmas[i_g]),
        fit,
    })
}
