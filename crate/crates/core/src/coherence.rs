//! Filter-function model of qubit visibility under Carr-Purcell sequences.
//!
//! The nuclear noise seen by the electron through the non-collinear
//! hyperfine term is a comb of delta lines at the nuclear Larmor
//! frequencies. Visibility follows from the overlap of that comb with the
//! sequence filter function:
//!
//! ```text
//! W(t) = exp[-sum_j (5/4)(1/N) (A_j sin(phi) sqrt(c_j) / w_j)^2 F(w_j t)]
//! ```
//!
//! with `w_j` ordinary Larmor frequencies (scaled by the field factor `b`)
//! so that revivals fall at `t = 2k / w_j`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitters::nlls::{nelder_mead, nlls_solve, FitResult, NllsOptions, ParamSet};
use crate::species::SpeciesRegistry;

/// Transverse spin variance per nucleus for spin 3/2, `(2/3) I(I+1)`.
const TRANSVERSE_VARIANCE: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PulseSequence {
    #[serde(rename = "CP1", alias = "cp1")]
    Cp1,
    #[serde(rename = "CP2", alias = "cp2")]
    Cp2,
}

impl std::str::FromStr for PulseSequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CP1" => Ok(Self::Cp1),
            "CP2" => Ok(Self::Cp2),
            other => Err(Error::InvalidInput(format!("unknown pulse sequence {other}"))),
        }
    }
}

impl std::fmt::Display for PulseSequence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cp1 => "CP1",
            Self::Cp2 => "CP2",
        })
    }
}

/// Filter function evaluated at `x = w t` (ordinary frequency times time).
///
/// CP2 has removable singularities at half-integer `x`; there the quotient
/// `sin^2(2 pi x) / cos^2(pi x)` is replaced by its exact limit `4 sin^2(pi x)`.
pub fn filter_value(seq: PulseSequence, x: f64) -> f64 {
    let s = (PI * x / 2.0).sin();
    let s4 = s * s * s * s;
    match seq {
        PulseSequence::Cp1 => 8.0 * s4,
        PulseSequence::Cp2 => {
            let c = (PI * x).cos();
            if c.abs() < 1e-6 {
                let sp = (PI * x).sin();
                32.0 * s4 * sp * sp
            } else {
                let s2 = (2.0 * PI * x).sin();
                8.0 * s4 * s2 * s2 / (c * c)
            }
        }
    }
}

/// Nuisance parameters of the fitted visibility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TechnicalParams {
    /// Overall visibility scale (pulse infidelity).
    pub v0: f64,
    /// Scale factor applied to every Larmor frequency.
    pub b: f64,
    /// Slow exponential decay constant, seconds. `f64::INFINITY` disables it.
    pub tau_d: f64,
}

impl Default for TechnicalParams {
    fn default() -> Self {
        Self {
            v0: 1.0,
            b: 1.0,
            tau_d: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityModel {
    pub sin_phi: f64,
    /// Total number of nuclei in the dot.
    pub n_total: f64,
    pub registry: SpeciesRegistry,
    pub technical: TechnicalParams,
    /// Mean polarization `<I_z>` per nucleus for each species, in registry
    /// order. `None` drops the polarization term of the noise spectrum.
    pub polarization: Option<Vec<f64>>,
}

impl VisibilityModel {
    pub fn new(sin_phi: f64, n_total: f64, registry: SpeciesRegistry) -> Result<Self> {
        let m = Self {
            sin_phi,
            n_total,
            registry,
            technical: TechnicalParams::default(),
            polarization: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_technical(mut self, technical: TechnicalParams) -> Result<Self> {
        self.technical = technical;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.technical;
        if !(0.0..=1.0).contains(&self.sin_phi) {
            return Err(Error::InvalidInput(format!("sin_phi {} outside [0, 1]", self.sin_phi)));
        }
        if !(self.n_total > 0.0) {
            return Err(Error::InvalidInput("n_total must be positive".into()));
        }
        if !(t.v0 > 0.0 && t.v0 <= 1.2) {
            return Err(Error::InvalidInput(format!("v0 {} outside (0, 1.2]", t.v0)));
        }
        if !(t.b > 0.0) || !(t.tau_d > 0.0) {
            return Err(Error::InvalidInput("b and tau_d must be positive".into()));
        }
        if let Some(p) = &self.polarization {
            if p.len() != self.registry.species().len() {
                return Err(Error::InvalidInput("one polarization value per species required".into()));
            }
        }
        Ok(())
    }

    /// Per-species `(b * w_j, E_j)` where the visibility exponent is `sum_j E_j F(b w_j t)`.
    fn exponent_terms(&self) -> Vec<(f64, f64)> {
        let b = self.technical.b;
        self.registry
            .species()
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let w = s.gyromagnetic_ratio * self.registry.field_t() * b;
                let amp = s.hyperfine_a * self.sin_phi * s.abundance_c.sqrt() / w;
                let pol = self
                    .polarization
                    .as_ref()
                    .map_or(1.0, |p| 1.0 + p[j] / TRANSVERSE_VARIANCE);
                (w, 1.25 / self.n_total * amp * amp * pol)
            })
            .collect()
    }
}

/// Delta-comb noise spectrum: `S(w) = sum_k weight_k * delta(w - freq_k)`.
///
/// Weights are normalized so that `W(t) = exp(-sum_k weight_k F(freq_k t) / (2 pi freq_k^2))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpectrum {
    pub lines: Vec<(f64, f64)>,
}

impl NoiseSpectrum {
    pub fn visibility(&self, t: f64, seq: PulseSequence) -> f64 {
        let exponent: f64 = self
            .lines
            .iter()
            .map(|&(w, weight)| weight / (2.0 * PI * w * w) * filter_value(seq, w * t))
            .sum();
        (-exponent).exp()
    }
}

pub fn noise_spectrum(model: &VisibilityModel) -> NoiseSpectrum {
    let mut lines: Vec<(f64, f64)> = model
        .exponent_terms()
        .into_iter()
        .map(|(w, e)| (w, 2.0 * PI * e * w * w))
        .collect();
    lines.sort_by(|a, b| a.0.total_cmp(&b.0));
    NoiseSpectrum { lines }
}

/// Microscopic visibility at time `t` (no `v0`, no slow decay; `b` applied).
pub fn visibility(t: f64, model: &VisibilityModel, seq: PulseSequence) -> f64 {
    let exponent: f64 = model
        .exponent_terms()
        .iter()
        .map(|&(w, e)| e * filter_value(seq, w * t))
        .sum();
    (-exponent).exp()
}

/// `v0 * W(t) * exp(-t / tau_d)`.
pub fn visibility_fit_model(t: f64, model: &VisibilityModel, seq: PulseSequence) -> f64 {
    let tech = &model.technical;
    tech.v0 * visibility(t, model, seq) * (-t / tech.tau_d).exp()
}

/// One measured visibility trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibilityDataset {
    pub omega_e: f64,
    pub sequence: PulseSequence,
    pub t: Vec<f64>,
    pub w: Vec<f64>,
    pub sigma: Option<Vec<f64>>,
}

impl VisibilityDataset {
    fn validate(&self) -> Result<()> {
        if self.t.len() != self.w.len() {
            return Err(Error::InvalidInput("t and W lengths differ".into()));
        }
        if let Some(s) = &self.sigma {
            if s.len() != self.t.len() || s.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::InvalidInput("sigma must be positive, one per sample".into()));
            }
        }
        if self.t.iter().any(|t| *t < 0.0) {
            return Err(Error::InvalidInput("negative delay".into()));
        }
        Ok(())
    }

    fn weight(&self, i: usize) -> f64 {
        self.sigma.as_ref().map_or(1.0, |s| 1.0 / s[i])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VisibilityFitOptions {
    pub b_min: f64,
    pub b_max: f64,
}

impl Default for VisibilityFitOptions {
    fn default() -> Self {
        Self { b_min: 0.95, b_max: 1.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinPhiEstimate {
    pub omega_e: f64,
    pub sin_phi: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetTechnical {
    pub v0: f64,
    pub v0_sigma: f64,
    pub tau_d: f64,
    pub tau_d_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibilityFit {
    pub sin_phi: Vec<SinPhiEstimate>,
    pub b: f64,
    pub b_sigma: f64,
    pub technical: Vec<DatasetTechnical>,
    pub fit: FitResult,
    /// Unweighted residuals `W - model`, one vector per dataset.
    pub residuals: Vec<Vec<f64>>,
}

struct Layout {
    b: usize,
    group_of: Vec<usize>,
    sin_phi: Vec<usize>,
    v0: Vec<usize>,
    rate: Vec<usize>,
}

fn model_value(base: &VisibilityModel, seq: PulseSequence, t: f64, sin_phi: f64, b: f64, v0: f64, rate: f64) -> f64 {
    // Inline of visibility_fit_model for the hot loop.
    let mut exponent = 0.0;
    for (j, s) in base.registry.species().iter().enumerate() {
        let w = s.gyromagnetic_ratio * base.registry.field_t() * b;
        let amp = s.hyperfine_a * sin_phi * s.abundance_c.sqrt() / w;
        let pol = base
            .polarization
            .as_ref()
            .map_or(1.0, |p| 1.0 + p[j] / TRANSVERSE_VARIANCE);
        exponent += 1.25 / base.n_total * amp * amp * pol * filter_value(seq, w * t);
    }
    v0 * (-exponent - rate * t).exp()
}

/// Global weighted fit of CP1/CP2 visibility traces.
///
/// `sin(phi)` is shared by all datasets with the same `omega_e`, `b` is
/// shared by every dataset, and `v0` and `tau_d` are free per dataset.
/// `base` supplies the registry (at the nominal field) and `N`.
pub fn fit_visibility(
    datasets: &[VisibilityDataset],
    base: &VisibilityModel,
    opts: &VisibilityFitOptions,
) -> Result<VisibilityFit> {
    if datasets.is_empty() {
        return Err(Error::InvalidInput("no visibility datasets".into()));
    }
    for d in datasets {
        d.validate()?;
    }

    let mut omegas: Vec<f64> = Vec::new();
    let mut group_of = Vec::with_capacity(datasets.len());
    for d in datasets {
        let g = match omegas.iter().position(|w| (w - d.omega_e).abs() <= 1e-9 * w.abs()) {
            Some(g) => g,
            None => {
                omegas.push(d.omega_e);
                omegas.len() - 1
            }
        };
        group_of.push(g);
    }

    let mut params = ParamSet::new();
    let b = params.push("b", 1.0_f64.clamp(opts.b_min, opts.b_max), opts.b_min, opts.b_max);
    let sin_phi: Vec<usize> = omegas
        .iter()
        .map(|w| params.push(format!("sin_phi[omega_e={w:e}]"), 0.1, 0.0, 1.0))
        .collect();
    let mut v0 = Vec::new();
    let mut rate = Vec::new();
    for (i, d) in datasets.iter().enumerate() {
        let mut sorted = d.w.clone();
        sorted.sort_by(f64::total_cmp);
        let q90 = sorted[((sorted.len() as f64 - 1.0) * 0.9).round() as usize];
        let span = d.t.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        v0.push(params.push(format!("v0[{i}]"), q90.clamp(0.05, 1.2), 1e-6, 1.2));
        rate.push(params.push(format!("decay_rate[{i}]"), 0.0, 0.0, 1e3 / span));
    }
    let layout = Layout { b, group_of, sin_phi, v0, rate };
    let n_samples: usize = datasets.iter().map(|d| d.t.len()).sum();
    if n_samples <= params.len() {
        return Err(Error::InvalidInput(format!(
            "{n_samples} samples cannot determine {} parameters",
            params.len()
        )));
    }

    let residuals = |x: &[f64]| -> Vec<f64> {
        let mut out = Vec::with_capacity(n_samples);
        for (i, d) in datasets.iter().enumerate() {
            let sp = x[layout.sin_phi[layout.group_of[i]]];
            for k in 0..d.t.len() {
                let m = model_value(base, d.sequence, d.t[k], sp, x[layout.b], x[layout.v0[i]], x[layout.rate[i]]);
                out.push((d.w[k] - m) * d.weight(k));
            }
        }
        out
    };
    let sse = |x: &[f64]| residuals(x).iter().map(|r| r * r).sum::<f64>();

    // Coarse grid over b, choosing the best sin(phi) per group at each b.
    let t_max = datasets
        .iter()
        .flat_map(|d| d.t.iter().cloned())
        .fold(0.0, f64::max);
    let w_max = base.registry.larmor_frequencies().into_iter().fold(0.0, f64::max);
    let b_step = (0.05 / (w_max * t_max).max(1.0)).min((opts.b_max - opts.b_min) / 4.0);
    let n_b = ((opts.b_max - opts.b_min) / b_step).ceil() as usize + 1;
    let sin_grid: Vec<f64> = (0..48).map(|k| 0.005 * (1.1f64).powi(k)).filter(|s| *s <= 1.0).collect();
    let init = params.init().to_vec();
    let group_sse = |g: usize, bv: f64, sp: f64| -> f64 {
        datasets
            .iter()
            .enumerate()
            .filter(|(i, _)| layout.group_of[*i] == g)
            .map(|(i, d)| {
                (0..d.t.len())
                    .map(|k| {
                        let m = model_value(base, d.sequence, d.t[k], sp, bv, init[layout.v0[i]], 0.0);
                        ((d.w[k] - m) * d.weight(k)).powi(2)
                    })
                    .sum::<f64>()
            })
            .sum()
    };
    let mut best = (f64::INFINITY, 1.0, vec![0.1; omegas.len()]);
    for ib in 0..n_b {
        let bv = (opts.b_min + ib as f64 * b_step).min(opts.b_max);
        let mut total = 0.0;
        let mut chosen = Vec::with_capacity(omegas.len());
        for g in 0..omegas.len() {
            let (s_best, c_best) = sin_grid
                .iter()
                .map(|&sp| (sp, group_sse(g, bv, sp)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            total += c_best;
            chosen.push(s_best);
        }
        if total < best.0 {
            best = (total, bv, chosen);
        }
    }
    params.set_init(layout.b, best.1);
    for (g, &idx) in layout.sin_phi.iter().enumerate() {
        params.set_init(idx, best.2[g]);
    }

    // Simplex refinement of the shared parameters.
    let mut shared = ParamSet::new();
    shared.push("b", best.1, opts.b_min, opts.b_max);
    for (g, sp) in best.2.iter().enumerate() {
        shared.push(format!("s{g}"), *sp, 0.0, 1.0);
    }
    let base_x = params.init().to_vec();
    let expand = |y: &[f64]| {
        let mut x = base_x.clone();
        x[layout.b] = y[0];
        for (g, &idx) in layout.sin_phi.iter().enumerate() {
            x[idx] = y[g + 1];
        }
        x
    };
    let mut steps = vec![b_step / 2.0];
    steps.extend(best.2.iter().map(|s| 0.1 * s));
    let (y, _) = nelder_mead(|y| sse(&expand(y)), &shared, &steps, 200 * shared.len(), 1e-10);
    let seeded = expand(&y);
    for (i, v) in seeded.iter().enumerate() {
        params.set_init(i, *v);
    }

    let fit = nlls_solve(residuals, &params, &NllsOptions::default())?;
    let x = &fit.estimates;

    let sin_phi_out = omegas
        .iter()
        .enumerate()
        .map(|(g, w)| SinPhiEstimate {
            omega_e: *w,
            sin_phi: x[layout.sin_phi[g]],
            sigma: fit.sigmas[layout.sin_phi[g]],
        })
        .collect();
    let technical = (0..datasets.len())
        .map(|i| {
            let r = x[layout.rate[i]];
            let rs = fit.sigmas[layout.rate[i]];
            DatasetTechnical {
                v0: x[layout.v0[i]],
                v0_sigma: fit.sigmas[layout.v0[i]],
                tau_d: if r > 0.0 { 1.0 / r } else { f64::INFINITY },
                tau_d_sigma: if r > 0.0 { rs / (r * r) } else { f64::INFINITY },
            }
        })
        .collect();
    let raw_residuals = datasets
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let sp = x[layout.sin_phi[layout.group_of[i]]];
            (0..d.t.len())
                .map(|k| d.w[k] - model_value(base, d.sequence, d.t[k], sp, x[layout.b], x[layout.v0[i]], x[layout.rate[i]]))
                .collect()
        })
        .collect();

    Ok(VisibilityFit {
        sin_phi: sin_phi_out,
        b: x[layout.b],
        b_sigma: fit.sigmas[layout.b],
        technical,
        fit,
        residuals: raw_residuals,
    })
}

/// One-parameter fit of `sin(phi) = sin(phi0) * omega_e0 / omega_e`.
///
/// Points are `(omega_e, sin_phi, sigma)`; pass `sigma = None` for
/// unweighted data. Returns `(sin_phi0, sigma)`.
pub fn fit_sinphi_scaling(points: &[(f64, f64, Option<f64>)], omega_e0: f64) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::InvalidInput("need at least two (omega_e, sin_phi) points".into()));
    }
    if !(omega_e0 > 0.0) || points.iter().any(|p| !(p.0 > 0.0)) {
        return Err(Error::InvalidInput("splittings must be positive".into()));
    }
    let first = points[0].0;
    if points.iter().all(|p| p.0 == first) {
        return Err(Error::Degenerate("all points share one omega_e".into()));
    }
    let mut params = ParamSet::new();
    params.free("sin_phi0", points.iter().map(|p| p.1 * p.0 / omega_e0).sum::<f64>() / points.len() as f64);
    let fit = nlls_solve(
        |q| {
            points
                .iter()
                .map(|&(w, s, sig)| (s - q[0] * omega_e0 / w) / sig.unwrap_or(1.0))
                .collect()
        },
        &params,
        &NllsOptions::default(),
    )?;
    Ok((fit.value("sin_phi0"), fit.sigma("sin_phi0")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EchoDecay {
    pub t2: f64,
    pub t2_sigma: f64,
    pub alpha: f64,
    pub alpha_sigma: f64,
    /// Set when T2 runs into the upper bound of the search (no visible decay).
    pub t2_at_cap: bool,
}

/// Fits `exp(-(tau / T2)^alpha)` to `(tau, W)` samples.
pub fn fit_echo_decay(samples: &[(f64, f64)]) -> Result<EchoDecay> {
    if samples.len() < 4 {
        return Err(Error::InvalidInput("need at least four echo samples".into()));
    }
    let w0 = samples[0].1;
    if samples.iter().all(|s| (s.1 - w0).abs() <= 1e-12 * w0.abs().max(1e-300)) {
        return Err(Error::Degenerate("constant echo signal; T2 diverges".into()));
    }
    let span = samples.iter().map(|s| s.0).fold(0.0, f64::max);
    if !(span > 0.0) {
        return Err(Error::InvalidInput("echo delays must span a positive range".into()));
    }
    // 1/e crossing as the starting T2
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let target = (-1.0f64).exp();
    let t2_init = sorted
        .windows(2)
        .find(|w| w[0].1 >= target && w[1].1 < target)
        .map(|w| w[0].0 + (w[0].1 - target) / (w[0].1 - w[1].1) * (w[1].0 - w[0].0))
        .unwrap_or(span);
    let cap = 1e3 * span;
    let mut params = ParamSet::new();
    params.push("T2", t2_init.max(1e-3 * span), 1e-6 * span, cap);
    params.push("alpha", 2.0, 0.1, 10.0);
    let fit = nlls_solve(
        |q| {
            samples
                .iter()
                .map(|&(tau, w)| w - (-(tau / q[0]).powf(q[1])).exp())
                .collect()
        },
        &params,
        &NllsOptions {
            allow_singular: true,
            ..Default::default()
        },
    )?;
    Ok(EchoDecay {
        t2: fit.value("T2"),
        t2_sigma: fit.sigma("T2"),
        alpha: fit.value("alpha"),
        alpha_sigma: fit.sigma("alpha"),
        t2_at_cap: fit.is_pinned("T2") && fit.value("T2") >= cap * (1.0 - 1e-9),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct T2Scaling {
    pub coefficient: f64,
    pub coefficient_sigma: f64,
    pub offset: f64,
    pub offset_sigma: f64,
}

impl T2Scaling {
    pub fn predict(&self, omega_e: f64, omega_e0: f64, alpha_bar: f64) -> f64 {
        self.coefficient * (omega_e / omega_e0).powf(2.0 / alpha_bar) + self.offset
    }
}

/// Fits `T2(w) = coefficient * (w / w0)^(2 / alpha_bar) + offset`.
///
/// Points are `(omega_e, T2, sigma)`.
pub fn fit_t2_scaling(points: &[(f64, f64, Option<f64>)], omega_e0: f64, alpha_bar: f64) -> Result<T2Scaling> {
    if points.len() < 2 {
        return Err(Error::InvalidInput("need at least two (omega_e, T2) points".into()));
    }
    if !(alpha_bar > 0.0) || !(omega_e0 > 0.0) {
        return Err(Error::InvalidInput("alpha_bar and omega_e0 must be positive".into()));
    }
    let first = points[0].0;
    if points.iter().all(|p| p.0 == first) {
        return Err(Error::Degenerate("all points share one omega_e".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| (p.0 / omega_e0).powf(2.0 / alpha_bar)).collect();
    let mut params = ParamSet::new();
    params.free("coefficient", points[0].1 * 0.5);
    params.free("offset", points[0].1 * 0.5);
    let fit = nlls_solve(
        |q| {
            points
                .iter()
                .zip(&xs)
                .map(|(p, x)| (p.1 - q[0] * x - q[1]) / p.2.unwrap_or(1.0))
                .collect()
        },
        &params,
        &NllsOptions {
            allow_singular: false,
            ..Default::default()
        },
    )?;
    Ok(T2Scaling {
        coefficient: fit.value("coefficient"),
        coefficient_sigma: fit.sigma("coefficient"),
        offset: fit.value("offset"),
        offset_sigma: fit.sigma("offset"),
    })
}
