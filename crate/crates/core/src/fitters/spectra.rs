//! Sideband peak fitting and Knight-shift extraction.

use serde::{Deserialize, Serialize};

use super::nlls::{nlls_solve, FitResult, NllsOptions, ParamSet};
use super::{median, Samples};
use crate::error::{Error, Result};

const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

fn gaussian(x: f64, center: f64, width: f64, amplitude: f64, background: f64) -> f64 {
    background + amplitude * (-0.5 * ((x - center) / width).powi(2)).exp()
}

/// FWHM from the half-maximum crossings around the highest sample.
fn fwhm_guess(samples: &Samples, peak: usize, background: f64) -> Option<f64> {
    let half = background + 0.5 * (samples.y[peak] - background);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples.x[a].total_cmp(&samples.x[b]));
    let pos = order.iter().position(|&i| i == peak)?;
    let left = order[..pos].iter().rev().find(|&&i| samples.y[i] < half)?;
    let right = order[pos + 1..].iter().find(|&&i| samples.y[i] < half)?;
    Some(samples.x[*right] - samples.x[*left])
}

fn gaussian_fit(samples: &Samples, fixed_center: Option<f64>) -> Result<FitResult> {
    if samples.len() < 5 {
        return Err(Error::InvalidInput(format!("need at least 5 samples, got {}", samples.len())));
    }
    let span = samples.span();
    if !(span > 0.0) {
        return Err(Error::InvalidInput("samples share a single abscissa".into()));
    }
    let lo = samples.x.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = lo + span;
    let background = median(&samples.y);
    let peak = (0..samples.len())
        .max_by(|&a, &b| samples.y[a].total_cmp(&samples.y[b]))
        .expect("nonempty");
    let width = fwhm_guess(samples, peak, background)
        .map(|f| f / FWHM_PER_SIGMA)
        .unwrap_or(span / 10.0)
        .clamp(span * 1e-4, span);

    let mut params = ParamSet::new();
    let i_center = match fixed_center {
        None => Some(params.push("center", samples.x[peak], lo, hi)),
        Some(_) => None,
    };
    let i_width = params.push("width", width, span * 1e-5, 2.0 * span);
    let i_amp = params.free("amplitude", samples.y[peak] - background);
    let i_bg = params.free("background", background);
    let opts = NllsOptions { allow_singular: true, ..NllsOptions::default() };
    let mut fit = nlls_solve(
        |p| {
            let c = i_center.map_or_else(|| fixed_center.unwrap(), |i| p[i]);
            samples.residuals(|x| gaussian(x, c, p[i_width], p[i_amp], p[i_bg]))
        },
        &params,
        &opts,
    )?;
    let (amp, amp_sigma) = (fit.estimates[i_amp], fit.sigmas[i_amp]);
    if !(amp.abs() > 2.0 * amp_sigma) || !amp_sigma.is_finite() {
        fit.warnings.push("peak amplitude consistent with zero".into());
    }
    Ok(fit)
}

/// Gaussian peak plus constant background.
///
/// Parameters: `center`, `width` (standard deviation), `amplitude`, `background`.
/// A flat spectrum is not an error; its amplitude comes back consistent with
/// zero and the result carries a warning.
pub fn fit_gaussian(samples: &Samples) -> Result<FitResult> {
    gaussian_fit(samples, None)
}

/// As [`fit_gaussian`] with the center held at `center`.
pub fn fit_gaussian_fixed_center(samples: &Samples, center: f64) -> Result<FitResult> {
    gaussian_fit(samples, Some(center))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElectronState {
    Up,
    Down,
}

/// Counts on a detuning by drive-time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidebandSpectrum {
    pub detuning: Vec<f64>,
    pub times: Vec<f64>,
    /// Row-major: `counts[i * times.len() + k]`.
    pub counts: Vec<f64>,
    pub state: ElectronState,
}

impl SidebandSpectrum {
    pub fn new(detuning: Vec<f64>, times: Vec<f64>, counts: Vec<f64>, state: ElectronState) -> Result<Self> {
        if detuning.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("detuning grid must be strictly increasing".into()));
        }
        if times.is_empty() || counts.len() != detuning.len() * times.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} x {} counts, got {}",
                detuning.len(),
                times.len(),
                counts.len()
            )));
        }
        if counts.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return Err(Error::InvalidInput("counts must be finite and nonnegative".into()));
        }
        Ok(Self { detuning, times, counts, state })
    }

    /// Single-time spectrum.
    pub fn from_profile(detuning: Vec<f64>, counts: Vec<f64>, state: ElectronState) -> Result<Self> {
        Self::new(detuning, vec![0.0], counts, state)
    }

    pub fn time_summed(&self) -> Samples {
        let n_t = self.times.len();
        let y = self.counts.chunks(n_t).map(|row| row.iter().sum()).collect();
        Samples { x: self.detuning.clone(), y, sigma: None }
    }

    pub fn at_time(&self, k: usize) -> Samples {
        let n_t = self.times.len();
        let y = (0..self.detuning.len()).map(|i| self.counts[i * n_t + k]).collect();
        Samples { x: self.detuning.clone(), y, sigma: None }
    }

    /// Fits the time-summed peak, then every time slice with the center
    /// locked to that value.
    pub fn locked_profile(&self) -> Result<LockedProfile> {
        let summed = fit_gaussian(&self.time_summed())?;
        let center = summed.value("center");
        let slices = (0..self.times.len())
            .map(|k| fit_gaussian_fixed_center(&self.at_time(k), center))
            .collect::<Result<Vec<_>>>()?;
        Ok(LockedProfile {
            center,
            center_sigma: summed.sigma("center"),
            times: self.times.clone(),
            amplitude: slices.iter().map(|f| f.value("amplitude")).collect(),
            amplitude_sigma: slices.iter().map(|f| f.sigma("amplitude")).collect(),
        })
    }
}

/// Peak amplitude versus drive time at a fixed sideband frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LockedProfile {
    pub center: f64,
    pub center_sigma: f64,
    pub times: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub amplitude_sigma: Vec<f64>,
}

/// Negative and positive sidebands measured with the electron prepared up and down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnightSpectra {
    pub negative_up: SidebandSpectrum,
    pub negative_down: SidebandSpectrum,
    pub positive_up: SidebandSpectrum,
    pub positive_down: SidebandSpectrum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnightResult {
    /// Single-nucleus hyperfine constant, Hz.
    pub a_single: f64,
    pub a_sigma: f64,
    pub n_species: f64,
    pub n_species_sigma: f64,
    pub n_total: f64,
    pub n_total_sigma: f64,
    /// Up/down center difference on the negative then positive sideband, with 1-sigma.
    pub differences: [(f64, f64); 2],
    pub warnings: Vec<String>,
}

/// Knight-shift chain from the two sideband splittings.
///
/// The two splittings share systematic calibration, so their sigmas are
/// averaged rather than combined in quadrature.
pub fn knight_from_differences(negative: (f64, f64), positive: (f64, f64), hyperfine_a: f64) -> Result<KnightResult> {
    if !(hyperfine_a > 0.0) {
        return Err(Error::InvalidInput("ensemble hyperfine constant must be positive".into()));
    }
    for (d, s) in [negative, positive] {
        if !d.is_finite() || !(s >= 0.0) {
            return Err(Error::InvalidInput("differences must be finite with nonnegative sigma".into()));
        }
    }
    let mut warnings = Vec::new();
    let gap = (negative.0 - positive.0).abs();
    let joint = negative.1.hypot(positive.1);
    if gap > 2.0 * joint {
        warnings.push(format!(
            "sideband splittings disagree: {:.4e} vs {:.4e} Hz (> 2 sigma)",
            negative.0, positive.0
        ));
    }
    let a = 0.5 * (negative.0 + positive.0);
    let a_sigma = 0.5 * (negative.1 + positive.1);
    let (n, n_sigma) = if a == 0.0 {
        warnings.push("no Knight splitting resolved; nucleus count unbounded".into());
        (f64::INFINITY, f64::INFINITY)
    } else {
        if a < 0.0 {
            warnings.push("Knight splitting has the wrong sign".into());
        }
        let n = hyperfine_a / a;
        (n, (n * a_sigma / a).abs())
    };
    Ok(KnightResult {
        a_single: a,
        a_sigma,
        n_species: n,
        n_species_sigma: n_sigma,
        n_total: 2.0 * n,
        n_total_sigma: 2.0 * n_sigma,
        differences: [negative, positive],
        warnings,
    })
}

/// Fits all four time-summed sideband spectra and runs the Knight-shift chain.
///
/// Splittings are `down - up` on the negative sideband and `up - down` on the
/// positive one, so both are positive for a positive hyperfine constant.
pub fn knight_shift_analysis(spectra: &KnightSpectra, hyperfine_a: f64) -> Result<KnightResult> {
    let expect = [
        (&spectra.negative_up, ElectronState::Up),
        (&spectra.negative_down, ElectronState::Down),
        (&spectra.positive_up, ElectronState::Up),
        (&spectra.positive_down, ElectronState::Down),
    ];
    for (s, state) in expect {
        if s.state != state {
            return Err(Error::InvalidInput("spectrum electron-state tags do not match their slots".into()));
        }
    }
    let center = |s: &SidebandSpectrum| -> Result<(FitResult, f64, f64)> {
        let f = fit_gaussian(&s.time_summed())?;
        let (c, e) = (f.value("center"), f.sigma("center"));
        Ok((f, c, e))
    };
    let (f_nu, nu, nu_s) = center(&spectra.negative_up)?;
    let (f_nd, nd, nd_s) = center(&spectra.negative_down)?;
    let (f_pu, pu, pu_s) = center(&spectra.positive_up)?;
    let (f_pd, pd, pd_s) = center(&spectra.positive_down)?;
    let mut out = knight_from_differences((nd - nu, nd_s.hypot(nu_s)), (pu - pd, pu_s.hypot(pd_s)), hyperfine_a)?;
    for (tag, f) in [("negative/up", &f_nu), ("negative/down", &f_nd), ("positive/up", &f_pu), ("positive/down", &f_pd)] {
        out.warnings.extend(f.warnings.iter().map(|w| format!("{tag}: {w}")));
    }
    Ok(out)
}
