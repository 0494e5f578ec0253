//! Least-squares fitting of spectra and time traces.

pub mod nlls;
pub mod spectra;
pub mod traces;

pub use nlls::{nelder_mead, nlls_solve, FitResult, NllsOptions, ParamSet};
pub use spectra::{
    fit_gaussian, fit_gaussian_fixed_center, knight_from_differences, knight_shift_analysis, ElectronState,
    KnightResult, KnightSpectra, LockedProfile, SidebandSpectrum,
};
pub use traces::{
    counts_to_population, fit_background_gamma1, fit_damped_sine, fit_magnon_rabi, MagnonRabiFit, Population,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Abscissa, ordinate and optional per-point 1-sigma.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Samples {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub sigma: Option<Vec<f64>>,
}

impl Samples {
    pub fn new(x: Vec<f64>, y: Vec<f64>, sigma: Option<Vec<f64>>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::InvalidInput(format!("{} x values but {} y values", x.len(), y.len())));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite sample".into()));
        }
        if let Some(s) = &sigma {
            if s.len() != x.len() {
                return Err(Error::InvalidInput("sigma length mismatch".into()));
            }
            if s.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::InvalidInput("sigma must be positive and finite".into()));
            }
        }
        Ok(Self { x, y, sigma })
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        Self::new(pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1).collect(), None)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.sigma.as_ref().map_or(1.0, |s| 1.0 / s[i])
    }

    /// Weighted residuals `(model(x) - y) / sigma`.
    pub(crate) fn residuals(&self, model: impl Fn(f64) -> f64) -> Vec<f64> {
        (0..self.len())
            .map(|i| (model(self.x[i]) - self.y[i]) * self.weight(i))
            .collect()
    }

    pub(crate) fn span(&self) -> f64 {
        let lo = self.x.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    }
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
