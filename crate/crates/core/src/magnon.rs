//! Magnon Rabi rates and driven sideband dynamics.
//!
//! The exchange between the electron and one collective nuclear excitation
//! is modeled as a damped two-level system
//!
//! ```text
//! d rho/dt = -i[H0, rho] + D[sqrt(g1) S+] rho + D[sqrt(g1) S-] rho + D[sqrt(G) Sz] rho
//! H0 = pi [[Delta, W_mag], [W_mag, -Delta]]
//! ```
//!
//! with ordinary frequencies, so the undamped population period is `1 / W_mag`.
//! Inhomogeneous Overhauser fluctuations are handled by averaging over a
//! truncated normal distribution of extra detunings.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix4, Vector4};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::FrameGeometry;
use crate::ode::{dopri5, Tolerances};
use crate::species::SpeciesRegistry;

/// Root-mean-square transverse collective spin, `sqrt(<I^2 - M^2>) = sqrt(5N/2)`.
pub fn rms_enhancement(n: f64) -> f64 {
    (2.5 * n).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnhancementEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Monte Carlo estimate of `sqrt(<I^2 - M^2>)`.
///
/// Each collective component is Gaussian with variance `5N/4`, so the total
/// spin `I` is chi-distributed with three degrees of freedom, and `M` is
/// uniform on `[-I, I]`. Deterministic for a given seed.
pub fn monte_carlo_enhancement(n: f64, samples: usize, seed: u64) -> Result<EnhancementEstimate> {
    if samples < 1000 {
        return Err(Error::InvalidInput(format!("need at least 1000 samples, got {samples}")));
    }
    if !(n >= 1.0) {
        return Err(Error::InvalidInput("N must be at least 1".into()));
    }
    let normal = Normal::new(0.0, (1.25 * n).sqrt()).expect("positive variance");
    let unit = Uniform::new_inclusive(-1.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let (x, y, z): (f64, f64, f64) = (normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
        let i2 = x * x + y * y + z * z;
        let u: f64 = unit.sample(&mut rng);
        let v = i2 * (1.0 - u * u);
        sum += v;
        sum_sq += v * v;
    }
    let k = samples as f64;
    let mean = sum / k;
    let var = (sum_sq / k - mean * mean).max(0.0) * k / (k - 1.0);
    let value = mean.sqrt();
    Ok(EnhancementEstimate {
        value,
        std_error: (var / k).sqrt() / (2.0 * value),
    })
}

/// RMS magnon Rabi rate for a resonantly driven sideband, `a_nc W / (2 w_n) sqrt(5N/2)`.
pub fn magnon_rabi_rate(a_nc: f64, omega_rabi: f64, omega_n: f64, n_species: f64) -> Result<f64> {
    if !(omega_n > 0.0) {
        return Err(Error::InvalidInput(format!("nuclear Larmor frequency must be positive, got {omega_n}")));
    }
    if !(n_species >= 0.0) {
        return Err(Error::InvalidInput("species count must be non-negative".into()));
    }
    Ok(a_nc * omega_rabi / (2.0 * omega_n) * rms_enhancement(n_species))
}

/// Bare electron drive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveConfig {
    pub omega_rabi: f64,
    pub two_photon_detuning: f64,
}

impl DriveConfig {
    /// Stueckelberg angle with `tan(2 theta) = -W / delta`.
    pub fn stueckelberg_theta(&self) -> f64 {
        0.5 * (-self.omega_rabi).atan2(self.two_photon_detuning)
    }

    pub fn effective_rabi(&self) -> f64 {
        self.omega_rabi.hypot(self.two_photon_detuning)
    }
}

/// Exchange rate from the dressed-state matrix element at finite detuning,
/// `2 (1 + W^2/d^2)^(-1/2) a_nc W / (4 |d|) * enhancement`.
pub fn detuned_exchange_rate(a_nc: f64, drive: &DriveConfig, enhancement: f64) -> Result<f64> {
    let d = drive.two_photon_detuning;
    if d == 0.0 {
        return Err(Error::InvalidInput(
            "exchange matrix element undefined at zero detuning; use the resonant model".into(),
        ));
    }
    let w = drive.omega_rabi;
    let dressing = (1.0 + (w / d).powi(2)).sqrt().recip();
    Ok(2.0 * dressing * a_nc * w / (4.0 * d.abs()) * enhancement)
}

/// 2x2 density matrix in the basis (ground, excited).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityMatrix2(pub Matrix2<Complex64>);

impl DensityMatrix2 {
    pub fn ground() -> Self {
        Self(Matrix2::new(
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 0.0),
        ))
    }

    pub fn excited() -> Self {
        Self(Matrix2::new(
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(1.0, 0.0),
        ))
    }

    pub fn from_populations(p_ground: f64, p_excited: f64, coherence: Complex64) -> Result<Self> {
        let rho = Self(Matrix2::new(
            Complex64::new(p_ground, 0.0),
            coherence,
            coherence.conj(),
            Complex64::new(p_excited, 0.0),
        ));
        rho.validate()?;
        Ok(rho)
    }

    pub fn trace(&self) -> f64 {
        (self.0[(0, 0)] + self.0[(1, 1)]).re
    }

    pub fn excited_population(&self) -> f64 {
        self.0[(1, 1)].re
    }

    pub fn hermiticity_error(&self) -> f64 {
        (self.0 - self.0.adjoint()).iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// Smaller eigenvalue of the Hermitian part.
    pub fn min_eigenvalue(&self) -> f64 {
        let a = self.0[(0, 0)].re;
        let d = self.0[(1, 1)].re;
        let b = self.0[(0, 1)].norm();
        0.5 * (a + d) - (0.25 * (a - d).powi(2) + b * b).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hermiticity_error() > 1e-12 {
            return Err(Error::InvalidInput("density matrix not Hermitian".into()));
        }
        if (self.trace() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("density matrix trace {} != 1", self.trace())));
        }
        if self.min_eigenvalue() < -1e-9 {
            return Err(Error::InvalidInput("density matrix not positive".into()));
        }
        Ok(())
    }

    fn to_state(self) -> [f64; 4] {
        [self.0[(0, 0)].re, self.0[(1, 1)].re, self.0[(0, 1)].re, self.0[(0, 1)].im]
    }

    fn from_state(s: &[f64; 4]) -> Self {
        let c = Complex64::new(s[2], s[3]);
        Self(Matrix2::new(
            Complex64::new(s[0], 0.0),
            c,
            c.conj(),
            Complex64::new(s[1], 0.0),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LindbladParams {
    /// Exchange Rabi frequency, Hz.
    pub omega_mag: f64,
    /// Drive detuning from the resonance, Hz.
    pub delta: f64,
    /// Spin-flip rate, 1/s.
    pub gamma1: f64,
    /// Dephasing rate, 1/s.
    pub gamma_dephasing: f64,
}

impl LindbladParams {
    fn validate(&self) -> Result<()> {
        if !(self.gamma1 >= 0.0) || !(self.gamma_dephasing >= 0.0) {
            return Err(Error::InvalidInput("rates must be non-negative".into()));
        }
        if !self.omega_mag.is_finite() || !self.delta.is_finite() {
            return Err(Error::InvalidInput("non-finite frequency".into()));
        }
        Ok(())
    }
}

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

/// Right-hand side of the master equation, written with explicit operators.
fn lindblad_rhs(rho: &Matrix2<Complex64>, p: &LindbladParams) -> Matrix2<Complex64> {
    let i = Complex64::new(0.0, 1.0);
    let h = Matrix2::new(c(PI * p.delta), c(PI * p.omega_mag), c(PI * p.omega_mag), c(-PI * p.delta));
    let s_plus = Matrix2::new(c(0.0), c(1.0), c(0.0), c(0.0));
    let s_minus = s_plus.adjoint();
    let s_z = Matrix2::new(c(0.5), c(0.0), c(0.0), c(-0.5));
    let dissipate = |op: Matrix2<Complex64>, rate: f64| {
        let od = op.adjoint();
        let odo = od * op;
        (op * rho * od - (odo * rho + rho * odo) * c(0.5)) * c(rate)
    };
    -(h * rho - rho * h) * i
        + dissipate(s_plus, p.gamma1)
        + dissipate(s_minus, p.gamma1)
        + dissipate(s_z, p.gamma_dephasing)
}

/// Integrates the master equation and returns `rho` at each of `times`
/// (seconds, nondecreasing, measured from the preparation of `rho0`).
pub fn evolve_lindblad(rho0: &DensityMatrix2, params: &LindbladParams, times: &[f64]) -> Result<Vec<DensityMatrix2>> {
    rho0.validate()?;
    params.validate()?;
    let states = dopri5(
        |_, s: &[f64; 4]| DensityMatrix2(lindblad_rhs(&DensityMatrix2::from_state(s).0, params)).to_state(),
        0.0,
        rho0.to_state(),
        times,
        Tolerances::default(),
    )?;
    Ok(states.iter().map(DensityMatrix2::from_state).collect())
}

/// Real 4x4 generator of the master equation on `[rho00, rho11, Re rho01, Im rho01]`,
/// assembled column by column from the same right-hand side the integrator uses.
pub fn bloch_generator(params: &LindbladParams) -> Matrix4<f64> {
    let mut g = Matrix4::zeros();
    for j in 0..4 {
        let mut e = [0.0; 4];
        e[j] = 1.0;
        let col = DensityMatrix2(lindblad_rhs(&DensityMatrix2::from_state(&e).0, params)).to_state();
        for i in 0..4 {
            g[(i, j)] = col[i];
        }
    }
    g
}

/// Exact evolution for the time-independent generator via its matrix
/// exponential. Propagators are reused across equal time steps, so uniform
/// grids cost one exponential.
pub fn propagate_lindblad(rho0: &DensityMatrix2, params: &LindbladParams, times: &[f64]) -> Result<Vec<DensityMatrix2>> {
    rho0.validate()?;
    params.validate()?;
    if times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|t| *t < 0.0) {
        return Err(Error::InvalidInput("output times must be nonnegative and nondecreasing".into()));
    }
    let gen = bloch_generator(params);
    let mut state = Vector4::from(rho0.to_state());
    let mut last_t = 0.0;
    let mut cached: Option<(f64, Matrix4<f64>)> = None;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let dt = t - last_t;
        if dt > 0.0 {
            let step = match cached {
                Some((h, m)) if (h - dt).abs() <= 1e-12 * dt => m,
                _ => {
                    let m = (gen * dt).exp();
                    cached = Some((dt, m));
                    m
                }
            };
            state = step * state;
            last_t = t;
        }
        out.push(DensityMatrix2::from_state(&[state[0], state[1], state[2], state[3]]));
    }
    Ok(out)
}

pub fn excited_population_trace(rho0: &DensityMatrix2, params: &LindbladParams, times: &[f64]) -> Result<Vec<f64>> {
    Ok(evolve_lindblad(rho0, params, times)?
        .iter()
        .map(DensityMatrix2::excited_population)
        .collect())
}

/// Quasi-static Overhauser spread sampled on a symmetric sigma grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpread {
    pub t2_star: f64,
    pub sigma_grid: Vec<f64>,
    pub weights: Vec<f64>,
}

pub const DEFAULT_SIGMA_POINTS: usize = 41;

impl EnsembleSpread {
    /// `points` uniformly spaced sigma values on [-2, 2] with normalized
    /// standard-normal weights. `t2_star = f64::INFINITY` gives no spread.
    pub fn new(t2_star: f64, points: usize) -> Result<Self> {
        if !(t2_star > 0.0) {
            return Err(Error::InvalidInput("T2* must be positive".into()));
        }
        if points == 0 {
            return Err(Error::InvalidInput("sigma grid must not be empty".into()));
        }
        let sigma_grid: Vec<f64> = if points == 1 {
            vec![0.0]
        } else {
            (0..points)
                .map(|k| -2.0 + 4.0 * k as f64 / (points - 1) as f64)
                .collect()
        };
        // Trapezoid end weights keep grid refinement second order.
        let last = points - 1;
        let raw: Vec<f64> = sigma_grid
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let end = if points > 1 && (k == 0 || k == last) { 0.5 } else { 1.0 };
                end * (-0.5 * s * s).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        Ok(Self {
            t2_star,
            sigma_grid,
            weights: raw.iter().map(|w| w / total).collect(),
        })
    }

    pub fn with_default_grid(t2_star: f64) -> Result<Self> {
        Self::new(t2_star, DEFAULT_SIGMA_POINTS)
    }

    /// Overhauser detuning for grid value `sigma`, `sigma sqrt(2) / (2 pi T2*)`.
    pub fn detuning(&self, sigma: f64) -> f64 {
        sigma * std::f64::consts::SQRT_2 / (2.0 * PI * self.t2_star)
    }

    /// Standard deviation of the Overhauser detuning, Hz.
    pub fn detuning_std(&self) -> f64 {
        self.detuning(1.0)
    }
}

/// Excited population from the ground state, averaged over the Overhauser spread.
///
/// Members are propagated exactly with [`propagate_lindblad`].
pub fn ensemble_average_evolution(params: &LindbladParams, spread: &EnsembleSpread, times: &[f64]) -> Result<Vec<f64>> {
    let traces: Vec<Result<Vec<f64>>> = spread
        .sigma_grid
        .par_iter()
        .map(|&s| {
            let p = LindbladParams {
                delta: params.delta + spread.detuning(s),
                ..*params
            };
            propagate_lindblad(&DensityMatrix2::ground(), &p, times)
                .map(|v| v.iter().map(DensityMatrix2::excited_population).collect())
        })
        .collect();
    let mut avg = vec![0.0; times.len()];
    for (trace, w) in traces.into_iter().zip(&spread.weights) {
        for (a, v) in avg.iter_mut().zip(trace?) {
            *a += w * v;
        }
    }
    Ok(avg)
}

/// One resonance of the spectrum: the carrier (center 0) or a magnon sideband.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resonance {
    pub label: String,
    pub center: f64,
    pub omega_mag: f64,
    pub gamma1: f64,
    pub gamma_dephasing: f64,
}

impl Resonance {
    /// Rabi (power) width plus inhomogeneous FWHM plus homogeneous width, Hz.
    pub fn linewidth(&self, spread: &EnsembleSpread) -> f64 {
        let inhomogeneous = 2.0 * (2.0 * 2f64.ln()).sqrt() * spread.detuning_std();
        self.omega_mag.abs() + inhomogeneous + (2.0 * self.gamma1 + 0.5 * self.gamma_dephasing) / (2.0 * PI)
    }

    fn params_at(&self, drive_detuning: f64) -> LindbladParams {
        LindbladParams {
            omega_mag: self.omega_mag,
            delta: drive_detuning - self.center,
            gamma1: self.gamma1,
            gamma_dephasing: self.gamma_dephasing,
        }
    }
}

/// Incoherent spin-flip background `0.5 (1 - exp(-2 g1 t))`.
pub fn spin_flip_background(gamma1: f64, t: f64) -> f64 {
    0.5 * (1.0 - (-2.0 * gamma1 * t).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidebandMap {
    pub deltas: Vec<f64>,
    pub times: Vec<f64>,
    /// Row-major: `population[i * times.len() + k]` at `deltas[i]`, `times[k]`.
    pub population: Vec<f64>,
    pub resonances: Vec<Resonance>,
    pub warnings: Vec<String>,
}

impl SidebandMap {
    pub fn at(&self, i_delta: usize, i_time: usize) -> f64 {
        self.population[i_delta * self.times.len() + i_time]
    }
}

/// Detunings further than this many linewidths from a resonance contribute
/// only their spin-flip background.
const FAR_DETUNING_LINEWIDTHS: f64 = 50.0;

/// Spin-down population map over drive detuning and drive time.
///
/// Each resonance responds as an independent two-level system centered at
/// its own frequency; the map is the spin-flip background of the first
/// resonance plus every resonance's coherent excess over its own background.
pub fn simulate_sideband_spectrum(
    deltas: &[f64],
    times: &[f64],
    resonances: &[Resonance],
    spread: &EnsembleSpread,
) -> Result<SidebandMap> {
    if deltas.is_empty() || times.is_empty() {
        return Err(Error::InvalidInput("detuning and time grids must be nonempty".into()));
    }
    if resonances.is_empty() {
        return Err(Error::InvalidInput("at least one resonance required".into()));
    }
    let mut warnings = Vec::new();
    let mut by_center: Vec<&Resonance> = resonances.iter().collect();
    by_center.sort_by(|a, b| a.center.total_cmp(&b.center));
    for pair in by_center.windows(2) {
        let gap = pair[1].center - pair[0].center;
        let width = pair[0].linewidth(spread).max(pair[1].linewidth(spread));
        if gap < 5.0 * width {
            warnings.push(format!(
                "resonances {} and {} overlap: spacing {:.4e} Hz < 5 linewidths ({:.4e} Hz)",
                pair[0].label, pair[1].label, gap, width
            ));
        }
    }

    let background = |r: &Resonance| -> Vec<f64> { times.iter().map(|t| spin_flip_background(r.gamma1, *t)).collect() };
    let rows: Vec<Result<Vec<f64>>> = deltas
        .par_iter()
        .map(|&d| {
            let mut row = background(&resonances[0]);
            for r in resonances {
                if (d - r.center).abs() > FAR_DETUNING_LINEWIDTHS * r.linewidth(spread) {
                    continue;
                }
                let resp = ensemble_average_evolution(&r.params_at(d), spread, times)?;
                for (k, v) in row.iter_mut().enumerate() {
                    *v += resp[k] - spin_flip_background(r.gamma1, times[k]);
                }
            }
            Ok(row)
        })
        .collect();
    let mut population = Vec::with_capacity(deltas.len() * times.len());
    for row in rows {
        population.extend(row?);
    }
    Ok(SidebandMap {
        deltas: deltas.to_vec(),
        times: times.to_vec(),
        population,
        resonances: resonances.to_vec(),
        warnings,
    })
}

/// Carrier plus positive and negative magnon sidebands of every species.
///
/// Single-nucleus constants follow from the ensemble: `a_j = 2 A_j / N` with
/// `N_j = c_j N / 2` nuclei of species `j`.
pub fn species_resonances(
    registry: &SpeciesRegistry,
    frame: &FrameGeometry,
    n_total: f64,
    omega_rabi: f64,
    gamma1: f64,
    gamma_dephasing: f64,
) -> Result<Vec<Resonance>> {
    let mut out = vec![Resonance {
        label: "carrier".into(),
        center: 0.0,
        omega_mag: omega_rabi,
        gamma1,
        gamma_dephasing,
    }];
    for (s, w) in registry.species().iter().zip(registry.larmor_frequencies()) {
        let a = 2.0 * s.hyperfine_a / n_total;
        let n_j = s.abundance_c * n_total / 2.0;
        let rate = magnon_rabi_rate(a * frame.sin_phi, omega_rabi, w, n_j)?;
        for (sign, tag) in [(-1.0, "-"), (1.0, "+")] {
            out.push(Resonance {
                label: format!("{}{}", s.name, tag),
                center: sign * w,
                omega_mag: rate,
                gamma1,
                gamma_dephasing,
            });
        }
    }
    Ok(out)
}
