use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::{json, Value};

use super::{stem, Emitter, KnightArgs, MagnonArgs, RunConfig};
use crate::coherence::{
    fit_echo_decay, fit_t2_scaling, fit_visibility as fit_visibility_traces, visibility_fit_model, TechnicalParams,
    VisibilityFitOptions, VisibilityModel,
};
use crate::error::{Error, Result};
use crate::fitters::{
    counts_to_population, fit_background_gamma1, fit_damped_sine, fit_magnon_rabi, knight_from_differences,
    knight_shift_analysis, ElectronState, FitResult, KnightSpectra, Samples,
};
use crate::frames::{make_frame, overhauser_for_target, FrameGeometry};
use crate::io;
use crate::magnon::{
    ensemble_average_evolution, magnon_rabi_rate, simulate_sideband_spectrum, species_resonances, spin_flip_background,
    EnsembleSpread, LindbladParams,
};

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
    }
}

fn time_grid(cfg: &RunConfig) -> Result<Vec<f64>> {
    if cfg.n_times == 0 {
        return Err(Error::InvalidInput("time grid is empty (n_times = 0)".into()));
    }
    if !(cfg.t_max_s > 0.0) {
        return Err(Error::InvalidInput("t_max_s must be positive".into()));
    }
    Ok(linspace(0.0, cfg.t_max_s, cfg.n_times))
}

fn frame_at(cfg: &RunConfig, omega_e: f64) -> Result<FrameGeometry> {
    let phi0 = cfg.phi0()?;
    let d = overhauser_for_target(omega_e, cfg.omega_e0_hz, phi0)?;
    make_frame(cfg.omega_e0_hz, phi0, d)
}

fn driven_larmor(cfg: &RunConfig) -> Result<(f64, f64)> {
    let reg = cfg.registry()?;
    let s = reg
        .get(&cfg.species)
        .ok_or_else(|| Error::InvalidInput(format!("species {} not in registry", cfg.species)))?;
    Ok((s.larmor(reg.field_t())?, s.hyperfine_a))
}

fn fit_value(fit: &FitResult) -> Result<Value> {
    Ok(serde_json::from_str(&fit.to_json()?)?)
}

struct Noise {
    rng: ChaCha8Rng,
    dist: Option<Normal<f64>>,
}

impl Noise {
    fn new(cfg: &RunConfig) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            dist: (cfg.noise > 0.0).then(|| Normal::new(0.0, cfg.noise).expect("finite sd")),
        }
    }

    /// Adds noise in place and returns the row layout `(x, y[, sigma])`.
    fn rows(&mut self, x: &[f64], y: &[f64]) -> Vec<Vec<f64>> {
        x.iter()
            .zip(y)
            .map(|(&a, &b)| match &self.dist {
                Some(d) => vec![a, b + d.sample(&mut self.rng), d.std_dev()],
                None => vec![a, b],
            })
            .collect()
    }

    fn headers<'h>(&self, x: &'h str, y: &'h str) -> Vec<&'h str> {
        if self.dist.is_some() {
            vec![x, y, "sigma"]
        } else {
            vec![x, y]
        }
    }
}

fn summary(command: &str, em: &Emitter, result: Value) -> Value {
    json!({
        "command": command,
        "outputs": em.written.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "result": result,
    })
}

pub(super) fn predict_omega_mag(cfg: &RunConfig) -> Result<Value> {
    let (omega_n, _) = driven_larmor(cfg)?;
    let mut rows = Vec::new();
    for &w in &cfg.omega_e_hz {
        let f = frame_at(cfg, w)?;
        let a_nc = cfg.a_single_hz * f.sin_phi;
        let rate = magnon_rabi_rate(a_nc, cfg.omega_rabi_hz, omega_n, cfg.n_species)?;
        rows.push(vec![f.omega_e, f.sin_phi, a_nc, rate]);
    }
    // One-parameter fit of omega_mag = omega_mag0 * (omega_e0 / omega_e).
    let scaling = (rows.len() >= 2).then(|| {
        let xs: Vec<f64> = rows.iter().map(|r| cfg.omega_e0_hz / r[0]).collect();
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        let sxy: f64 = xs.iter().zip(&rows).map(|(x, r)| x * r[3]).sum();
        let k = sxy / sxx;
        let rss: f64 = xs.iter().zip(&rows).map(|(x, r)| (r[3] - k * x).powi(2)).sum();
        let sigma = (rss / (rows.len() - 1) as f64 / sxx).sqrt();
        json!({ "omega_mag0_hz": k, "omega_mag0_sigma_hz": sigma })
    });
    let details = json!({ "larmor_hz": omega_n, "scaling_fit": scaling });
    let mut em = Emitter::new("predict-omega-mag", cfg)?;
    em.csv(
        "predict_omega_mag.csv",
        &["omega_e_hz", "sin_phi", "a_nc_hz", "omega_mag_hz"],
        &rows,
        details.clone(),
    )?;
    let table: Vec<Value> = rows
        .iter()
        .map(|r| json!({ "omega_e_hz": r[0], "sin_phi": r[1], "a_nc_hz": r[2], "omega_mag_hz": r[3] }))
        .collect();
    let result = json!({ "rows": table, "scaling_fit": scaling, "larmor_hz": omega_n });
    em.json("predict_omega_mag.json", &result)?;
    Ok(summary("predict-omega-mag", &em, result))
}

pub(super) fn simulate_visibility(cfg: &RunConfig) -> Result<Value> {
    let reg = cfg.registry()?;
    let times = time_grid(cfg)?;
    let tech = TechnicalParams { v0: cfg.v0, b: cfg.b, tau_d: cfg.tau_d_s.unwrap_or(f64::INFINITY) };
    let mut noise = Noise::new(cfg);
    let mut em = Emitter::new("simulate visibility", cfg)?;
    let mut traces = Vec::new();
    for &w in &cfg.omega_e_hz {
        let f = frame_at(cfg, w)?;
        let model = VisibilityModel::new(f.sin_phi, cfg.n_total, reg.clone())?.with_technical(tech)?;
        for &seq in &cfg.sequences {
            let y: Vec<f64> = times.iter().map(|&t| visibility_fit_model(t, &model, seq)).collect();
            let name = format!("visibility_{}_{:.0}MHz.csv", seq, w / 1e6);
            let rows = noise.rows(&times, &y);
            let path = em.csv(
                &name,
                &noise.headers("tau_s", "visibility"),
                &rows,
                json!({ "sequence": seq, "omega_e_hz": f.omega_e, "sin_phi": f.sin_phi }),
            )?;
            io::write_json(
                &io::sidecar_path(&path),
                &io::VisibilitySidecar { sequence: seq, omega_e_hz: f.omega_e },
            )?;
            traces.push(json!({ "file": path.display().to_string(), "sequence": seq, "omega_e_hz": f.omega_e, "sin_phi": f.sin_phi }));
        }
    }
    Ok(summary("simulate visibility", &em, json!({ "traces": traces })))
}

pub(super) fn simulate_sideband_map(cfg: &RunConfig) -> Result<Value> {
    let reg = cfg.registry()?;
    let times = time_grid(cfg)?;
    if cfg.n_detunings == 0 {
        return Err(Error::InvalidInput("detuning grid is empty (n_detunings = 0)".into()));
    }
    let omega_e = *cfg
        .omega_e_hz
        .first()
        .ok_or_else(|| Error::InvalidInput("omega_e_hz is empty".into()))?;
    let f = frame_at(cfg, omega_e)?;
    let resonances = species_resonances(
        &reg,
        &f,
        cfg.n_total,
        cfg.omega_rabi_hz,
        cfg.gamma1_per_s,
        cfg.gamma_dephasing_per_s,
    )?;
    let spread = EnsembleSpread::new(cfg.t2_star_s, cfg.sigma_points)?;
    let deltas = linspace(-cfg.detuning_span_hz, cfg.detuning_span_hz, cfg.n_detunings);
    let map = simulate_sideband_spectrum(&deltas, &times, &resonances, &spread)?;
    let mut rows = Vec::with_capacity(map.population.len());
    for (i, d) in map.deltas.iter().enumerate() {
        for (k, t) in map.times.iter().enumerate() {
            rows.push(vec![*d, *t, map.at(i, k)]);
        }
    }
    let details = json!({
        "omega_e_hz": f.omega_e,
        "sin_phi": f.sin_phi,
        "resonances": map.resonances,
        "warnings": map.warnings,
    });
    let mut em = Emitter::new("simulate sideband-map", cfg)?;
    em.csv("sideband_map.csv", &["detuning_hz", "time_s", "population"], &rows, details.clone())?;
    Ok(summary("simulate sideband-map", &em, details))
}

fn magnon_rate(cfg: &RunConfig, omega_e: f64) -> Result<f64> {
    if let Some(r) = cfg.omega_mag_hz {
        return Ok(r);
    }
    let (omega_n, _) = driven_larmor(cfg)?;
    let f = frame_at(cfg, omega_e)?;
    magnon_rabi_rate(cfg.a_single_hz * f.sin_phi, cfg.omega_rabi_hz, omega_n, cfg.n_species)
}

pub(super) fn simulate_rabi(cfg: &RunConfig) -> Result<Value> {
    let times = time_grid(cfg)?;
    let omega_e = *cfg
        .omega_e_hz
        .first()
        .ok_or_else(|| Error::InvalidInput("omega_e_hz is empty".into()))?;
    let rate = magnon_rate(cfg, omega_e)?;
    let params = LindbladParams {
        omega_mag: rate,
        delta: 0.0,
        gamma1: cfg.gamma1_per_s,
        gamma_dephasing: cfg.gamma_dephasing_per_s,
    };
    let spread = EnsembleSpread::new(cfg.t2_star_s, cfg.sigma_points)?;
    let y = ensemble_average_evolution(&params, &spread, &times)?;
    let mut noise = Noise::new(cfg);
    let mut em = Emitter::new("simulate rabi", cfg)?;
    let details = json!({ "omega_e_hz": omega_e, "lindblad": params, "t2_star_s": cfg.t2_star_s });
    for side in ["negative", "positive"] {
        let rows = noise.rows(&times, &y);
        em.csv(&format!("rabi_{side}.csv"), &noise.headers("time_s", "population"), &rows, details.clone())?;
    }
    Ok(summary("simulate rabi", &em, details))
}

pub(super) fn fit_knight(cfg: &RunConfig, args: &KnightArgs) -> Result<Value> {
    let hyperfine_a = match cfg.hyperfine_a_hz {
        Some(a) => a,
        None => driven_larmor(cfg)?.1,
    };
    let result = match (&args.differences, &args.negative_up) {
        (Some(d), _) => {
            if d.len() != 4 {
                return Err(Error::InvalidInput(format!("--differences takes 4 values, got {}", d.len())));
            }
            knight_from_differences((d[0], d[1]), (d[2], d[3]), hyperfine_a)?
        }
        (None, Some(nu)) => {
            let need = |p: &Option<PathBuf>| p.clone().ok_or_else(|| Error::InvalidInput("all four spectra are required".into()));
            let spectra = KnightSpectra {
                negative_up: io::read_spectrum(nu, ElectronState::Up)?,
                negative_down: io::read_spectrum(&need(&args.negative_down)?, ElectronState::Down)?,
                positive_up: io::read_spectrum(&need(&args.positive_up)?, ElectronState::Up)?,
                positive_down: io::read_spectrum(&need(&args.positive_down)?, ElectronState::Down)?,
            };
            knight_shift_analysis(&spectra, hyperfine_a)?
        }
        (None, None) => return Err(Error::InvalidInput("give --differences or four spectra".into())),
    };
    let mut em = Emitter::new("fit knight", cfg)?;
    em.json("knight.json", &result)?;
    Ok(summary("fit knight", &em, serde_json::to_value(&result)?))
}

fn residual_rows(samples: &Samples, model: impl Fn(usize) -> f64) -> Vec<Vec<f64>> {
    (0..samples.len())
        .map(|i| {
            let m = model(i);
            vec![samples.x[i], samples.y[i], m, samples.y[i] - m]
        })
        .collect()
}

pub(super) fn fit_visibility(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<Value> {
    let mut warnings = Vec::new();
    let mut data = Vec::new();
    for p in inputs {
        let (d, w) = io::read_visibility(p)?;
        warnings.extend(w);
        data.push(d);
    }
    let base = VisibilityModel::new(0.1, cfg.n_total, cfg.registry()?)?;
    let fit = fit_visibility_traces(&data, &base, &VisibilityFitOptions { b_min: cfg.b_min, b_max: cfg.b_max })?;
    warnings.extend(fit.fit.warnings.iter().cloned());
    let result = json!({
        "sin_phi": fit.sin_phi,
        "b": fit.b,
        "b_sigma": fit.b_sigma,
        "technical": fit.technical,
        "fit": fit_value(&fit.fit)?,
        "warnings": warnings,
    });
    let mut em = Emitter::new("fit visibility", cfg)?;
    for ((p, d), r) in inputs.iter().zip(&data).zip(&fit.residuals) {
        let rows: Vec<Vec<f64>> = (0..d.t.len()).map(|k| vec![d.t[k], d.w[k], d.w[k] - r[k], r[k]]).collect();
        em.csv(
            &format!("residuals_{}.csv", stem(p)),
            &["tau_s", "visibility", "model", "residual"],
            &rows,
            json!({ "input": p.display().to_string() }),
        )?;
    }
    em.json("visibility_fit.json", &result)?;
    Ok(summary("fit visibility", &em, result))
}

pub(super) fn fit_echo(cfg: &RunConfig, input: &Path, scaling: bool) -> Result<Value> {
    let (samples, warnings) = io::read_samples(input)?;
    let mut em = Emitter::new("fit echo", cfg)?;
    let details = json!({ "input": input.display().to_string() });
    let result = if scaling {
        let points: Vec<(f64, f64, Option<f64>)> = (0..samples.len())
            .map(|i| (samples.x[i], samples.y[i], samples.sigma.as_ref().map(|s| s[i])))
            .collect();
        let fit = fit_t2_scaling(&points, cfg.omega_e0_hz, cfg.alpha_bar)?;
        let rows = residual_rows(&samples, |i| fit.predict(samples.x[i], cfg.omega_e0_hz, cfg.alpha_bar));
        em.csv("residuals_t2_scaling.csv", &["omega_e_hz", "t2_s", "model", "residual"], &rows, details)?;
        json!({ "t2_scaling": fit, "omega_e0_hz": cfg.omega_e0_hz, "alpha_bar": cfg.alpha_bar, "warnings": warnings })
    } else {
        let pairs: Vec<(f64, f64)> = samples.x.iter().cloned().zip(samples.y.iter().cloned()).collect();
        let fit = fit_echo_decay(&pairs)?;
        let rows = residual_rows(&samples, |i| (-(samples.x[i] / fit.t2).powf(fit.alpha)).exp());
        em.csv("residuals_echo.csv", &["tau_s", "visibility", "model", "residual"], &rows, details)?;
        json!({ "echo": fit, "warnings": warnings })
    };
    em.json(if scaling { "t2_scaling.json" } else { "echo_fit.json" }, &result)?;
    Ok(summary("fit echo", &em, result))
}

fn to_population(s: Samples, amplitude: f64, warnings: &mut Vec<String>) -> Result<Samples> {
    let p = counts_to_population(&s.y, amplitude)?;
    warnings.extend(p.warnings);
    let sigma = s.sigma.map(|v| v.iter().map(|e| e / amplitude).collect());
    Samples::new(s.x, p.values, sigma)
}

pub(super) fn fit_magnon(cfg: &RunConfig, args: &MagnonArgs) -> Result<Value> {
    let (mut neg, mut warnings) = io::read_samples(&args.negative)?;
    let (mut pos, w) = io::read_samples(&args.positive)?;
    warnings.extend(w);
    let amplitude = match (&args.rabi_amplitude, &args.calibration) {
        (Some(a), _) => Some(*a),
        (None, Some(path)) => {
            let (cal, w) = io::read_samples(path)?;
            warnings.extend(w);
            let f = fit_damped_sine(&cal)?;
            warnings.extend(f.warnings.iter().map(|w| format!("calibration: {w}")));
            Some(f.value("amplitude"))
        }
        (None, None) => None,
    };
    if let Some(a) = amplitude {
        neg = to_population(neg, a, &mut warnings)?;
        pos = to_population(pos, a, &mut warnings)?;
    }
    let fit = fit_magnon_rabi(&neg, &pos, cfg.gamma1_per_s, cfg.t2_star_s)?;
    warnings.extend(fit.fit.warnings.iter().cloned());
    let spread = EnsembleSpread::with_default_grid(cfg.t2_star_s)?;
    let mut em = Emitter::new("fit magnon", cfg)?;
    for (side, s, rate) in [("negative", &neg, fit.omega_mag_negative.0), ("positive", &pos, fit.omega_mag_positive.0)] {
        let params = LindbladParams {
            omega_mag: rate,
            delta: 0.0,
            gamma1: cfg.gamma1_per_s,
            gamma_dephasing: fit.gamma_dephasing.0,
        };
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&a, &b| s.x[a].total_cmp(&s.x[b]));
        let sorted: Vec<f64> = order.iter().map(|&i| s.x[i]).collect();
        let model = ensemble_average_evolution(&params, &spread, &sorted)?;
        let mut by_index = vec![0.0; s.len()];
        for (k, &i) in order.iter().enumerate() {
            by_index[i] = model[k];
        }
        let rows = residual_rows(s, |i| by_index[i]);
        em.csv(
            &format!("residuals_magnon_{side}.csv"),
            &["time_s", "population", "model", "residual"],
            &rows,
            json!({ "lindblad": params, "t2_star_s": cfg.t2_star_s }),
        )?;
    }
    let result = json!({
        "omega_mag_negative_hz": fit.omega_mag_negative,
        "omega_mag_positive_hz": fit.omega_mag_positive,
        "omega_mag_mean_hz": fit.omega_mag_mean,
        "gamma_dephasing_per_s": fit.gamma_dephasing,
        "rabi_amplitude_counts": amplitude,
        "fit": fit_value(&fit.fit)?,
        "warnings": warnings,
    });
    em.json("magnon_fit.json", &result)?;
    Ok(summary("fit magnon", &em, result))
}

pub(super) fn fit_background(cfg: &RunConfig, input: &Path) -> Result<Value> {
    let (samples, mut warnings) = io::read_samples(input)?;
    let fit = fit_background_gamma1(&samples)?;
    warnings.extend(fit.warnings.iter().cloned());
    let (g, b) = (fit.value("gamma1"), fit.value("background"));
    let rows = residual_rows(&samples, |i| spin_flip_background(g, samples.x[i]) + b);
    let mut em = Emitter::new("fit background", cfg)?;
    em.csv(
        "residuals_background.csv",
        &["time_s", "population", "model", "residual"],
        &rows,
        json!({ "input": input.display().to_string() }),
    )?;
    let result = json!({ "fit": fit_value(&fit)?, "warnings": warnings });
    em.json("background_fit.json", &result)?;
    Ok(summary("fit background", &em, result))
}
