//! Acceptance gate. Runs without the libtest harness so every criterion
//! prints its own PASS/FAIL line even when all of them pass.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ncspin::coherence::{
    filter_value, fit_t2_scaling, fit_visibility, visibility, visibility_fit_model, PulseSequence, TechnicalParams,
    VisibilityDataset, VisibilityFitOptions, VisibilityModel,
};
use ncspin::fitters::{
    fit_magnon_rabi, knight_from_differences, knight_shift_analysis, ElectronState, KnightSpectra, Samples,
    SidebandSpectrum,
};
use ncspin::frames::{make_frame, overhauser_for_target};
use ncspin::magnon::{
    ensemble_average_evolution, evolve_lindblad, magnon_rabi_rate, monte_carlo_enhancement, DensityMatrix2,
    EnsembleSpread, LindbladParams,
};
use ncspin::species::{default_registry, A_AS75_HZ, DEFAULT_FIELD_T};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const OMEGA_E0: f64 = 3.0e9;
const SIN_PHI0: f64 = 0.207;
const A_SINGLE: f64 = 0.28e6;
const N_AS: f64 = 3.8e4;
const OMEGA_RABI: f64 = 5.2e6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn phi0() -> f64 {
    SIN_PHI0.asin()
}

fn as_larmor(field: f64) -> f64 {
    default_registry().with_field(field).unwrap().get("75As").unwrap().larmor(field).unwrap()
}

/// Omega_mag at a target splitting, with a_nc taken from the tilted frame.
fn omega_mag_at(omega_e: f64) -> f64 {
    let d = overhauser_for_target(omega_e, OMEGA_E0, phi0()).unwrap();
    let frame = make_frame(OMEGA_E0, phi0(), d).unwrap();
    let a_nc = frame.couplings(A_SINGLE).a_nc;
    magnon_rabi_rate(a_nc, OMEGA_RABI, as_larmor(DEFAULT_FIELD_T), N_AS).unwrap()
}

fn criterion_1() -> Outcome {
    let rate = omega_mag_at(OMEGA_E0);
    let rel = (rate / 1.025e6 - 1.0).abs();
    check(rel <= 0.10, format!("omega_mag(3 GHz) = {:.5} MHz, {:.2}% from 1.025 MHz", rate / 1e6, 100.0 * rel))
}

fn gaussian(x: &[f64], center: f64, width: f64, amp: f64, bg: f64) -> Vec<f64> {
    x.iter()
        .map(|v| bg + amp * (-0.5 * ((v - center) / width).powi(2)).exp())
        .collect()
}

fn criterion_2() -> Outcome {
    let k = knight_from_differences((0.26e6, 0.07e6), (0.29e6, 0.07e6), A_AS75_HZ).unwrap();
    // Spectra whose Gaussian centres carry the same two differences.
    let wn = as_larmor(DEFAULT_FIELD_T);
    let grid = |lo: f64, hi: f64| -> Vec<f64> { (0..161).map(|i| lo + (hi - lo) * i as f64 / 160.0).collect() };
    let neg = grid(-wn - 2e6, -wn + 2e6);
    let pos = grid(wn - 2e6, wn + 2e6);
    let spectrum = |x: &Vec<f64>, c: f64, state| {
        SidebandSpectrum::from_profile(x.clone(), gaussian(x, c, 0.35e6, 120.0, 25.0), state).unwrap()
    };
    let spectra = KnightSpectra {
        negative_up: spectrum(&neg, -wn - 0.13e6, ElectronState::Up),
        negative_down: spectrum(&neg, -wn + 0.13e6, ElectronState::Down),
        positive_up: spectrum(&pos, wn + 0.145e6, ElectronState::Up),
        positive_down: spectrum(&pos, wn - 0.145e6, ElectronState::Down),
    };
    let ks = knight_shift_analysis(&spectra, A_AS75_HZ).unwrap();
    let ok = |a: f64, n: f64| (a - 0.28e6).abs() <= 0.005e6 && (2.9e4..=4.7e4).contains(&n);
    check(
        ok(k.a_single, k.n_species) && ok(ks.a_single, ks.n_species),
        format!(
            "differences: a = {:.4} MHz, N_As = {:.4e}; spectra: a = {:.4} MHz, N_As = {:.4e}",
            k.a_single / 1e6,
            k.n_species,
            ks.a_single / 1e6,
            ks.n_species
        ),
    )
}

fn criterion_3() -> Outcome {
    let pts = [
        (3e9, 1.93e-6, Some(0.05e-6)),
        (4e9, 2.21e-6, Some(0.05e-6)),
        (5e9, 2.49e-6, Some(0.04e-6)),
        (6e9, 2.72e-6, Some(0.03e-6)),
    ];
    let s = fit_t2_scaling(&pts, OMEGA_E0, 2.28).unwrap();
    let ok = (s.coefficient - 0.95e-6).abs() <= 2.0 * 0.03e-6 && (s.offset - 0.99e-6).abs() <= 2.0 * 0.04e-6;
    check(
        ok,
        format!(
            "coefficient = {:.4} us (+-{:.4}), offset = {:.4} us (+-{:.4})",
            s.coefficient * 1e6,
            s.coefficient_sigma * 1e6,
            s.offset * 1e6,
            s.offset_sigma * 1e6
        ),
    )
}

fn criterion_4() -> Outcome {
    let n = 1e4;
    let est = monte_carlo_enhancement(n, 1_000_000, 7).unwrap();
    let exact = (2.5 * n).sqrt();
    let rel = (est.value / exact - 1.0).abs();
    check(rel <= 0.01, format!("MC = {:.3} +- {:.3}, sqrt(5N/2) = {:.3}, rel {:.2e}", est.value, est.std_error, exact, rel))
}

fn criterion_5() -> Outcome {
    let omega = 1.04e6;
    let times: Vec<f64> = (0..=2000).map(|i| 10.0 / omega * i as f64 / 2000.0).collect();
    let coherent = LindbladParams { omega_mag: omega, delta: 0.0, gamma1: 0.0, gamma_dephasing: 0.0 };
    let states = evolve_lindblad(&DensityMatrix2::ground(), &coherent, &times).unwrap();
    let trace_dev = states.iter().map(|r| (r.trace() - 1.0).abs()).fold(0.0, f64::max);
    let rabi_err = states
        .iter()
        .zip(&times)
        .map(|(r, t)| (r.excited_population() - (PI * omega * t).sin().powi(2)).abs())
        .fold(0.0, f64::max);

    let gamma1 = 3.4e5;
    let sat_times: Vec<f64> = (0..=400).map(|i| 10e-6 * i as f64 / 400.0).collect();
    let relax = LindbladParams { omega_mag: 0.0, delta: 0.0, gamma1, gamma_dephasing: 0.0 };
    let sat = evolve_lindblad(&DensityMatrix2::ground(), &relax, &sat_times).unwrap();
    let sat_err = sat
        .iter()
        .zip(&sat_times)
        .map(|(r, t)| (r.excited_population() - 0.5 * (1.0 - (-2.0 * gamma1 * t).exp())).abs())
        .fold(0.0, f64::max);
    check(
        trace_dev < 1e-9 && rabi_err < 1e-6 && sat_err < 1e-6,
        format!("trace dev {trace_dev:.1e}, Rabi err {rabi_err:.1e}, saturation err {sat_err:.1e}"),
    )
}

fn cp1_closed(x: f64) -> f64 {
    8.0 * (PI * x / 2.0).sin().powi(4)
}

fn cp2_closed(x: f64) -> f64 {
    8.0 * (PI * x / 2.0).sin().powi(4) * (2.0 * PI * x).sin().powi(2) / (PI * x).cos().powi(2)
}

/// W(t) from numerically integrating a line-broadened noise spectrum against
/// the filter function, starting from per-nucleus couplings.
fn overlap_visibility(t: f64, seq: PulseSequence, sin_phi: f64, n_total: f64) -> f64 {
    let reg = default_registry();
    let mut exponent = 0.0;
    for s in reg.species() {
        let wn = s.larmor(reg.field_t()).unwrap();
        let n_j = s.abundance_c * n_total / 2.0;
        let a_nc = sin_phi * s.abundance_c * s.hyperfine_a / n_j;
        let transverse = 2.5 * n_j;
        let strength = a_nc * a_nc * PI / 2.0 * transverse;
        let width = 1e-5 * wn;
        let f = |w: f64| -> f64 {
            let x = w * t;
            let filt = match seq {
                PulseSequence::Cp1 => cp1_closed(x),
                PulseSequence::Cp2 => {
                    // Nudge off the removable singularity.
                    let c = (PI * x).cos();
                    if c.abs() < 1e-9 {
                        cp2_closed(x + 1e-9)
                    } else {
                        cp2_closed(x)
                    }
                }
            };
            let line = (-0.5 * ((w - wn) / width).powi(2)).exp() / (width * (2.0 * PI).sqrt());
            strength * line * filt / (w * w) / (2.0 * PI)
        };
        // Composite Simpson over +-10 widths.
        let (lo, hi, m) = (wn - 10.0 * width, wn + 10.0 * width, 2000);
        let h = (hi - lo) / m as f64;
        let mut acc = f(lo) + f(hi);
        for i in 1..m {
            acc += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        exponent += acc * h / 3.0;
    }
    (-exponent).exp()
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut closed_err: f64 = 0.0;
    for _ in 0..1000 {
        let x: f64 = rng.gen_range(0.0..40.0);
        closed_err = closed_err
            .max((filter_value(PulseSequence::Cp1, x) - cp1_closed(x)).abs())
            .max((filter_value(PulseSequence::Cp2, x) - cp2_closed(x)).abs());
    }
    let mut jump: f64 = 0.0;
    for k in 0..40 {
        let x = k as f64 + 0.5;
        let f0 = filter_value(PulseSequence::Cp2, x);
        for eps in [1e-8, -1e-8] {
            jump = jump.max((f0 - filter_value(PulseSequence::Cp2, x + eps)).abs());
        }
    }
    let mut overlap_err: f64 = 0.0;
    let n_total = 7.6e4;
    for sin_phi in [0.207, 0.1035] {
        let model = VisibilityModel::new(sin_phi, n_total, default_registry()).unwrap();
        for seq in [PulseSequence::Cp1, PulseSequence::Cp2] {
            for i in 1..=60 {
                let t = 1e-6 * i as f64 / 60.0;
                let w = visibility(t, &model, seq);
                overlap_err = overlap_err.max((w - overlap_visibility(t, seq, sin_phi, n_total)).abs());
            }
        }
    }
    check(
        closed_err <= 1e-10 && jump <= 1e-4 && overlap_err <= 1e-3,
        format!("closed-form err {closed_err:.1e}, CP2 jump {jump:.1e}, overlap err {overlap_err:.1e}"),
    )
}

fn visibility_round_trip(seed: u64) -> (f64, f64) {
    let b_true = 1.0177;
    let n_total = 7.6e4;
    let reg = default_registry().with_field(6.0).unwrap();
    let tech = TechnicalParams { v0: 0.97, b: b_true, tau_d: 8e-6 };
    let noise = Normal::new(0.0, 0.01).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let times: Vec<f64> = (1..=400).map(|i| 0.6e-6 * i as f64 / 400.0).collect();
    let omegas = [3e9, 4e9, 5e9, 6e9];
    let mut data = Vec::new();
    let mut truth = Vec::new();
    for &w in &omegas {
        let sp = SIN_PHI0 * OMEGA_E0 / w;
        truth.push(sp);
        let model = VisibilityModel::new(sp, n_total, reg.clone()).unwrap().with_technical(tech).unwrap();
        for seq in [PulseSequence::Cp1, PulseSequence::Cp2] {
            let y = times
                .iter()
                .map(|&t| visibility_fit_model(t, &model, seq) + noise.sample(&mut rng))
                .collect();
            data.push(VisibilityDataset {
                omega_e: w,
                sequence: seq,
                t: times.clone(),
                w: y,
                sigma: Some(vec![0.01; times.len()]),
            });
        }
    }
    let base = VisibilityModel::new(0.1, n_total, reg).unwrap();
    let fit = fit_visibility(&data, &base, &VisibilityFitOptions::default()).unwrap();
    let sin_err = fit
        .sin_phi
        .iter()
        .map(|e| {
            let k = omegas.iter().position(|w| *w == e.omega_e).unwrap();
            (e.sin_phi / truth[k] - 1.0).abs()
        })
        .fold(0.0, f64::max);
    (sin_err, (fit.b / b_true - 1.0).abs())
}

fn magnon_round_trip(seed: u64) -> (f64, f64) {
    let (om_neg, om_pos, gamma, gamma1, t2s) = (1.04e6, 0.98e6, 1.0e6, 3.4e5, 253e-9);
    let spread = EnsembleSpread::with_default_grid(t2s).unwrap();
    let times: Vec<f64> = (0..=200).map(|i| 2.0e-6 * i as f64 / 200.0).collect();
    let noise = Normal::new(0.0, 0.01).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = |om: f64| {
        let p = LindbladParams { omega_mag: om, delta: 0.0, gamma1, gamma_dephasing: gamma };
        let y = ensemble_average_evolution(&p, &spread, &times)
            .unwrap()
            .into_iter()
            .map(|v| v + noise.sample(&mut rng))
            .collect();
        Samples::new(times.clone(), y, Some(vec![0.01; times.len()])).unwrap()
    };
    let neg = trace(om_neg);
    let pos = trace(om_pos);
    let fit = fit_magnon_rabi(&neg, &pos, gamma1, t2s).unwrap();
    let om_err = (fit.omega_mag_negative.0 / om_neg - 1.0)
        .abs()
        .max((fit.omega_mag_positive.0 / om_pos - 1.0).abs());
    (om_err, (fit.gamma_dephasing.0 / gamma - 1.0).abs())
}

fn criterion_7() -> Outcome {
    let seeds = [1_u64, 2, 3, 4, 5];
    let (mut sin_err, mut b_err, mut om_err, mut g_err) = (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64);
    for &s in &seeds {
        let (a, b) = visibility_round_trip(s);
        let (c, d) = magnon_round_trip(s);
        sin_err = sin_err.max(a);
        b_err = b_err.max(b);
        om_err = om_err.max(c);
        g_err = g_err.max(d);
    }
    check(
        sin_err <= 0.02 && b_err <= 1e-3 && om_err <= 0.02 && g_err <= 0.10,
        format!(
            "worst of {} seeds: sin_phi {:.2}%, b {:.3}%, omega_mag {:.2}%, Gamma {:.1}%",
            seeds.len(),
            100.0 * sin_err,
            100.0 * b_err,
            100.0 * om_err,
            100.0 * g_err
        ),
    )
}

fn criterion_8() -> Outcome {
    let products: Vec<f64> = [3e9, 4e9, 5e9, 6e9].iter().map(|&w| omega_mag_at(w) * w).collect();
    let spread = products
        .iter()
        .map(|p| (p / products[0] - 1.0).abs())
        .fold(0.0, f64::max);
    check(spread <= 1e-12, format!("max relative spread of omega_mag * omega_e = {spread:.1e}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, Option<Duration>); 8] = [
        ("ab initio magnon rate", criterion_1, Some(Duration::from_secs(1))),
        ("Knight-shift chain", criterion_2, Some(Duration::from_secs(1))),
        ("T2 scaling", criterion_3, Some(Duration::from_secs(1))),
        ("collective enhancement", criterion_4, Some(Duration::from_secs(30))),
        ("Lindblad integrity", criterion_5, Some(Duration::from_secs(10))),
        ("filter functions", criterion_6, None),
        ("round-trip fitting", criterion_7, Some(Duration::from_secs(120))),
        ("tuning law", criterion_8, None),
    ];
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let out = run();
        let elapsed = start.elapsed();
        let in_time = budget.map_or(true, |b| elapsed <= b);
        let pass = out.pass && in_time;
        if !pass {
            failed += 1;
        }
        let budget_note = budget.map_or(String::new(), |b| format!(" / {:.0?}", b));
        println!(
            "{} criterion {} ({}): {} [{:.3?}{}]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            name,
            out.detail,
            elapsed,
            budget_note
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
