//! Cross-checks the master-equation solvers against Bloch equations derived by
//! hand and integrated with a plain fixed-step RK4.

use std::f64::consts::PI;

use ncspin::magnon::{evolve_lindblad, propagate_lindblad, DensityMatrix2, LindbladParams};
use num_complex::Complex64;
use proptest::prelude::*;

/// Bloch vector r = (<sx>, <sy>, <sz>) in the basis where state 0 has sz = +1.
///
/// H = pi (delta sz + omega sx) rotates r about 2 pi (omega, 0, delta).
/// Equal-rate raising and lowering give dz = -2 g1 z and transverse decay g1;
/// D[sqrt(G) Sz] adds transverse decay G / 2.
fn bloch_rhs(p: &LindbladParams, r: [f64; 3]) -> [f64; 3] {
    let (wx, wz) = (2.0 * PI * p.omega_mag, 2.0 * PI * p.delta);
    let t2 = p.gamma1 + 0.5 * p.gamma_dephasing;
    [
        -wz * r[1] - t2 * r[0],
        wz * r[0] - wx * r[2] - t2 * r[1],
        wx * r[1] - 2.0 * p.gamma1 * r[2],
    ]
}

fn rk4(p: &LindbladParams, r0: [f64; 3], t_end: f64, steps: usize) -> [f64; 3] {
    let h = t_end / steps as f64;
    let add = |a: [f64; 3], b: [f64; 3], s: f64| [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]];
    let mut r = r0;
    for _ in 0..steps {
        let k1 = bloch_rhs(p, r);
        let k2 = bloch_rhs(p, add(r, k1, h / 2.0));
        let k3 = bloch_rhs(p, add(r, k2, h / 2.0));
        let k4 = bloch_rhs(p, add(r, k3, h));
        for i in 0..3 {
            r[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    r
}

fn bloch_of(rho: &DensityMatrix2) -> [f64; 3] {
    let m = rho.0;
    [2.0 * m[(0, 1)].re, -2.0 * m[(0, 1)].im, m[(0, 0)].re - m[(1, 1)].re]
}

fn max_diff(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max)
}

fn mixed_start() -> DensityMatrix2 {
    DensityMatrix2::from_populations(0.7, 0.3, Complex64::new(0.2, -0.1)).unwrap()
}

#[test]
fn generic_parameters_match_hand_derived_bloch() {
    let p = LindbladParams { omega_mag: 1.3e6, delta: 0.4e6, gamma1: 2.0e5, gamma_dephasing: 1.5e6 };
    let rho0 = mixed_start();
    let times = [0.0, 0.17e-6, 0.5e-6, 1.1e-6, 2.0e-6];
    let rk = evolve_lindblad(&rho0, &p, &times).unwrap();
    let ex = propagate_lindblad(&rho0, &p, &times).unwrap();
    for (k, &t) in times.iter().enumerate() {
        let steps = ((t / 1e-10).ceil() as usize).max(1);
        let oracle = rk4(&p, bloch_of(&rho0), t, steps);
        assert!(max_diff(bloch_of(&rk[k]), oracle) < 1e-7, "RK at t = {t}");
        assert!(max_diff(bloch_of(&ex[k]), oracle) < 1e-7, "propagator at t = {t}");
    }
}

#[test]
fn detuned_rabi_closed_form() {
    // Generalised Rabi formula for a coherent drive from the ground state.
    let p = LindbladParams { omega_mag: 0.8e6, delta: 0.6e6, gamma1: 0.0, gamma_dephasing: 0.0 };
    let times: Vec<f64> = (0..=200).map(|i| 5e-6 * i as f64 / 200.0).collect();
    let out = evolve_lindblad(&DensityMatrix2::ground(), &p, &times).unwrap();
    let w = p.omega_mag.hypot(p.delta);
    for (rho, t) in out.iter().zip(&times) {
        let expect = (p.omega_mag / w).powi(2) * (PI * w * t).sin().powi(2);
        assert!((rho.excited_population() - expect).abs() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn propagator_matches_bloch_oracle(
        omega in 0.0..3e6_f64,
        delta in -2e6..2e6_f64,
        gamma1 in 0.0..1e6_f64,
        gamma in 0.0..5e6_f64,
        t in 0.0..2e-6_f64,
    ) {
        let p = LindbladParams { omega_mag: omega, delta, gamma1, gamma_dephasing: gamma };
        let rho0 = mixed_start();
        let out = propagate_lindblad(&rho0, &p, &[t]).unwrap();
        let oracle = rk4(&p, bloch_of(&rho0), t, ((t / 2e-10).ceil() as usize).max(1));
        prop_assert!(max_diff(bloch_of(&out[0]), oracle) < 1e-7);
        prop_assert!((out[0].trace() - 1.0).abs() < 1e-12);
        prop_assert!(out[0].min_eigenvalue() > -1e-12);
    }
}
