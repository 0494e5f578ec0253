//! Electron quantization-axis geometry.
//!
//! The electron is quantized along an axis tilted from the external field by
//! the g-tensor anisotropy. A mean-field Overhauser shift adds to the
//! field-parallel component of the Zeeman term, which both raises the qubit
//! splitting and pulls the axis back toward the field. All closed forms are
//! exact; no small-angle approximations are used.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Principal g-values along [110] and [-110].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GTensor {
    pub g110: f64,
    pub g_m110: f64,
}

impl GTensor {
    /// Builds a tensor with the given tilt angle and mean g-value `(g110 + g_m110) / 2`.
    pub fn from_angle(phi0: f64, g_mean: f64) -> Self {
        let half_diff = g_mean * phi0.tan();
        Self {
            g110: g_mean + half_diff,
            g_m110: g_mean - half_diff,
        }
    }
}

/// Tilt between the electron quantization axis and the external field.
pub fn anisotropy_angle(g: GTensor) -> Result<f64> {
    let sum = g.g110 + g.g_m110;
    if sum == 0.0 || !sum.is_finite() {
        return Err(Error::UndefinedAxis);
    }
    Ok(((g.g110 - g.g_m110) / sum).atan())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameGeometry {
    pub omega_e0: f64,
    pub phi0: f64,
    pub delta_oh: f64,
    pub omega_e: f64,
    pub sin_phi: f64,
    pub cos_phi: f64,
}

impl FrameGeometry {
    pub fn phi(&self) -> f64 {
        self.sin_phi.atan2(self.cos_phi)
    }

    /// Collinear and non-collinear hyperfine constants for single-nucleus constant `a`.
    pub fn couplings(&self, a: f64) -> HyperfineCouplings {
        HyperfineCouplings {
            a,
            a_nc: a * self.sin_phi,
            a_col: a * self.cos_phi,
        }
    }
}

/// Builds the tilted frame for a bare splitting, tilt angle and Overhauser shift.
///
/// `delta_oh` may be negative as long as the resulting splitting stays positive.
pub fn make_frame(omega_e0: f64, phi0: f64, delta_oh: f64) -> Result<FrameGeometry> {
    if !(omega_e0 > 0.0) || !omega_e0.is_finite() {
        return Err(Error::InvalidInput(format!(
            "bare splitting must be positive, got {omega_e0}"
        )));
    }
    if !phi0.is_finite() || !delta_oh.is_finite() {
        return Err(Error::InvalidInput("non-finite frame parameter".into()));
    }
    let parallel = omega_e0 * phi0.cos() + delta_oh;
    let transverse = omega_e0 * phi0.sin();
    let omega_e = parallel.hypot(transverse);
    if omega_e == 0.0 {
        return Err(Error::InvalidInput(
            "Overhauser shift cancels the Zeeman splitting exactly".into(),
        ));
    }
    Ok(FrameGeometry {
        omega_e0,
        phi0,
        delta_oh,
        omega_e,
        sin_phi: transverse / omega_e,
        cos_phi: parallel / omega_e,
    })
}

/// Ratio `a_nc / a_nc0 = sin(phi) / sin(phi0) = omega_e0 / omega_e`.
pub fn nc_scaling(omega_e0: f64, omega_e: f64) -> Result<f64> {
    if !(omega_e0 > 0.0) || !(omega_e > 0.0) {
        return Err(Error::InvalidInput(format!(
            "splittings must be positive, got {omega_e0} and {omega_e}"
        )));
    }
    Ok(omega_e0 / omega_e)
}

/// Overhauser shift that brings the splitting to `omega_e_target`.
///
/// Uses the root with `cos(phi) >= 0`, i.e. the electron stays on the
/// field-parallel side.
pub fn overhauser_for_target(omega_e_target: f64, omega_e0: f64, phi0: f64) -> Result<f64> {
    if !(omega_e0 > 0.0) {
        return Err(Error::InvalidInput(format!(
            "bare splitting must be positive, got {omega_e0}"
        )));
    }
    let transverse = omega_e0 * phi0.sin();
    let minimum = transverse.abs();
    if !(omega_e_target >= minimum) || omega_e_target <= 0.0 {
        return Err(Error::UnreachableTarget {
            target: omega_e_target,
            minimum,
        });
    }
    let parallel = ((omega_e_target - transverse) * (omega_e_target + transverse)).sqrt();
    Ok(parallel - omega_e0 * phi0.cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperfineCouplings {
    pub a: f64,
    pub a_nc: f64,
    pub a_col: f64,
}

/// Non-collinear constant from the quadrupolar mechanism, `a * B_Q / omega_n`.
pub fn quadrupolar_nc_estimate(a: f64, b_q: f64, omega_n: f64) -> Result<f64> {
    if !(omega_n > 0.0) {
        return Err(Error::InvalidInput(format!(
            "nuclear Larmor frequency must be positive, got {omega_n}"
        )));
    }
    Ok(a * b_q / omega_n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const W0: f64 = 3.0e9;

    fn phi0() -> f64 {
        0.207f64.asin()
    }

    #[test]
    fn isotropic_and_limiting_angles() {
        assert_eq!(anisotropy_angle(GTensor { g110: -0.4, g_m110: -0.4 }).unwrap(), 0.0);
        let a = anisotropy_angle(GTensor { g110: 0.3, g_m110: 0.0 }).unwrap();
        assert!((a - std::f64::consts::FRAC_PI_4).abs() < 1e-15);
        assert!(matches!(
            anisotropy_angle(GTensor { g110: 0.3, g_m110: -0.3 }),
            Err(Error::UndefinedAxis)
        ));
    }

    #[test]
    fn twelve_degree_tilt() {
        // (g1 - g2) / (g1 + g2) = 0.2116
        let g = GTensor { g110: 1.2116, g_m110: 0.7884 };
        let phi = anisotropy_angle(g).unwrap();
        assert!((phi - 0.2085).abs() < 5e-4, "{phi}");
        assert!((phi.sin() - 0.207).abs() < 1e-3);
        assert!((phi.to_degrees() - 12.0).abs() < 0.1);
    }

    #[test]
    fn from_angle_round_trip() {
        let g = GTensor::from_angle(phi0(), -0.35);
        assert!((anisotropy_angle(g).unwrap() - phi0()).abs() < 1e-14);
    }

    #[test]
    fn frame_without_polarization() {
        let f = make_frame(W0, phi0(), 0.0).unwrap();
        assert!((f.omega_e - W0).abs() < 1e-6);
        assert!((f.sin_phi - 0.207).abs() < 1e-14);
    }

    #[test]
    fn frame_at_three_ghz_shift() {
        let f = make_frame(W0, phi0(), 3.0e9).unwrap();
        assert!((f.omega_e - 5.967e9).abs() < 1e6, "{}", f.omega_e);
        assert!((f.sin_phi - 0.1041).abs() < 1e-4, "{}", f.sin_phi);
    }

    #[test]
    fn frame_asymptote() {
        let d = 100.0 * W0;
        let f = make_frame(W0, phi0(), d).unwrap();
        let asym = W0 * phi0().cos() + d;
        assert!(((f.omega_e - asym) / asym).abs() < 1e-4);
    }

    #[test]
    fn negative_shift_allowed_until_cancellation() {
        let f = make_frame(W0, phi0(), -1.0e9).unwrap();
        assert!(f.omega_e > 0.0 && f.sin_phi > 0.207);
        assert!(make_frame(W0, 0.0, -W0).is_err());
        assert!(make_frame(0.0, phi0(), 0.0).is_err());
    }

    #[test]
    fn scaling_examples() {
        assert_eq!(nc_scaling(W0, W0).unwrap(), 1.0);
        assert!((0.207 * nc_scaling(3e9, 6e9).unwrap() - 0.1035).abs() < 1e-15);
        assert!(nc_scaling(W0, 0.0).is_err());
        let r = nc_scaling(3e9, 7.3e9).unwrap() * nc_scaling(7.3e9, 3e9).unwrap();
        assert!((r - 1.0).abs() < 1e-15);
    }

    #[test]
    fn overhauser_inversion_examples() {
        let d0 = overhauser_for_target(W0, W0, phi0()).unwrap();
        assert!(d0.abs() < 1e-6, "{d0}");
        let d6 = overhauser_for_target(6e9, W0, phi0()).unwrap();
        assert!((d6 - 3.033e9).abs() < 1e6, "{d6}");
        let f = make_frame(W0, phi0(), d6).unwrap();
        assert!(((f.omega_e - 6e9) / 6e9).abs() < 1e-9);
        assert!(matches!(
            overhauser_for_target(0.1e9, W0, phi0()),
            Err(Error::UnreachableTarget { .. })
        ));
    }

    #[test]
    fn quadrupolar_estimate() {
        let q = quadrupolar_nc_estimate(0.28e6, 75e3, 43.9e6).unwrap();
        assert!((q - 478.4).abs() < 1.0, "{q}");
        assert!((q / 1e3 - 0.5).abs() <= 0.1);
        assert_eq!(quadrupolar_nc_estimate(0.28e6, 0.0, 43.9e6).unwrap(), 0.0);
        assert!(quadrupolar_nc_estimate(0.28e6, 75e3, 0.0).is_err());
        let ratio = 58e3 / q;
        assert!(ratio > 50.0 && ratio < 200.0);
    }

    #[test]
    fn couplings_pythagorean() {
        let f = make_frame(W0, phi0(), 1.3e9).unwrap();
        let c = f.couplings(0.28e6);
        assert!((c.a_nc.powi(2) + c.a_col.powi(2) - c.a * c.a).abs() < 1e-12 * c.a * c.a);
    }

    proptest! {
        #[test]
        fn frame_invariants(d in -1.5e9f64..3.0e10, p in 0.0f64..1.2) {
            let f = make_frame(W0, p, d).unwrap();
            prop_assert!((f.sin_phi.powi(2) + f.cos_phi.powi(2) - 1.0).abs() < 1e-12);
            let lhs = f.sin_phi * f.omega_e;
            let rhs = W0 * p.sin();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
            let expected = ((W0 * p.cos() + d).powi(2) + (W0 * p.sin()).powi(2)).sqrt();
            prop_assert!((f.omega_e - expected).abs() <= 1e-12 * expected);
        }

        #[test]
        fn sin_phi_decreasing(d1 in 0.0f64..1e10, step in 1.0e3f64..1e9) {
            let a = make_frame(W0, phi0(), d1).unwrap();
            let b = make_frame(W0, phi0(), d1 + step).unwrap();
            prop_assert!(b.sin_phi < a.sin_phi);
        }

        #[test]
        fn scaling_matches_frame(d in 0.0f64..2e10) {
            let f = make_frame(W0, phi0(), d).unwrap();
            let r = nc_scaling(W0, f.omega_e).unwrap();
            prop_assert!((r - f.sin_phi / phi0().sin()).abs() <= 1e-12 * r);
        }

        #[test]
        fn angle_antisymmetric(g1 in 0.1f64..3.0, g2 in 0.1f64..3.0) {
            let a = anisotropy_angle(GTensor { g110: g1, g_m110: g2 }).unwrap();
            let b = anisotropy_angle(GTensor { g110: g2, g_m110: g1 }).unwrap();
            prop_assert!((a + b).abs() < 1e-15);
        }

        #[test]
        fn overhauser_round_trip(target in 0.7e9f64..2e10) {
            let d = overhauser_for_target(target, W0, phi0()).unwrap();
            let f = make_frame(W0, phi0(), d).unwrap();
            prop_assert!(((f.omega_e - target) / target).abs() < 1e-9);
        }
    }
}
