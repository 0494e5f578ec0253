//! Bounded Levenberg-Marquardt with numerical Jacobians, plus a Nelder-Mead
//! simplex used for seeding oscillatory problems.
//!
//! Residual functions return already-weighted residuals `(y - model) / sigma`.
//! Parameters shared between datasets are expressed through [`ParamSet`]: every
//! parameter has one slot in the global vector and each dataset's residual
//! closure reads the slots it depends on.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named, bounded parameter vector.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    init: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter and returns its slot in the global vector.
    pub fn push(&mut self, name: impl Into<String>, init: f64, lower: f64, upper: f64) -> usize {
        assert!(lower <= upper, "lower bound above upper bound");
        self.names.push(name.into());
        self.init.push(init.clamp(lower, upper));
        self.lower.push(lower);
        self.upper.push(upper);
        self.names.len() - 1
    }

    pub fn free(&mut self, name: impl Into<String>, init: f64) -> usize {
        self.push(name, init, f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn init(&self) -> &[f64] {
        &self.init
    }

    pub fn set_init(&mut self, idx: usize, value: f64) {
        self.init[idx] = value.clamp(self.lower[idx], self.upper[idx]);
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn clamp(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NllsOptions {
    pub max_iter: usize,
    /// Relative cost decrease below which an accepted step counts as converged.
    pub ftol: f64,
    /// Relative parameter step below which an accepted step counts as converged.
    pub xtol: f64,
    /// Scale the covariance by the reduced chi-square of the residuals.
    pub scale_covariance: bool,
    /// Report infinite sigma instead of failing when the normal matrix is singular.
    pub allow_singular: bool,
}

impl Default for NllsOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            ftol: 1e-12,
            xtol: 1e-10,
            scale_covariance: true,
            allow_singular: false,
        }
    }
}

/// Estimates, 1-sigma uncertainties and residual diagnostics of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub names: Vec<String>,
    pub estimates: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// Weighted residual sum of squares.
    pub rss: f64,
    pub dof: usize,
    pub converged: bool,
    pub iterations: usize,
    pub pinned: Vec<bool>,
    pub residuals: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct ParamEntry<'a> {
    parameter: &'a str,
    estimate: f64,
    sigma: f64,
    at_bound: bool,
}

#[derive(Serialize)]
struct FitReport<'a> {
    parameters: Vec<ParamEntry<'a>>,
    rss: f64,
    dof: usize,
    converged: bool,
    iterations: usize,
    warnings: &'a [String],
}

impl FitResult {
    pub fn get(&self, name: &str) -> Option<(f64, f64)> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| (self.estimates[i], self.sigmas[i]))
    }

    /// Estimate of `name`. Panics if the parameter does not exist.
    pub fn value(&self, name: &str) -> f64 {
        self.get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
            .0
    }

    pub fn sigma(&self, name: &str) -> f64 {
        self.get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
            .1
    }

    pub fn is_pinned(&self, name: &str) -> bool {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.pinned[i])
            .unwrap_or(false)
    }

    /// JSON document listing (parameter, estimate, sigma) plus diagnostics.
    pub fn to_json(&self) -> Result<String> {
        let report = FitReport {
            parameters: self
                .names
                .iter()
                .enumerate()
                .map(|(i, n)| ParamEntry {
                    parameter: n,
                    estimate: self.estimates[i],
                    sigma: self.sigmas[i],
                    at_bound: self.pinned[i],
                })
                .collect(),
            rss: self.rss,
            dof: self.dof,
            converged: self.converged,
            iterations: self.iterations,
            warnings: &self.warnings,
        };
        Ok(serde_json::to_string_pretty(&report)?)
    }

    /// Appends derived parameters with their propagated sigmas.
    pub fn push_derived(&mut self, name: impl Into<String>, estimate: f64, sigma: f64) {
        self.names.push(name.into());
        self.estimates.push(estimate);
        self.sigmas.push(sigma);
        self.pinned.push(false);
    }
}

fn cost_of(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}

fn eval<F>(f: &F, x: &[f64], m: Option<usize>) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let r = f(x);
    if let Some(m) = m {
        if r.len() != m {
            return Err(Error::InvalidInput(format!(
                "residual length changed from {m} to {}",
                r.len()
            )));
        }
    }
    Ok(r)
}

fn jacobian<F>(f: &F, x: &[f64], r0: &[f64], params: &ParamSet, scale: &[f64]) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    let m = r0.len();
    let n = x.len();
    let h_base = f64::EPSILON.cbrt();
    let columns: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let h = h_base * x[j].abs().max(scale[j]);
            let (lo, hi) = (params.lower[j], params.upper[j]);
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            if x[j] + h <= hi && x[j] - h >= lo {
                xp[j] = x[j] + h;
                xm[j] = x[j] - h;
                let rp = f(&xp);
                let rm = f(&xm);
                (0..m).map(|i| (rp[i] - rm[i]) / (2.0 * h)).collect()
            } else {
                let step = if x[j] + h <= hi { h } else { -h };
                xp[j] = x[j] + step;
                let rp = f(&xp);
                (0..m).map(|i| (rp[i] - r0[i]) / step).collect()
            }
        })
        .collect();
    DMatrix::from_fn(m, n, |i, j| columns[j][i])
}

fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.solve(b));
    }
    let svd = a.clone().svd(true, true);
    svd.solve(b, 1e-14 * svd.singular_values.max()).ok()
}

/// Bounded Levenberg-Marquardt on the weighted residual function `f`.
///
/// Deterministic for identical inputs: Jacobian columns are evaluated in
/// parallel but assembled in a fixed order.
pub fn nlls_solve<F>(f: F, params: &ParamSet, opts: &NllsOptions) -> Result<FitResult>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    let n = params.len();
    if n == 0 {
        return Err(Error::InvalidInput("no parameters to fit".into()));
    }
    let mut x = params.init.clone();
    params.clamp(&mut x);
    let mut r = eval(&f, &x, None)?;
    let m = r.len();
    if m < n {
        return Err(Error::InvalidInput(format!(
            "{m} residuals cannot determine {n} parameters"
        )));
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("residuals not finite at initial point".into()));
    }
    let scale: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let width = params.upper[j] - params.lower[j];
            let fallback = if width.is_finite() && width > 0.0 { 1e-3 * width } else { 1e-6 };
            if *v != 0.0 { v.abs() } else { fallback }
        })
        .collect();

    let mut cost = cost_of(&r);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    let mut jac = jacobian(&f, &x, &r, params, &scale);

    while iterations < opts.max_iter {
        iterations += 1;
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let mut grad = &jt * DVector::from_column_slice(&r);
        // Parameters on a bound with the descent direction pointing outward stay put.
        let active: Vec<bool> = (0..n)
            .map(|j| (x[j] <= params.lower[j] && grad[j] > 0.0) || (x[j] >= params.upper[j] && grad[j] < 0.0))
            .collect();
        for j in 0..n {
            if active[j] {
                grad[j] = 0.0;
            }
        }
        let max_diag = (0..n).map(|i| jtj[(i, i)]).fold(0.0, f64::max);
        if max_diag == 0.0 || grad.amax() <= 1e-15 * max_diag.sqrt() * (2.0 * cost).sqrt() {
            converged = true;
            break;
        }

        let mut accepted = false;
        for _ in 0..40 {
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12 * max_diag);
            }
            for j in (0..n).filter(|&j| active[j]) {
                a.row_mut(j).fill(0.0);
                a.column_mut(j).fill(0.0);
                a[(j, j)] = 1.0;
            }
            let Some(delta) = solve_spd(&a, &(-&grad)) else {
                lambda *= 10.0;
                continue;
            };
            let mut x_new: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
            params.clamp(&mut x_new);
            let r_new = eval(&f, &x_new, Some(m))?;
            let cost_new = cost_of(&r_new);
            if cost_new.is_finite() && cost_new <= cost {
                let rel_drop = (cost - cost_new) / cost.max(f64::MIN_POSITIVE);
                let small_step = x_new
                    .iter()
                    .zip(&x)
                    .enumerate()
                    .all(|(j, (a, b))| (a - b).abs() <= opts.xtol * (b.abs() + opts.xtol * scale[j]));
                let flat = rel_drop <= opts.ftol || cost_new == 0.0;
                x = x_new;
                r = r_new;
                cost = cost_new;
                lambda = (lambda / 3.0).max(1e-15);
                accepted = true;
                if flat || small_step {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
            if lambda > 1e16 {
                break;
            }
        }
        if !accepted {
            // No descent direction left at machine precision.
            converged = true;
        }
        jac = jacobian(&f, &x, &r, params, &scale);
        if converged {
            break;
        }
    }

    if !converged {
        return Err(Error::NotConverged {
            iterations,
            best_cost: cost,
            best_params: x,
        });
    }

    let rss = 2.0 * cost;
    let mut pinned = vec![false; n];
    for j in 0..n {
        let tol = 1e-9 * scale[j].max(x[j].abs());
        pinned[j] = (x[j] - params.lower[j]).abs() <= tol || (params.upper[j] - x[j]).abs() <= tol;
    }
    let free: Vec<usize> = (0..n).filter(|&j| !pinned[j]).collect();
    let dof = m.saturating_sub(free.len());
    let s2 = if opts.scale_covariance && dof > 0 {
        rss / dof as f64
    } else {
        1.0
    };
    let mut sigmas = vec![0.0; n];
    let mut warnings = Vec::new();
    if !free.is_empty() {
        let jf = DMatrix::from_fn(m, free.len(), |i, k| jac[(i, free[k])]);
        let jtj = jf.transpose() * &jf;
        match jtj.clone().cholesky() {
            Some(ch) => {
                let cov = ch.inverse();
                for (k, &j) in free.iter().enumerate() {
                    sigmas[j] = (cov[(k, k)] * s2).max(0.0).sqrt();
                }
            }
            None => {
                if !opts.allow_singular {
                    return Err(Error::SingularMatrix);
                }
                warnings.push("normal matrix singular; some parameters unidentifiable".into());
                let svd = jtj.svd(true, true);
                let cutoff = 1e-12 * svd.singular_values.max();
                let v = svd.v_t.as_ref().unwrap().transpose();
                for (k, &j) in free.iter().enumerate() {
                    let mut var = 0.0;
                    let mut undetermined = false;
                    for (s_idx, sv) in svd.singular_values.iter().enumerate() {
                        let weight = v[(k, s_idx)] * v[(k, s_idx)];
                        if *sv > cutoff {
                            var += weight / sv;
                        } else if weight > 1e-12 {
                            undetermined = true;
                        }
                    }
                    sigmas[j] = if undetermined { f64::INFINITY } else { (var * s2).sqrt() };
                }
            }
        }
    }
    for (j, p) in pinned.iter().enumerate() {
        if *p {
            warnings.push(format!("parameter {} pinned at bound", params.names[j]));
        }
    }

    Ok(FitResult {
        names: params.names.clone(),
        estimates: x,
        sigmas,
        rss,
        dof,
        converged,
        iterations,
        pinned,
        residuals: r,
        warnings,
    })
}

/// Nelder-Mead simplex minimization inside the box of `params`.
///
/// `steps` gives the initial simplex edge for each coordinate. Returns the
/// best vertex and its objective value.
pub fn nelder_mead<F>(
    objective: F,
    params: &ParamSet,
    steps: &[f64],
    max_iter: usize,
    ftol: f64,
) -> (Vec<f64>, f64)
where
    F: Fn(&[f64]) -> f64,
{
    let n = params.len();
    let project = |mut v: Vec<f64>| {
        params.clamp(&mut v);
        v
    };
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(project(params.init.clone()));
    for j in 0..n {
        let mut v = params.init.clone();
        v[j] += steps[j];
        if v[j] > params.upper[j] {
            v[j] = params.init[j] - steps[j];
        }
        simplex.push(project(v));
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| objective(v)).collect();

    for _ in 0..max_iter {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let (best, worst) = (values[0], values[n]);
        if (worst - best).abs() <= ftol * (best.abs() + worst.abs() + 1e-300) {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|v| v[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            project(
                centroid
                    .iter()
                    .zip(&simplex[n])
                    .map(|(c, w)| c + t * (c - w))
                    .collect(),
            )
        };
        let reflected = along(1.0);
        let fr = objective(&reflected);
        if fr < values[0] {
            let expanded = along(2.0);
            let fe = objective(&expanded);
            if fe < fr {
                simplex[n] = expanded;
                values[n] = fe;
            } else {
                simplex[n] = reflected;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = reflected;
            values[n] = fr;
        } else {
            let t = if fr < values[n] { 0.5 } else { -0.5 };
            let contracted = along(t);
            let fc = objective(&contracted);
            if fc < values[n].min(fr) {
                simplex[n] = contracted;
                values[n] = fc;
            } else {
                let best_vertex = simplex[0].clone();
                for i in 1..=n {
                    let shrunk: Vec<f64> = best_vertex
                        .iter()
                        .zip(&simplex[i])
                        .map(|(b, v)| b + 0.5 * (v - b))
                        .collect();
                    simplex[i] = project(shrunk);
                    values[i] = objective(&simplex[i]);
                }
            }
        }
    }
    let best = (0..=n)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .unwrap();
    (simplex[best].clone(), values[best])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn linear_model_exact() {
        let xs: Vec<f64> = (1..=10).map(f64::from).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        let mut p = ParamSet::new();
        p.free("p", 0.5);
        let fit = nlls_solve(
            |q| xs.iter().zip(&ys).map(|(x, y)| y - q[0] * x).collect(),
            &p,
            &NllsOptions::default(),
        )
        .unwrap();
        assert!((fit.value("p") - 2.0).abs() < 1e-12);
        assert!(fit.sigma("p") < 1e-10);
    }

    #[test]
    fn rosenbrock_valley() {
        let mut p = ParamSet::new();
        p.free("x", -1.2);
        p.free("y", 1.0);
        let fit = nlls_solve(
            |q| vec![10.0 * (q[1] - q[0] * q[0]), 1.0 - q[0]],
            &p,
            &NllsOptions { scale_covariance: false, ..Default::default() },
        )
        .unwrap();
        assert!((fit.estimates[0] - 1.0).abs() < 1e-8);
        assert!((fit.estimates[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn pinned_at_bound_flagged() {
        // best unconstrained slope is 2, bound caps it at 1.5
        let xs: Vec<f64> = (1..=10).map(f64::from).collect();
        let mut p = ParamSet::new();
        p.push("p", 1.0, 0.0, 1.5);
        let fit = nlls_solve(
            |q| xs.iter().map(|x| 2.0 * x - q[0] * x).collect(),
            &p,
            &NllsOptions::default(),
        )
        .unwrap();
        assert_eq!(fit.value("p"), 1.5);
        assert!(fit.is_pinned("p"));
        assert!(fit.warnings.iter().any(|w| w.contains("pinned")));
    }

    #[test]
    fn singular_problem_is_typed_error() {
        let mut p = ParamSet::new();
        p.free("a", 1.0);
        p.free("b", 1.0);
        let res = nlls_solve(
            |q| (0..5).map(|i| f64::from(i) - (q[0] + q[1])).collect(),
            &p,
            &NllsOptions::default(),
        );
        assert!(matches!(res, Err(Error::SingularMatrix)));
    }

    #[test]
    fn iteration_cap_reports_best() {
        let mut p = ParamSet::new();
        p.free("x", -1.2);
        p.free("y", 1.0);
        let res = nlls_solve(
            |q| vec![10.0 * (q[1] - q[0] * q[0]), 1.0 - q[0]],
            &p,
            &NllsOptions { max_iter: 2, ..Default::default() },
        );
        match res {
            Err(Error::NotConverged { best_params, .. }) => assert_eq!(best_params.len(), 2),
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }

    fn line_fit(xs: &[f64], ys: &[f64]) -> FitResult {
        let mut p = ParamSet::new();
        p.free("slope", 1.0);
        p.free("offset", 0.0);
        nlls_solve(
            |q| xs.iter().zip(ys).map(|(x, y)| y - q[0] * x - q[1]).collect(),
            &p,
            &NllsOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn reordering_invariance() {
        let xs: Vec<f64> = (0..30).map(|i| f64::from(i) * 0.3).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.7 * x + 1.1 + 0.05 * (x * 7.3).sin()).collect();
        let a = line_fit(&xs, &ys);
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.reverse();
        idx.swap(3, 17);
        let xr: Vec<f64> = idx.iter().map(|&i| xs[i]).collect();
        let yr: Vec<f64> = idx.iter().map(|&i| ys[i]).collect();
        let b = line_fit(&xr, &yr);
        for k in 0..2 {
            assert!((a.estimates[k] - b.estimates[k]).abs() < 1e-10);
            assert!((a.sigmas[k] - b.sigmas[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn sigma_scales_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..50).map(f64::from).collect();
        let k = 3.0;
        let mut ratios = Vec::new();
        for _ in 0..40 {
            let noise: Vec<f64> = xs.iter().map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let y1: Vec<f64> = xs.iter().zip(&noise).map(|(x, n)| 0.5 * x + 2.0 + 0.1 * n).collect();
            let yk: Vec<f64> = xs.iter().zip(&noise).map(|(x, n)| 0.5 * x + 2.0 + 0.1 * k * n).collect();
            ratios.push(line_fit(&xs, &yk).sigma("slope") / line_fit(&xs, &y1).sigma("slope"));
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((mean / k - 1.0).abs() < 0.1, "{mean}");
    }

    #[test]
    fn simplex_finds_quadratic_minimum() {
        let mut p = ParamSet::new();
        p.push("a", 0.0, -5.0, 5.0);
        p.push("b", 0.0, -5.0, 5.0);
        let (x, f) = nelder_mead(
            |v| (v[0] - 1.5).powi(2) + 3.0 * (v[1] + 0.5).powi(2),
            &p,
            &[0.5, 0.5],
            2000,
            1e-14,
        );
        assert!(f < 1e-10);
        assert!((x[0] - 1.5).abs() < 1e-4 && (x[1] + 0.5).abs() < 1e-4);
    }

    #[test]
    fn report_json_shape() {
        let fit = line_fit(&[0.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 3.1, 3.9]);
        let v: serde_json::Value = serde_json::from_str(&fit.to_json().unwrap()).unwrap();
        let first = &v["parameters"][0];
        assert_eq!(first["parameter"], "slope");
        assert!(first["estimate"].is_number() && first["sigma"].is_number());
    }
}
