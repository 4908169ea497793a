//! Sinusoidal visibility fits and the CHSH curve built from them.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use nalgebra::{Matrix2, Matrix3, Vector3};
use num_complex::Complex64;
use serde::Serialize;

use super::AnalysisError;

const MAX_ITERATIONS: usize = 200;

/// `C(phi) = A (1 + V cos 2(phi - phi0))` fitted to coincidence counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VisibilityFit {
    pub amplitude: f64,
    pub visibility: f64,
    pub phase_rad: f64,
    /// Unweighted rms of `count - model`.
    pub residual_rms: f64,
    pub amplitude_err: f64,
    pub visibility_err: f64,
    pub phase_err: f64,
    pub chi2: f64,
    pub dof: usize,
    pub iterations: usize,
    /// All counts equal: no phase information.
    pub degenerate: bool,
}

impl VisibilityFit {
    pub fn eval(&self, phi: f64) -> f64 {
        self.amplitude * (1.0 + self.visibility * (2.0 * (phi - self.phase_rad)).cos())
    }

    /// Correlation implied by the fit, `V cos 2(phi - phi0)`.
    pub fn correlation(&self, phi: f64) -> f64 {
        self.visibility * (2.0 * (phi - self.phase_rad)).cos()
    }
}

struct Model<'a> {
    phi: &'a [f64],
    y: &'a [f64],
    w: Vec<f64>,
}

impl Model<'_> {
    fn f(p: &Vector3<f64>, phi: f64) -> f64 {
        p[0] * (1.0 + p[1] * (2.0 * (phi - p[2])).cos())
    }

    fn chi2(&self, p: &Vector3<f64>) -> f64 {
        self.phi.iter().zip(self.y).zip(&self.w).map(|((&x, &y), &w)| w * (y - Self::f(p, x)).powi(2)).sum()
    }

    /// `(J^T W J, J^T W r)`.
    fn normal_equations(&self, p: &Vector3<f64>) -> (Matrix3<f64>, Vector3<f64>) {
        let mut h = Matrix3::zeros();
        let mut g = Vector3::zeros();
        for ((&x, &y), &w) in self.phi.iter().zip(self.y).zip(&self.w) {
            let (s, c) = (2.0 * (x - p[2])).sin_cos();
            let j = Vector3::new(1.0 + p[1] * c, p[0] * c, 2.0 * p[0] * p[1] * s);
            h += w * j * j.transpose();
            g += w * (y - Self::f(p, x)) * j;
        }
        (h, g)
    }
}

/// Poisson-weighted Levenberg-Marquardt fit of `(A, V, phi0)`, seeded with
/// the frequency-2 Fourier component of the data.
pub fn fit_visibility(points: &[(f64, f64)]) -> Result<VisibilityFit, AnalysisError> {
    if points.len() < 6 {
        return Err(AnalysisError::TooFewPoints(points.len()));
    }
    let phi: Vec<f64> = points.iter().map(|p| p.0).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1).collect();
    if let Some(&bad) = y.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(AnalysisError::BadCount(bad));
    }
    let span = phi.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - phi.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(span >= PI * (1.0 - 1e-9)) {
        return Err(AnalysisError::NarrowSpan(span));
    }
    let n = y.len();
    let model = Model { phi: &phi, y: &y, w: y.iter().map(|v| 1.0 / v.max(1.0)).collect() };

    if y.iter().all(|v| *v == y[0]) {
        return Ok(degenerate_fit(&model, y[0]));
    }

    let mean = y.iter().sum::<f64>() / n as f64;
    let c = 2.0 / n as f64 * phi.iter().zip(&y).map(|(x, v)| v * (2.0 * x).cos()).sum::<f64>();
    let s = 2.0 / n as f64 * phi.iter().zip(&y).map(|(x, v)| v * (2.0 * x).sin()).sum::<f64>();
    let mut p = Vector3::new(mean, c.hypot(s) / mean.max(f64::MIN_POSITIVE), s.atan2(c) / 2.0);

    let mut chi2 = model.chi2(&p);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let (h, g) = model.normal_equations(&p);
        let mut damped = h;
        for i in 0..3 {
            damped[(i, i)] *= 1.0 + lambda;
        }
        let Some(step) = damped.lu().solve(&g) else {
            lambda *= 10.0;
            continue;
        };
        let trial = p + step;
        let trial_chi2 = model.chi2(&trial);
        if trial_chi2 <= chi2 {
            let small = (chi2 - trial_chi2) <= 1e-14 * chi2.max(1.0) || step.norm() <= 1e-13 * (1.0 + p.norm());
            p = trial;
            chi2 = trial_chi2;
            lambda = (lambda / 10.0).max(1e-12);
            if small {
                converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                // no downhill step left: at the minimum to machine precision
                converged = true;
                break;
            }
        }
    }

    if p[1] < 0.0 {
        p[1] = -p[1];
        p[2] += FRAC_PI_2;
    }
    p[2] = wrap_half_pi(p[2]);
    let (h, _) = model.normal_equations(&p);
    let cov = h.try_inverse();
    let err = |i: usize| cov.map_or(f64::INFINITY, |c| c[(i, i)].max(0.0).sqrt());
    let fit = VisibilityFit {
        amplitude: p[0],
        visibility: p[1].clamp(0.0, 1.0),
        phase_rad: p[2],
        residual_rms: rms(&model, &p),
        amplitude_err: err(0),
        visibility_err: err(1),
        phase_err: err(2),
        chi2,
        dof: n - 3,
        iterations,
        degenerate: false,
    };
    if converged {
        Ok(fit)
    } else {
        Err(AnalysisError::NoConvergence { iterations, last: Box::new(fit) })
    }
}

fn degenerate_fit(model: &Model, level: f64) -> VisibilityFit {
    // (A, V) block of the normal matrix at V = 0; phase is unconstrained
    let mut h = Matrix2::zeros();
    for (&x, &w) in model.phi.iter().zip(&model.w) {
        let j = nalgebra::Vector2::new(1.0, level * (2.0 * x).cos());
        h += w * j * j.transpose();
    }
    let cov = h.try_inverse();
    let err = |i: usize| cov.map_or(f64::INFINITY, |c| c[(i, i)].max(0.0).sqrt());
    VisibilityFit {
        amplitude: level,
        visibility: 0.0,
        phase_rad: 0.0,
        residual_rms: 0.0,
        amplitude_err: err(0),
        visibility_err: err(1),
        phase_err: f64::INFINITY,
        chi2: 0.0,
        dof: model.y.len() - 3,
        iterations: 0,
        degenerate: true,
    }
}

fn rms(model: &Model, p: &Vector3<f64>) -> f64 {
    let ss: f64 = model.phi.iter().zip(model.y).map(|(&x, &y)| (y - Model::f(p, x)).powi(2)).sum();
    (ss / model.y.len() as f64).sqrt()
}

/// Into `(-pi/2, pi/2]`.
fn wrap_half_pi(x: f64) -> f64 {
    let r = x.rem_euclid(PI);
    if r > FRAC_PI_2 {
        r - PI
    } else {
        r
    }
}

/// CHSH value as a function of the Malta angle, from one fit taken with
/// Sicily at `b1` and one with Sicily at `b2 = b1 - 45°`. Malta uses
/// `a1 = phi`, `a2 = phi - 45°`, and each fit supplies
/// `E(a, b_k) = V_k cos 2(a - phi0_k)`:
/// `S = E(a1,b1) + E(a1,b2) + E(a2,b1) - E(a2,b2)`.
pub fn s_curve(fit_b1: &VisibilityFit, fit_b2: &VisibilityFit, phi_grid: &[f64]) -> Vec<(f64, f64)> {
    phi_grid
        .iter()
        .map(|&phi| {
            let a2 = phi - FRAC_PI_4;
            (phi, fit_b1.correlation(phi) + fit_b2.correlation(phi) + fit_b1.correlation(a2) - fit_b2.correlation(a2))
        })
        .collect()
}

/// Closed-form extremum of [`s_curve`]: the smallest `phi` in `[0, pi)`
/// where `|S|` peaks, and the signed `S` there.
pub fn s_curve_extremum(fit_b1: &VisibilityFit, fit_b2: &VisibilityFit) -> (f64, f64) {
    // S(phi) = Re(z e^{2 i phi})
    let term = |f: &VisibilityFit, sign: f64| {
        f.visibility * Complex64::from_polar(1.0, -2.0 * f.phase_rad) * Complex64::new(1.0, -sign)
    };
    let z = term(fit_b1, 1.0) + term(fit_b2, -1.0);
    let phi_plus = (-z.arg() / 2.0).rem_euclid(PI);
    let phi_minus = (phi_plus + FRAC_PI_2).rem_euclid(PI);
    if phi_plus <= phi_minus {
        (phi_plus, z.norm())
    } else {
        (phi_minus, -z.norm())
    }
}

/// Standard error of the peak `|S|` from [`s_curve_extremum`], propagating
/// the visibility and phase errors of both fits as independent.
pub fn s_curve_extremum_err(fit_b1: &VisibilityFit, fit_b2: &VisibilityFit) -> f64 {
    let u = |f: &VisibilityFit, sign: f64| Complex64::from_polar(1.0, -2.0 * f.phase_rad) * Complex64::new(1.0, -sign);
    let (u1, u2) = (u(fit_b1, 1.0), u(fit_b2, -1.0));
    let z = fit_b1.visibility * u1 + fit_b2.visibility * u2;
    let norm = z.norm();
    if norm == 0.0 {
        return 0.0;
    }
    // d|z|/dx = Re(conj(z) dz/dx) / |z|
    let d = |dz: Complex64| (z.conj() * dz).re / norm;
    let minus_2i = Complex64::new(0.0, -2.0);
    let terms = [
        d(u1) * fit_b1.visibility_err,
        d(minus_2i * fit_b1.visibility * u1) * fit_b1.phase_err,
        d(u2) * fit_b2.visibility_err,
        d(minus_2i * fit_b2.visibility * u2) * fit_b2.phase_err,
    ];
    terms.iter().map(|t| t * t).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Vec<f64> {
        (0..18).map(|k| (20.0 * k as f64).to_radians()).collect()
    }

    #[test]
    fn exact_recovery() {
        let pts: Vec<(f64, f64)> = grid().into_iter().map(|x| (x, 100.0 * (1.0 + 0.941 * (2.0 * (x - 0.1)).cos()))).collect();
        let f = fit_visibility(&pts).unwrap();
        assert!((f.visibility - 0.941).abs() < 1e-6, "{f:?}");
        assert!((f.phase_rad - 0.1).abs() < 1e-6);
        assert!((f.amplitude - 100.0).abs() < 1e-6);
        assert!(f.residual_rms < 1e-6);
    }

    #[test]
    fn negative_phase_and_scaling() {
        let pts: Vec<(f64, f64)> = grid().into_iter().map(|x| (x, 40.0 * (1.0 + 0.5 * (2.0 * (x + 1.2)).cos()))).collect();
        let f = fit_visibility(&pts).unwrap();
        assert!((f.phase_rad + 1.2).abs() < 1e-6, "{f:?}");
        let scaled: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x, 7.0 * y)).collect();
        let g = fit_visibility(&scaled).unwrap();
        assert!((g.visibility - f.visibility).abs() < 1e-9);
        assert!((g.amplitude - 7.0 * f.amplitude).abs() < 1e-6);
    }

    #[test]
    fn flat_data_is_degenerate() {
        let pts: Vec<(f64, f64)> = grid().into_iter().map(|x| (x, 50.0)).collect();
        let f = fit_visibility(&pts).unwrap();
        assert!(f.degenerate);
        assert_eq!(f.visibility, 0.0);
        assert!(f.phase_err.is_infinite());
    }

    #[test]
    fn preconditions() {
        let few: Vec<(f64, f64)> = grid().into_iter().take(5).map(|x| (x, 1.0)).collect();
        assert!(matches!(fit_visibility(&few), Err(AnalysisError::TooFewPoints(5))));
        let narrow: Vec<(f64, f64)> = (0..8).map(|k| (0.1 * k as f64, 3.0)).collect();
        assert!(matches!(fit_visibility(&narrow), Err(AnalysisError::NarrowSpan(_))));
        let mut bad: Vec<(f64, f64)> = grid().into_iter().map(|x| (x, 1.0)).collect();
        bad[2].1 = -1.0;
        assert!(matches!(fit_visibility(&bad), Err(AnalysisError::BadCount(_))));
    }

    fn ideal(v: f64, phase_deg: f64) -> VisibilityFit {
        VisibilityFit {
            amplitude: 1.0,
            visibility: v,
            phase_rad: phase_deg.to_radians(),
            residual_rms: 0.0,
            amplitude_err: 0.0,
            visibility_err: 0.0,
            phase_err: 0.0,
            chi2: 0.0,
            dof: 15,
            iterations: 0,
            degenerate: false,
        }
    }

    #[test]
    fn s_curve_peaks() {
        // Sicily at D then at H
        let (phi, s) = s_curve_extremum(&ideal(1.0, -45.0), &ideal(1.0, 0.0));
        assert!((phi.to_degrees() - 67.5).abs() < 1e-9, "{}", phi.to_degrees());
        assert!((s.abs() - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        let grid: Vec<f64> = (0..1800).map(|k| (0.1 * k as f64).to_radians()).collect();
        let curve = s_curve(&ideal(0.941, -45.0), &ideal(0.868, 0.0), &grid);
        let best = curve.iter().cloned().fold((0.0f64, 0.0f64), |b, p| if p.1.abs() > b.1.abs() { p } else { b });
        assert!((best.1.abs() - 2f64.sqrt() * (0.868 + 0.941)).abs() < 1e-6);
        let (phi, _) = s_curve_extremum(&ideal(0.941, -41.0), &ideal(0.868, 4.0));
        assert!((phi.to_degrees() - 71.5).abs() < 1e-9);
    }

    #[test]
    fn s_peak_error_matches_finite_differences() {
        let mut f1 = ideal(0.93, -43.0);
        let mut f2 = ideal(0.87, 2.0);
        f1.visibility_err = 0.01;
        f1.phase_err = 0.02;
        f2.visibility_err = 0.015;
        f2.phase_err = 0.01;
        let peak = |a: &VisibilityFit, b: &VisibilityFit| s_curve_extremum(a, b).1.abs();
        let h = 1e-6;
        let mut var = 0.0;
        for k in 0..4 {
            let (mut a, mut b) = (f1.clone(), f2.clone());
            let err = match k {
                0 => { a.visibility += h; f1.visibility_err }
                1 => { a.phase_rad += h; f1.phase_err }
                2 => { b.visibility += h; f2.visibility_err }
                _ => { b.phase_rad += h; f2.phase_err }
            };
            var += ((peak(&a, &b) - peak(&f1, &f2)) / h * err).powi(2);
        }
        let e = s_curve_extremum_err(&f1, &f2);
        assert!((e - var.sqrt()).abs() < 1e-6 * e.max(1e-3), "{e} vs {}", var.sqrt());
    }
}
