//! Two-qubit polarisation states and analyzer projections.
//!
//! Basis order is `|HH>, |HV>, |VH>, |VV>`; the first qubit is the photon
//! analysed in Malta, the second the photon sent down the fibre to Sicily.
//! Analyzer angles are linear-polariser transmission axes (H = 0, V = pi/2,
//! D = pi/4, A = -pi/4), never half-wave-plate angles.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix2, Matrix4, SymmetricEigen, Vector4};
use num_complex::Complex64;
use thiserror::Error;

/// Tolerance for algebraic identities (hermiticity, trace, unitarity).
pub const ALGEBRA_TOL: f64 = 1e-12;
/// Tolerance for eigenvalue checks.
pub const EIGEN_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("density matrix is not Hermitian (max deviation {0:e})")]
    NotHermitian(f64),
    #[error("density matrix trace is {0}, expected 1")]
    BadTrace(f64),
    #[error("density matrix has negative eigenvalue {0:e}")]
    NotPositive(f64),
    #[error("matrix is not unitary (max deviation {0:e})")]
    NotUnitary(f64),
    #[error("parameter {name} = {value} outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
}

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Density matrix of the polarisation pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoQubitState {
    rho: Matrix4<Complex64>,
}

impl TwoQubitState {
    /// Validates hermiticity, unit trace and positivity.
    pub fn new(rho: Matrix4<Complex64>) -> Result<Self, StateError> {
        let herm = (rho - rho.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max);
        if herm > ALGEBRA_TOL {
            return Err(StateError::NotHermitian(herm));
        }
        let tr = rho.trace();
        if (tr.re - 1.0).abs() > ALGEBRA_TOL || tr.im.abs() > ALGEBRA_TOL {
            return Err(StateError::BadTrace(tr.re));
        }
        let min_eig = Self::min_eigenvalue_of(&rho);
        if min_eig < -EIGEN_TOL {
            return Err(StateError::NotPositive(min_eig));
        }
        Ok(Self { rho })
    }

    /// Pure state from an (unnormalised) amplitude vector.
    pub fn from_ket(ket: Vector4<Complex64>) -> Self {
        let norm = ket.norm();
        let psi = ket / Complex64::new(norm, 0.0);
        Self { rho: psi * psi.adjoint() }
    }

    /// Product state of two real linear polarisations at the given angles.
    pub fn product_linear(malta_angle: f64, sicily_angle: f64) -> Self {
        Self::from_ket(real_ket(malta_angle, sicily_angle).map(|x| Complex64::new(x, 0.0)))
    }

    pub fn maximally_mixed() -> Self {
        Self { rho: Matrix4::identity() * Complex64::new(0.25, 0.0) }
    }

    pub fn rho(&self) -> &Matrix4<Complex64> {
        &self.rho
    }

    pub fn trace(&self) -> f64 {
        self.rho.trace().re
    }

    pub fn purity(&self) -> f64 {
        (self.rho * self.rho).trace().re
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.rho).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    fn min_eigenvalue_of(rho: &Matrix4<Complex64>) -> f64 {
        SymmetricEigen::new(*rho).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// The source state `(|VV> - |HH>)/sqrt 2`.
pub fn bell_phi_minus() -> TwoQubitState {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    TwoQubitState::from_ket(Vector4::new(
        Complex64::new(-s, 0.0),
        ZERO,
        ZERO,
        Complex64::new(s, 0.0),
    ))
}

/// Isotropic noise: `v * rho + (1 - v) * I/4`.
pub fn werner_mix(state: &TwoQubitState, v: f64) -> Result<TwoQubitState, StateError> {
    check_unit("v", v)?;
    let mixed = TwoQubitState::maximally_mixed();
    Ok(TwoQubitState {
        rho: state.rho * Complex64::new(v, 0.0) + mixed.rho * Complex64::new(1.0 - v, 0.0),
    })
}

/// Suppresses correlations in the H/V basis by a factor `1 - strength` while
/// leaving D/A correlations untouched.
///
/// Implemented as an H/V flip of the Sicily photon with probability
/// `strength / 2`, i.e. dephasing in the D/A basis. Combined with
/// [`werner_mix`] this gives independent HV and DA visibilities:
/// `V_DA = v`, `V_HV = v * (1 - strength)`.
pub fn hv_dephasing(state: &TwoQubitState, strength: f64) -> Result<TwoQubitState, StateError> {
    check_unit("strength", strength)?;
    let x = kron2(&Matrix2::identity(), &pauli_x());
    let flipped = x * state.rho * x;
    let q = strength / 2.0;
    Ok(TwoQubitState {
        rho: state.rho * Complex64::new(1.0 - q, 0.0) + flipped * Complex64::new(q, 0.0),
    })
}

/// Noise parameters `(werner v, hv strength)` that reproduce the given
/// per-basis visibilities on the ideal source state.
pub fn noise_for_visibilities(v_hv: f64, v_da: f64) -> Result<(f64, f64), StateError> {
    check_unit("v_hv", v_hv)?;
    check_unit("v_da", v_da)?;
    if v_da == 0.0 {
        return Ok((0.0, 0.0));
    }
    let strength = 1.0 - v_hv / v_da;
    check_unit("v_hv / v_da", 1.0 - strength)?;
    Ok((v_da, strength))
}

/// Source state with both noise processes applied.
pub fn noisy_source(v_werner: f64, hv_strength: f64) -> Result<TwoQubitState, StateError> {
    werner_mix(&hv_dephasing(&bell_phi_minus(), hv_strength)?, v_werner)
}

fn check_unit(name: &'static str, value: f64) -> Result<(), StateError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(StateError::OutOfRange { name, value })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Port {
    Transmit,
    Reflect,
}

impl Port {
    pub fn index(self) -> usize {
        match self {
            Port::Transmit => 0,
            Port::Reflect => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Port::Transmit),
            1 => Some(Port::Reflect),
            _ => None,
        }
    }
}

/// One output port of a half-wave-plate + PBS analyzer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyzerSetting {
    angle: f64,
    pub port: Port,
}

impl AnalyzerSetting {
    pub fn new(angle: f64, port: Port) -> Self {
        Self { angle: normalize_angle(angle), port }
    }

    pub fn transmit(angle: f64) -> Self {
        Self::new(angle, Port::Transmit)
    }

    pub fn reflect(angle: f64) -> Self {
        Self::new(angle, Port::Reflect)
    }

    /// Analyzer orientation, normalised to `[0, pi)`.
    pub fn angle(&self) -> f64 {
        self.angle
    }

    /// Polarisation projected onto by this port.
    pub fn effective_angle(&self) -> f64 {
        match self.port {
            Port::Transmit => self.angle,
            Port::Reflect => normalize_angle(self.angle + FRAC_PI_2),
        }
    }
}

/// Maps any angle onto `[0, pi)`; a linear polariser is periodic in pi.
pub fn normalize_angle(angle: f64) -> f64 {
    let a = angle.rem_euclid(PI);
    if a >= PI {
        0.0
    } else {
        a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Malta,
    Sicily,
}

/// A single-photon polarisation transformation applied on one side.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUnitary {
    u: Matrix2<Complex64>,
    pub side: Side,
}

impl LocalUnitary {
    pub fn new(u: Matrix2<Complex64>, side: Side) -> Result<Self, StateError> {
        let dev = (u * u.adjoint() - Matrix2::identity())
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        if dev > ALGEBRA_TOL {
            return Err(StateError::NotUnitary(dev));
        }
        Ok(Self { u, side })
    }

    pub fn identity(side: Side) -> Self {
        Self { u: Matrix2::identity(), side }
    }

    /// Rotation of linear polarisation by `theta` (H -> cos theta H + sin theta V).
    pub fn rotation(theta: f64, side: Side) -> Self {
        let (s, c) = theta.sin_cos();
        Self {
            u: Matrix2::new(
                Complex64::new(c, 0.0),
                Complex64::new(-s, 0.0),
                Complex64::new(s, 0.0),
                Complex64::new(c, 0.0),
            ),
            side,
        }
    }

    /// General SU(2) element in the `U3(theta, phi, lambda)` parametrisation.
    pub fn from_euler(theta: f64, phi: f64, lambda: f64, side: Side) -> Self {
        let (s, c) = (theta / 2.0).sin_cos();
        Self {
            u: Matrix2::new(
                Complex64::new(c, 0.0),
                -Complex64::from_polar(s, lambda),
                Complex64::from_polar(s, phi),
                Complex64::from_polar(c, phi + lambda),
            ),
            side,
        }
    }

    pub fn matrix(&self) -> &Matrix2<Complex64> {
        &self.u
    }

    pub fn inverse(&self) -> Self {
        Self { u: self.u.adjoint(), side: self.side }
    }

    /// `self` applied after `first`; both must act on the same side.
    pub fn then(&self, first: &LocalUnitary) -> Self {
        debug_assert_eq!(self.side, first.side);
        Self { u: self.u * first.u, side: self.side }
    }

    /// Jones-vector image of a real linear polarisation.
    pub fn apply_to_linear(&self, angle: f64) -> (Complex64, Complex64) {
        let (s, c) = angle.sin_cos();
        let h = Complex64::new(c, 0.0);
        let v = Complex64::new(s, 0.0);
        (self.u[(0, 0)] * h + self.u[(0, 1)] * v, self.u[(1, 0)] * h + self.u[(1, 1)] * v)
    }
}

/// `rho -> (U x I) rho (U x I)^dagger` (Malta) or `(I x U) ...` (Sicily).
pub fn apply_local_unitary(state: &TwoQubitState, u: &LocalUnitary) -> Result<TwoQubitState, StateError> {
    let u = LocalUnitary::new(u.u, u.side)?;
    let full = match u.side {
        Side::Malta => kron2(&u.u, &Matrix2::identity()),
        Side::Sicily => kron2(&Matrix2::identity(), &u.u),
    };
    Ok(TwoQubitState { rho: full * state.rho * full.adjoint() })
}

/// Outcome probabilities `[p_tt, p_tr, p_rt, p_rr]` for Malta angle `a` and
/// Sicily angle `b` (first letter: Malta port).
pub fn joint_outcome_probs(state: &TwoQubitState, a: f64, b: f64) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (k, (da, db)) in [(0.0, 0.0), (0.0, FRAC_PI_2), (FRAC_PI_2, 0.0), (FRAC_PI_2, FRAC_PI_2)]
        .into_iter()
        .enumerate()
    {
        let v = real_ket(a + da, b + db);
        let mut p = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                p += v[i] * v[j] * state.rho[(i, j)].re;
            }
        }
        out[k] = p.clamp(0.0, 1.0);
    }
    out
}

/// `E = p_tt + p_rr - p_tr - p_rt`.
pub fn correlation_e_theory(state: &TwoQubitState, a: f64, b: f64) -> f64 {
    let [tt, tr, rt, rr] = joint_outcome_probs(state, a, b);
    tt + rr - tr - rt
}

/// `S = E(a1,b1) + E(a1,b2) + E(a2,b1) - E(a2,b2)`.
pub fn chsh_s_theory(state: &TwoQubitState, a1: f64, a2: f64, b1: f64, b2: f64) -> f64 {
    correlation_e_theory(state, a1, b1) + correlation_e_theory(state, a1, b2)
        + correlation_e_theory(state, a2, b1)
        - correlation_e_theory(state, a2, b2)
}

/// Angles `(a1, a2, b1, b2)` at which the ideal source saturates Tsirelson's bound.
pub const OPTIMAL_CHSH_ANGLES: (f64, f64, f64, f64) =
    (0.0, std::f64::consts::FRAC_PI_4, -std::f64::consts::FRAC_PI_8, std::f64::consts::FRAC_PI_8);

fn real_ket(a: f64, b: f64) -> Vector4<f64> {
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    Vector4::new(ca * cb, ca * sb, sa * cb, sa * sb)
}

fn pauli_x() -> Matrix2<Complex64> {
    Matrix2::new(ZERO, ONE, ONE, ZERO)
}

fn kron2(a: &Matrix2<Complex64>, b: &Matrix2<Complex64>) -> Matrix4<Complex64> {
    Matrix4::from_fn(|r, c| a[(r / 2, c / 2)] * b[(r % 2, c % 2)])
}

/// Estimates the inverse of an unknown channel rotation from the images of the
/// two mutually unbiased probe states H and D, as done when neutralising fibre
/// birefringence with a polarimeter.
///
/// `h_out` and `d_out` are the Stokes vectors measured after the channel.
/// The returned unitary maps them back onto H = (1,0,0) and D = (0,1,0).
pub fn compensation_from_probes(h_out: [f64; 3], d_out: [f64; 3], side: Side) -> LocalUnitary {
    // Gram-Schmidt the measured images into an orthonormal frame.
    let e1 = normalize3(h_out);
    let d_perp = sub3(d_out, scale3(e1, dot3(e1, d_out)));
    let e2 = normalize3(d_perp);
    let e3 = cross3(e1, e2);
    // R maps (1,0,0)->e1, (0,1,0)->e2, (0,0,1)->e3; compensation is R^T.
    let r_t = [e1, e2, e3];
    su2_from_rotation(r_t, side)
}

/// Stokes vector `(S1, S2, S3)` of a normalised Jones vector; H = (1,0,0), D = (0,1,0).
pub fn stokes(jones: (Complex64, Complex64)) -> [f64; 3] {
    let (h, v) = jones;
    let s1 = h.norm_sqr() - v.norm_sqr();
    let hv = h.conj() * v;
    [s1, 2.0 * hv.re, 2.0 * hv.im]
}

fn su2_from_rotation(r: [[f64; 3]; 3], side: Side) -> LocalUnitary {
    // Quaternion from rotation matrix (Shepperd's method).
    let tr = r[0][0] + r[1][1] + r[2][2];
    let (w, x, y, z) = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        (0.25 * s, (r[2][1] - r[1][2]) / s, (r[0][2] - r[2][0]) / s, (r[1][0] - r[0][1]) / s)
    } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
        let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
        ((r[2][1] - r[1][2]) / s, 0.25 * s, (r[0][1] + r[1][0]) / s, (r[0][2] + r[2][0]) / s)
    } else if r[1][1] > r[2][2] {
        let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
        ((r[0][2] - r[2][0]) / s, (r[0][1] + r[1][0]) / s, 0.25 * s, (r[1][2] + r[2][1]) / s)
    } else {
        let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
        ((r[1][0] - r[0][1]) / s, (r[0][2] + r[2][0]) / s, (r[1][2] + r[2][1]) / s, 0.25 * s)
    };
    // Stokes axes (S1, S2, S3) correspond to Pauli (Z, X, Y) in the H/V basis.
    // U = w I - i (x Z + y X + z Y)
    let i = Complex64::new(0.0, 1.0);
    let u = Matrix2::new(
        Complex64::new(w, 0.0) - i * x,
        -i * y - z,
        -i * y + z,
        Complex64::new(w, 0.0) + i * x,
    );
    LocalUnitary { u, side }
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn scale3(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize3(a: [f64; 3]) -> [f64; 3] {
    scale3(a, 1.0 / dot3(a, a).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_4, FRAC_PI_8, SQRT_2};

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn phi_minus_matrix_elements() {
        let rho = *bell_phi_minus().rho();
        let hh = 0;
        let vv = 3;
        assert_close(rho[(hh, hh)].re, 0.5, 1e-15);
        assert_close(rho[(vv, vv)].re, 0.5, 1e-15);
        assert_close(rho[(hh, vv)].re, -0.5, 1e-15);
        assert_close(rho[(vv, hh)].re, -0.5, 1e-15);
        for r in 0..4 {
            for c in 0..4 {
                if !matches!((r, c), (0, 0) | (3, 3) | (0, 3) | (3, 0)) {
                    assert_eq!(rho[(r, c)].norm(), 0.0);
                }
            }
        }
        let s = bell_phi_minus();
        assert_close(s.purity(), 1.0, ALGEBRA_TOL);
        assert_close(s.trace(), 1.0, ALGEBRA_TOL);
    }

    #[test]
    fn werner_endpoints() {
        let phi = bell_phi_minus();
        assert_eq!(werner_mix(&phi, 1.0).unwrap().rho(), phi.rho());
        let mixed = werner_mix(&phi, 0.0).unwrap();
        assert!((mixed.rho() - TwoQubitState::maximally_mixed().rho()).norm() < 1e-15);
        assert!(werner_mix(&phi, 1.01).is_err());
        assert!(werner_mix(&phi, -0.1).is_err());
    }

    #[test]
    fn werner_scales_correlation() {
        let w = werner_mix(&bell_phi_minus(), 0.941).unwrap();
        for (a, b) in [(0.0f64, 0.0f64), (0.3, -0.1), (1.0, 2.0)] {
            assert_close(correlation_e_theory(&w, a, b), 0.941 * (2.0 * (a + b)).cos(), 1e-12);
        }
        assert_close(correlation_e_theory(&w, 0.0, 0.0), 0.941, 1e-12);
    }

    #[test]
    fn unitary_identity_and_inverse() {
        let phi = bell_phi_minus();
        let id = apply_local_unitary(&phi, &LocalUnitary::identity(Side::Sicily)).unwrap();
        assert!((id.rho() - phi.rho()).norm() < 1e-15);
        let u = LocalUnitary::from_euler(0.7, 1.3, -0.4, Side::Malta);
        let back = apply_local_unitary(&apply_local_unitary(&phi, &u).unwrap(), &u.inverse()).unwrap();
        assert!((back.rho() - phi.rho()).iter().all(|z| z.norm() < 1e-12));
    }

    #[test]
    fn non_unitary_rejected() {
        let m = Matrix2::new(ONE, ONE, ZERO, ONE);
        assert!(matches!(LocalUnitary::new(m, Side::Sicily), Err(StateError::NotUnitary(_))));
    }

    #[test]
    fn sicily_rotation_45_kills_hv_correlation() {
        // Oracle: rotate the Sicily amplitude vector by hand and project.
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let (sn, cs) = FRAC_PI_4.sin_cos();
        // psi = (-|HH> + |VV>)/sqrt2; Sicily qubit H -> cH + sV, V -> -sH + cV
        let psi = [-s * cs, -s * sn, s * -sn, s * cs];
        let p_tt = psi[0] * psi[0];
        let p_tr = psi[1] * psi[1];
        let p_rt = psi[2] * psi[2];
        let p_rr = psi[3] * psi[3];
        let oracle = p_tt + p_rr - p_tr - p_rt;
        assert_close(oracle, 0.0, 1e-15);

        let phi = bell_phi_minus();
        assert_close(correlation_e_theory(&phi, 0.0, 0.0), 1.0, 1e-12);
        let rotated = apply_local_unitary(&phi, &LocalUnitary::rotation(FRAC_PI_4, Side::Sicily)).unwrap();
        assert_close(correlation_e_theory(&rotated, 0.0, 0.0), oracle, 1e-12);
    }

    #[test]
    fn joint_probs_examples() {
        let phi = bell_phi_minus();
        let p = joint_outcome_probs(&phi, 0.0, 0.0);
        for (x, y) in p.iter().zip([0.5, 0.0, 0.0, 0.5]) {
            assert_close(*x, y, 1e-12);
        }
        for p in [joint_outcome_probs(&phi, 0.0, FRAC_PI_4), joint_outcome_probs(&phi, FRAC_PI_8, FRAC_PI_8)] {
            for x in p {
                assert_close(x, 0.25, 1e-12);
            }
        }
        // analytic projection oracle: p_tt = cos^2(a+b)/2
        let (a, b) = (0.37, -1.1);
        assert_close(joint_outcome_probs(&phi, a, b)[0], (a + b).cos().powi(2) / 2.0, 1e-12);
    }

    #[test]
    fn correlation_examples() {
        let phi = bell_phi_minus();
        assert_close(correlation_e_theory(&phi, 0.0, 0.0), 1.0, 1e-12);
        assert_close(correlation_e_theory(&phi, FRAC_PI_8, FRAC_PI_8), 0.0, 1e-12);
    }

    #[test]
    fn chsh_examples() {
        let (a1, a2, b1, b2) = OPTIMAL_CHSH_ANGLES;
        assert_close(chsh_s_theory(&bell_phi_minus(), a1, a2, b1, b2), 2.0 * SQRT_2, 1e-9);
        assert_close(chsh_s_theory(&TwoQubitState::maximally_mixed(), 0.3, 1.0, -0.2, 2.0), 0.0, 1e-12);
        let v = 2.534 / (2.0 * SQRT_2);
        assert_close(v, 0.8960, 1e-4);
        let w = werner_mix(&bell_phi_minus(), 0.8960).unwrap();
        assert_close(chsh_s_theory(&w, a1, a2, b1, b2).abs(), 2.534, 1e-3);
    }

    #[test]
    fn two_parameter_noise_hits_both_visibilities() {
        let (v, p) = noise_for_visibilities(0.868, 0.941).unwrap();
        let state = noisy_source(v, p).unwrap();
        // HV envelope: Sicily at H, Malta scanned
        assert_close(correlation_e_theory(&state, 0.0, 0.0), 0.868, 1e-12);
        // DA envelope: Sicily at D, Malta at A
        assert_close(correlation_e_theory(&state, -FRAC_PI_4, FRAC_PI_4), 0.941, 1e-12);
        for (a, b) in [(0.1f64, 0.2f64), (1.0, -0.4)] {
            let expect = 0.868 * (2.0 * a).cos() * (2.0 * b).cos() - 0.941 * (2.0 * a).sin() * (2.0 * b).sin();
            assert_close(correlation_e_theory(&state, a, b), expect, 1e-12);
        }
        assert!(TwoQubitState::new(*state.rho()).is_ok());
    }

    #[test]
    fn analyzer_normalisation() {
        let s = AnalyzerSetting::transmit(-FRAC_PI_4);
        assert_close(s.angle(), 3.0 * FRAC_PI_4, 1e-15);
        let r = AnalyzerSetting::reflect(FRAC_PI_2 + 0.1);
        assert_close(r.angle(), FRAC_PI_2 + 0.1, 1e-15);
        assert_close(r.effective_angle(), 0.1, 1e-14);
        assert_close(AnalyzerSetting::transmit(PI).angle(), 0.0, 1e-15);
    }

    #[test]
    fn invalid_density_matrices_rejected() {
        let mut m = *bell_phi_minus().rho();
        m[(0, 1)] = Complex64::new(0.1, 0.0);
        assert!(matches!(TwoQubitState::new(m), Err(StateError::NotHermitian(_))));
        let m = *bell_phi_minus().rho() * Complex64::new(2.0, 0.0);
        assert!(matches!(TwoQubitState::new(m), Err(StateError::BadTrace(_))));
        let mut m = Matrix4::zeros();
        m[(0, 0)] = Complex64::new(1.5, 0.0);
        m[(1, 1)] = Complex64::new(-0.5, 0.0);
        assert!(matches!(TwoQubitState::new(m), Err(StateError::NotPositive(_))));
    }

    #[test]
    fn compensation_inverts_unknown_channel() {
        let channel = LocalUnitary::from_euler(1.1, -0.7, 2.3, Side::Sicily);
        let h_out = stokes(channel.apply_to_linear(0.0));
        let d_out = stokes(channel.apply_to_linear(FRAC_PI_4));
        let comp = compensation_from_probes(h_out, d_out, Side::Sicily);
        let total = comp.then(&channel);
        // total must be the identity up to a global phase
        let m = total.matrix();
        let phase = m[(0, 0)] / m[(0, 0)].norm();
        let id = m * phase.conj();
        assert!((id - Matrix2::identity()).iter().all(|z| z.norm() < 1e-10), "{id}");
        let phi = bell_phi_minus();
        let through = apply_local_unitary(&apply_local_unitary(&phi, &channel).unwrap(), &comp).unwrap();
        assert!((through.rho() - phi.rho()).iter().all(|z| z.norm() < 1e-10));
    }
}
