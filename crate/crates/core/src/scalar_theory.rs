//! Scalar functions of the Marchenko–Pastur theory and the spike-to-outlier map.
//!
//! `m1`/`m2` are the Stieltjes transforms of the two Marchenko–Pastur laws
//! (for `XX*` and `X*X` respectively). They are evaluated by solving their
//! self-consistent quadratics and selecting the Stieltjes root, never through a
//! radical with a hard-coded branch cut. Derivatives up to any order come from
//! implicit differentiation of the same quadratic.

use nalgebra::Complex;
use num_traits::Num;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

pub const DEFAULT_TAU_LOWER: f64 = 0.05;
pub const DEFAULT_TAU_UPPER: f64 = 20.0;

/// Ratio `y = M / N`, restricted to a compact interval `(tau_lower, tau_upper)`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AspectRatio(f64);

impl AspectRatio {
    pub fn new(y: f64) -> Result<Self> {
        Self::with_bounds(y, DEFAULT_TAU_LOWER, DEFAULT_TAU_UPPER)
    }

    pub fn with_bounds(y: f64, lower: f64, upper: f64) -> Result<Self> {
        if !(y.is_finite() && y > lower && y < upper) {
            return Err(Error::AspectRatio { y, lower, upper });
        }
        Ok(AspectRatio(y))
    }

    pub fn from_dims(m: usize, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidModel("sample count N must be positive".into()));
        }
        Self::new(m as f64 / n as f64)
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }

    pub fn edges(self) -> EdgePair {
        mp_edges(self.0)
    }
}

/// Endpoints of the Marchenko–Pastur support.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgePair {
    pub lambda_minus: f64,
    pub lambda_plus: f64,
}

pub fn mp_edges(y: f64) -> EdgePair {
    let s = y.sqrt();
    EdgePair {
        lambda_minus: (1.0 - s) * (1.0 - s),
        lambda_plus: (1.0 + s) * (1.0 + s),
    }
}

/// Which of the two Marchenko–Pastur Stieltjes transforms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Transform {
    /// `m1`, the limit of `M^{-1} tr (XX* - z)^{-1}`.
    M1,
    /// `m2`, the limit of `N^{-1} tr (X*X - z)^{-1}`.
    M2,
}

impl Transform {
    /// Coefficients `(alpha, beta)` of the self-consistent equation
    /// `alpha z m^2 + (z + beta) m + 1 = 0`.
    #[inline]
    fn coefficients(self, y: f64) -> (f64, f64) {
        match self {
            Transform::M1 => (y, y - 1.0),
            Transform::M2 => (1.0, 1.0 - y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Location {
    /// Real point strictly to the right of the bulk.
    OutsideRight,
    /// Point in the open upper half plane.
    Generic,
}

/// A validated spectral parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralPoint {
    pub z: C64,
    pub location: Location,
}

impl SpectralPoint {
    pub fn new(z: C64, y: f64) -> Result<Self> {
        if !(z.re.is_finite() && z.im.is_finite()) {
            return Err(Error::InvalidSpectralPoint(format!("{z}")));
        }
        if z.im > 0.0 {
            return Ok(SpectralPoint { z, location: Location::Generic });
        }
        if z.im == 0.0 && z.re > mp_edges(y).lambda_plus {
            return Ok(SpectralPoint { z, location: Location::OutsideRight });
        }
        Err(Error::InvalidSpectralPoint(format!("{z}")))
    }

    pub fn real(x: f64, y: f64) -> Result<Self> {
        Self::new(C64::new(x, 0.0), y)
    }
}

/// Stieltjes transform `m1(z)` or `m2(z)`.
pub fn stieltjes(kind: Transform, z: C64, y: f64) -> Result<C64> {
    let point = SpectralPoint::new(z, y)?;
    match point.location {
        Location::OutsideRight => stieltjes_real(kind, z.re, y).map(|m| C64::new(m, 0.0)),
        Location::Generic => stieltjes_upper(kind, z, y),
    }
}

pub fn m1(z: C64, y: f64) -> Result<C64> {
    stieltjes(Transform::M1, z, y)
}

pub fn m2(z: C64, y: f64) -> Result<C64> {
    stieltjes(Transform::M2, z, y)
}

/// Real fast path for `x > lambda_+`.
pub fn stieltjes_real(kind: Transform, x: f64, y: f64) -> Result<f64> {
    if !(x.is_finite() && x > mp_edges(y).lambda_plus) {
        return Err(Error::InvalidSpectralPoint(format!("{x} (real, not above lambda_+)")));
    }
    let (alpha, beta) = kind.coefficients(y);
    let a = alpha * x;
    let b = x + beta;
    let disc = b * b - 4.0 * a;
    if disc <= 0.0 {
        return Err(Error::BranchSelection(format!("{x}: non-positive discriminant {disc}")));
    }
    // b > 0 here, so the small-magnitude root is 1/q with q = -(b + sqrt)/2.
    // That root is the one with m ~ -1/x at infinity.
    let q = -0.5 * (b + disc.sqrt());
    Ok(1.0 / q)
}

pub fn m1_real(x: f64, y: f64) -> Result<f64> {
    stieltjes_real(Transform::M1, x, y)
}

pub fn m2_real(x: f64, y: f64) -> Result<f64> {
    stieltjes_real(Transform::M2, x, y)
}

fn stieltjes_upper(kind: Transform, z: C64, y: f64) -> Result<C64> {
    let (alpha, beta) = kind.coefficients(y);
    let a = z * alpha;
    let b = z + beta;
    let sq = (b * b - a * 4.0).sqrt();
    // Cancellation-free pair of roots: q/a and 1/q.
    let plus = b + sq;
    let minus = b - sq;
    let q = if plus.norm() >= minus.norm() { plus * -0.5 } else { minus * -0.5 };
    if q.norm() == 0.0 {
        return Err(Error::BranchSelection(format!("{z}")));
    }
    let roots = [q / a, q.inv()];
    let mut upper = roots.iter().filter(|r| r.im > 0.0);
    match (upper.next(), upper.next()) {
        (Some(r), None) => Ok(*r),
        _ => Err(Error::BranchSelection(format!("{z}: roots {} and {}", roots[0], roots[1]))),
    }
}

/// Derivatives `m^{(0)}, ..., m^{(order)}` by implicit differentiation of
/// `alpha z m^2 + (z + beta) m + 1 = 0`. Both coefficients are affine in z, so
/// every derivative is a rational function of the lower ones.
fn implicit_derivatives<T>(m0: T, z: T, alpha: f64, beta: f64, order: usize) -> Vec<T>
where
    T: Num + Copy + From<f64>,
{
    let a = T::from(alpha) * z;
    let b = z + T::from(beta);
    let denom = T::from(2.0) * a * m0 + b;
    let mut m = Vec::with_capacity(order + 1);
    m.push(m0);
    for k in 1..=order {
        let mut inner = T::zero();
        for j in 1..k {
            inner = inner + T::from(binomial(k, j)) * m[j] * m[k - j];
        }
        let mut square = T::zero();
        for j in 0..k {
            square = square + T::from(binomial(k - 1, j)) * m[j] * m[k - 1 - j];
        }
        let kk = T::from(k as f64);
        let num = a * inner + kk * T::from(alpha) * square + kk * m[k - 1];
        m.push(T::zero() - num / denom);
    }
    m
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `[m, m', ..., m^{(order)}]` at a complex spectral point.
pub fn m_derivatives(kind: Transform, z: C64, y: f64, order: usize) -> Result<Vec<C64>> {
    let m0 = stieltjes(kind, z, y)?;
    let (alpha, beta) = kind.coefficients(y);
    Ok(implicit_derivatives(m0, z, alpha, beta, order))
}

/// Real fast path of [`m_derivatives`].
pub fn m_derivatives_real(kind: Transform, x: f64, y: f64, order: usize) -> Result<Vec<f64>> {
    let m0 = stieltjes_real(kind, x, y)?;
    let (alpha, beta) = kind.coefficients(y);
    Ok(implicit_derivatives(m0, x, alpha, beta, order))
}

/// The k-th derivative alone.
pub fn m_derivative(kind: Transform, z: C64, y: f64, k: usize) -> Result<C64> {
    Ok(m_derivatives(kind, z, y, k)?[k])
}

/// Spike-to-outlier map `1 + d + y + y/d`.
#[inline]
pub fn theta(d: f64, y: f64) -> f64 {
    1.0 + d + y + y / d
}

#[inline]
pub fn theta_prime(d: f64, y: f64) -> f64 {
    1.0 - y / (d * d)
}

/// Inverse of [`theta`] on the supercritical branch `d > sqrt(y)`.
pub fn invert_theta(mu: f64, y: f64) -> Result<f64> {
    let edge = mp_edges(y).lambda_plus;
    if !(mu.is_finite() && mu > edge) {
        return Err(Error::Subcritical(format!(
            "eigenvalue {mu} is not above the bulk edge {edge}; no supercritical spike explains it"
        )));
    }
    let b = mu - 1.0 - y;
    let disc = (b * b - 4.0 * y).max(0.0);
    let d = 0.5 * (b + disc.sqrt());
    // One Newton polish step on theta(d) = mu keeps the round trip at machine precision.
    let d = d - (theta(d, y) - mu) / theta_prime(d, y);
    Ok(d)
}

fn require_supercritical(d: f64, y: f64) -> Result<()> {
    if !(d.is_finite() && d > y.sqrt()) {
        return Err(Error::Subcritical(format!("d = {d} does not exceed sqrt(y) = {}", y.sqrt())));
    }
    Ok(())
}

/// `(d + 1)(d^2 - y) / d`.
pub fn f_of(d: f64, y: f64) -> f64 {
    (d + 1.0) * (d * d - y) / d
}

/// `(d + 1)(d + y)(d^2 - y) / d`.
pub fn g_of(d: f64, y: f64) -> f64 {
    (d + 1.0) * (d + y) * (d * d - y) / d
}

/// `d_i (d_j + 1) / (d_i - d_j)`, the coupling of spike j into the eigenvector of spike i.
pub fn nu(d_i: f64, d_j: f64) -> Result<f64> {
    if d_i == d_j {
        return Err(Error::Separation(format!("nu undefined for equal spikes d = {d_i}")));
    }
    Ok(d_i * (d_j + 1.0) / (d_i - d_j))
}

/// Closed-form values at `z = theta(d)` of the scalar combinations that build
/// the Green-function covariance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaFacts {
    /// `m1^2 (z m1)'`
    pub a1: f64,
    /// `m1 m1' (z m1)'' + (m1')^2 (z m1)' + (z m1)''' m1^2 / 6`
    pub a2: f64,
    /// `z m2 m1^2`
    pub a3: f64,
    /// `(z m2 m1^2)'`
    pub a4: f64,
    /// `(m1^2 (z m1)')'`
    pub a1_prime: f64,
}

/// Rational closed forms in `(d, y)`.
pub fn theta_facts(d: f64, y: f64) -> Result<ThetaFacts> {
    require_supercritical(d, y)?;
    let s = d + y;
    let gap = d * d - y;
    let d2 = d * d;
    let d4 = d2 * d2;
    Ok(ThetaFacts {
        a1: 1.0 / (s * s * gap),
        a2: d4 * (4.0 * d4 + 4.0 * d2 * d * y - 3.0 * d2 * y + d2 * y * y + y * y + y * y * y)
            / (s.powi(4) * gap.powi(5)),
        a3: -1.0 / (d * s),
        a4: (2.0 * d + y) / (s * s * gap),
        a1_prime: -2.0 * d2 * (2.0 * d2 + d * y - y) / (s.powi(3) * gap.powi(3)),
    })
}

/// The same five combinations, composed from `m1`, `m2` and their derivatives
/// at an arbitrary real `z > lambda_+`.
pub fn resolvent_scalars(z: f64, y: f64) -> Result<ThetaFacts> {
    let m = m_derivatives_real(Transform::M1, z, y, 4)?;
    let n = m_derivatives_real(Transform::M2, z, y, 1)?;
    // derivatives of z m1
    let zm1 = m[1] * z + m[0];
    let zm2 = m[2] * z + 2.0 * m[1];
    let zm3 = m[3] * z + 3.0 * m[2];
    let zm4 = m[4] * z + 4.0 * m[3];
    let a1 = m[0] * m[0] * zm1;
    let a2 = m[0] * m[1] * zm2 + m[1] * m[1] * zm1 + m[0] * m[0] * zm3 / 6.0;
    let a1_prime = 2.0 * m[0] * m[1] * zm1 + m[0] * m[0] * zm2;
    let _ = zm4;
    // z m2 m1^2 and its derivative
    let a3 = z * n[0] * m[0] * m[0];
    let a4 = n[0] * m[0] * m[0] + z * n[1] * m[0] * m[0] + 2.0 * z * n[0] * m[0] * m[1];
    Ok(ThetaFacts { a1, a2, a3, a4, a1_prime })
}

/// Residual tolerances for the analytic identity battery.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityTolerances {
    pub identity: f64,
    pub rational: f64,
}

impl Default for IdentityTolerances {
    fn default() -> Self {
        IdentityTolerances { identity: 1e-12, rational: 1e-10 }
    }
}

/// `n x n` grid over `{ lambda_+ + tau <= E <= 1/tau, 0 < eta <= 1/tau }`.
pub fn domain_grid(y: f64, tau: f64, n: usize) -> Vec<C64> {
    let lo = mp_edges(y).lambda_plus + tau;
    let hi = 1.0 / tau;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        let e = if n == 1 { lo } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 };
        for k in 1..=n {
            let eta = hi * k as f64 / n as f64;
            out.push(C64::new(e, eta));
        }
    }
    out
}

/// Maximum residuals of the self-consistent equations and the m1/m2 identities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScalarResiduals {
    pub self_consistent_m1: f64,
    pub self_consistent_m2: f64,
    pub m1_from_m2: f64,
    pub trace_relation: f64,
    pub derivative_relation: f64,
    pub spike_identity: f64,
}

pub fn scalar_identity_residuals(y: f64, tau: f64, n: usize) -> Result<ScalarResiduals> {
    let mut r = ScalarResiduals::default();
    for z in domain_grid(y, tau, n) {
        let p = m_derivatives(Transform::M1, z, y, 1)?;
        let q = m_derivatives(Transform::M2, z, y, 1)?;
        let (m1v, m1d, m2v, m2d) = (p[0], p[1], q[0], q[1]);
        let one = C64::new(1.0, 0.0);
        let sc1 = z * y * m1v * m1v + (z - (1.0 - y)) * m1v + one;
        let sc2 = z * m2v * m2v + (z + (1.0 - y)) * m2v + one;
        let id1 = m1v + one / (z * (one + m2v));
        let id2 = one + z * m1v - (one + z * m2v) / y;
        let id3 = m1v * (m2v + z * m2d + one) - m1d / m1v;
        r.self_consistent_m1 = r.self_consistent_m1.max(sc1.norm());
        r.self_consistent_m2 = r.self_consistent_m2.max(sc2.norm());
        r.m1_from_m2 = r.m1_from_m2.max(id1.norm());
        r.trace_relation = r.trace_relation.max(id2.norm());
        r.derivative_relation = r.derivative_relation.max(id3.norm());
    }
    let root_y = y.sqrt();
    for d in [1.1 * root_y, 2.0, 5.0, 50.0] {
        if d <= root_y {
            continue;
        }
        let t = theta(d, y);
        let res = 1.0 + 1.0 / d + t * m1_real(t, y)?;
        r.spike_identity = r.spike_identity.max(res.abs());
    }
    Ok(r)
}

impl ScalarResiduals {
    pub fn max(&self) -> f64 {
        [
            self.self_consistent_m1,
            self.self_consistent_m2,
            self.m1_from_m2,
            self.trace_relation,
            self.derivative_relation,
            self.spike_identity,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fd_central(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn edges() {
        let e = mp_edges(1.0);
        assert_eq!((e.lambda_minus, e.lambda_plus), (0.0, 4.0));
        let e = mp_edges(0.25);
        assert_relative_eq!(e.lambda_minus, 0.25, epsilon = 1e-15);
        assert_relative_eq!(e.lambda_plus, 2.25, epsilon = 1e-15);
        let e = mp_edges(0.5);
        assert_relative_eq!(e.lambda_minus, 0.0857864376269, epsilon = 1e-12);
        assert_relative_eq!(e.lambda_plus, 2.9142135623731, epsilon = 1e-12);
    }

    #[test]
    fn edges_match_density_support() {
        // Integrate the absolutely continuous part of the first MP law over the
        // claimed support; for y <= 1 it must carry unit mass.
        let y = 0.5;
        let e = mp_edges(y);
        let n = 200_000;
        // substitution x = c + h cos(t) removes the square-root endpoints
        let c = 0.5 * (e.lambda_plus + e.lambda_minus);
        let h = 0.5 * (e.lambda_plus - e.lambda_minus);
        let mut mass = 0.0;
        for k in 0..n {
            let t = std::f64::consts::PI * (k as f64 + 0.5) / n as f64;
            let x = c + h * t.cos();
            let dens = ((e.lambda_plus - x) * (x - e.lambda_minus)).max(0.0).sqrt()
                / (2.0 * std::f64::consts::PI * x * y);
            mass += dens * h * t.sin() * std::f64::consts::PI / n as f64;
        }
        assert_relative_eq!(mass, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn aspect_ratio_bounds() {
        assert!(AspectRatio::new(0.5).is_ok());
        assert!(AspectRatio::new(0.01).is_err());
        assert!(AspectRatio::new(25.0).is_err());
        assert!(AspectRatio::new(f64::NAN).is_err());
        assert_eq!(AspectRatio::from_dims(200, 400).unwrap().get(), 0.5);
    }

    #[test]
    fn m_at_4_5_with_square_matrices() {
        // The Stieltjes root of 4.5 m^2 + 4.5 m + 1 = 0 is -1/3; -2/3 is the
        // spurious root (it violates 1 + 1/d + theta m1(theta) = 0 at d = 2).
        let m = m1_real(4.5, 1.0).unwrap();
        assert_relative_eq!(m, -1.0 / 3.0, epsilon = 1e-15);
        let m = m2_real(4.5, 1.0).unwrap();
        assert_relative_eq!(m, -1.0 / 3.0, epsilon = 1e-15);
        let mc = m1(C64::new(4.5, 0.0), 1.0).unwrap();
        assert_eq!(mc.im, 0.0);
        assert_relative_eq!(mc.re, -1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn stieltjes_tail() {
        for y in [0.3, 1.0, 4.0] {
            let z = 1e6;
            let m = m1_real(z, y).unwrap();
            assert!(((m + 1.0 / z) / (1.0 / z)).abs() < 1e-5);
            let mz = m1(C64::new(0.0, 1e6), y).unwrap();
            let expect = -C64::new(0.0, 1e6).inv();
            assert!(((mz - expect) / expect).norm() < 1e-5);
        }
    }

    #[test]
    fn rejects_points_on_or_left_of_the_bulk() {
        assert!(m1_real(3.0, 1.0).is_err());
        assert!(m1(C64::new(2.0, 0.0), 1.0).is_err());
        assert!(m1(C64::new(5.0, -1.0), 1.0).is_err());
        assert!(m1(C64::new(-1.0, 0.0), 1.0).is_err());
    }

    #[test]
    fn upper_half_plane_maps_to_upper_half_plane() {
        for z in domain_grid(0.7, 0.1, 20) {
            assert!(m1(z, 0.7).unwrap().im > 0.0);
            assert!(m2(z, 0.7).unwrap().im > 0.0);
        }
        // near the real axis to the left of the bulk too
        assert!(m1(C64::new(0.5, 1e-3), 0.7).unwrap().im > 0.0);
    }

    #[test]
    fn order_zero_derivative_is_the_value() {
        let z = C64::new(3.7, 0.4);
        let d = m_derivatives(Transform::M1, z, 0.8, 3).unwrap();
        assert_eq!(d[0], m1(z, 0.8).unwrap());
        let d = m_derivatives(Transform::M2, z, 0.8, 0).unwrap();
        assert_eq!(d[0], m2(z, 0.8).unwrap());
    }

    #[test]
    fn first_derivative_matches_central_difference() {
        let (z, y) = (4.5, 0.5);
        for kind in [Transform::M1, Transform::M2] {
            let exact = m_derivatives_real(kind, z, y, 1).unwrap()[1];
            let fd = fd_central(|x| stieltjes_real(kind, x, y).unwrap(), z, 1e-5);
            assert!(((fd - exact) / exact).abs() < 1e-6, "{kind:?}: {fd} vs {exact}");
        }
    }

    #[test]
    fn third_derivative_matches_fourth_order_stencil() {
        let (z, y) = (4.5, 1.0);
        let h = 1e-2;
        let f = |x: f64| m1_real(x, y).unwrap();
        // 4th-order accurate central stencil for the third derivative
        let fd = (-f(z + 3.0 * h) + 8.0 * f(z + 2.0 * h) - 13.0 * f(z + h) + 13.0 * f(z - h)
            - 8.0 * f(z - 2.0 * h)
            + f(z - 3.0 * h))
            / (8.0 * h * h * h);
        let exact = m_derivatives_real(Transform::M1, z, y, 3).unwrap()[3];
        assert!(((fd - exact) / exact).abs() < 1e-4, "{fd} vs {exact}");
    }

    #[test]
    fn complex_derivatives_match_finite_differences() {
        let y = 0.6;
        let z = C64::new(3.5, 0.7);
        let h = 1e-4;
        let d = m_derivatives(Transform::M2, z, y, 2).unwrap();
        let f = |w: C64| m2(w, y).unwrap();
        let fd1 = (f(z + h) - f(z - h)) / (2.0 * h);
        let fd2 = (f(z + h) - f(z) * 2.0 + f(z - h)) / (h * h);
        assert!(((fd1 - d[1]) / d[1]).norm() < 1e-7);
        assert!(((fd2 - d[2]) / d[2]).norm() < 1e-5);
    }

    #[test]
    fn theta_values() {
        assert_eq!(theta(2.0, 1.0), 4.5);
        for y in [0.1f64, 0.5, 1.0, 3.0] {
            assert_relative_eq!(theta(y.sqrt(), y), mp_edges(y).lambda_plus, epsilon = 1e-14);
        }
        assert_relative_eq!(theta(3.0, 0.5), 14.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(theta(3.0, 0.5), (1.0 + 3.0) * (3.0 + 0.5) / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn theta_inverse() {
        assert_relative_eq!(invert_theta(4.5, 1.0).unwrap(), 2.0, epsilon = 1e-14);
        assert_relative_eq!(invert_theta(14.0 / 3.0, 0.5).unwrap(), 3.0, epsilon = 1e-14);
        assert!(matches!(invert_theta(4.0, 1.0), Err(Error::Subcritical(_))));
        assert!(invert_theta(1.0, 1.0).is_err());
    }

    #[test]
    fn f_g_nu() {
        assert_eq!(f_of(2.0, 1.0), 4.5);
        assert_eq!(g_of(2.0, 1.0), 13.5);
        assert_eq!(nu(2.0, 1.0).unwrap(), 4.0);
        assert!(matches!(nu(2.0, 2.0), Err(Error::Separation(_))));
    }

    #[test]
    fn theta_fact_values() {
        let t = theta_facts(2.0, 1.0).unwrap();
        assert_relative_eq!(t.a1, 1.0 / 27.0, epsilon = 1e-16);
        assert_relative_eq!(t.a3, -1.0 / 6.0, epsilon = 1e-16);
        assert_relative_eq!(t.a4, 5.0 / 27.0, epsilon = 1e-16);
        assert_relative_eq!(t.a1_prime, -8.0 / 81.0, epsilon = 1e-16);
        assert!(theta_facts(1.0, 1.0).is_err());
        assert!(theta_facts(0.5, 1.0).is_err());
    }

    /// Finite-difference oracle: build every fact from m1/m2 values only.
    fn facts_by_finite_differences(d: f64, y: f64) -> [f64; 5] {
        let z = theta(d, y);
        let h = 1e-2;
        let m = |x: f64| m1_real(x, y).unwrap();
        let n = |x: f64| m2_real(x, y).unwrap();
        let zm = |x: f64| x * m(x);
        let stencil = |f: &dyn Fn(f64) -> f64, x: f64, k: usize| -> f64 {
            // 6th-order central differences for orders 1..3
            match k {
                1 => (-f(x - 3.0 * h) + 9.0 * f(x - 2.0 * h) - 45.0 * f(x - h) + 45.0 * f(x + h)
                    - 9.0 * f(x + 2.0 * h)
                    + f(x + 3.0 * h))
                    / (60.0 * h),
                2 => (2.0 * f(x - 3.0 * h) - 27.0 * f(x - 2.0 * h) + 270.0 * f(x - h)
                    - 490.0 * f(x)
                    + 270.0 * f(x + h)
                    - 27.0 * f(x + 2.0 * h)
                    + 2.0 * f(x + 3.0 * h))
                    / (180.0 * h * h),
                3 => (-7.0 * f(x - 4.0 * h) + 72.0 * f(x - 3.0 * h) - 338.0 * f(x - 2.0 * h)
                    + 488.0 * f(x - h)
                    - 488.0 * f(x + h)
                    + 338.0 * f(x + 2.0 * h)
                    - 72.0 * f(x + 3.0 * h)
                    + 7.0 * f(x + 4.0 * h))
                    / (240.0 * h * h * h),
                _ => unreachable!(),
            }
        };
        let a1f = |x: f64| m(x) * m(x) * stencil(&zm, x, 1);
        let a3f = |x: f64| x * n(x) * m(x) * m(x);
        let m0 = m(z);
        let m1d = stencil(&m, z, 1);
        let a1 = a1f(z);
        let a2 = m0 * m1d * stencil(&zm, z, 2)
            + m1d * m1d * stencil(&zm, z, 1)
            + m0 * m0 * stencil(&zm, z, 3) / 6.0;
        let a3 = a3f(z);
        let a4 = stencil(&a3f, z, 1);
        let a1p = stencil(&a1f, z, 1);
        [a1, a2, a3, a4, a1p]
    }

    #[test]
    fn theta_facts_match_finite_difference_compositions() {
        for (d, y) in [(2.0, 1.0), (3.0, 0.5), (1.5, 0.25)] {
            let t = theta_facts(d, y).unwrap();
            let fd = facts_by_finite_differences(d, y);
            for (exact, approx) in [t.a1, t.a2, t.a3, t.a4, t.a1_prime].into_iter().zip(fd) {
                assert!(((exact - approx) / exact).abs() < 1e-6, "({d},{y}): {exact} vs {approx}");
            }
        }
    }

    #[test]
    fn composed_scalars_agree_with_rational_forms() {
        for (d, y) in [(2.0, 1.0), (3.0, 0.5), (1.5, 0.25), (0.9, 0.3), (7.0, 4.0)] {
            let t = theta_facts(d, y).unwrap();
            let c = resolvent_scalars(theta(d, y), y).unwrap();
            for (a, b) in [(t.a1, c.a1), (t.a2, c.a2), (t.a3, c.a3), (t.a4, c.a4), (t.a1_prime, c.a1_prime)] {
                assert!(((a - b) / a).abs() < 1e-10, "({d},{y}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn identity_battery_on_domain_grid() {
        for y in [0.25, 0.5, 1.0, 2.0] {
            let r = scalar_identity_residuals(y, 0.1, 20).unwrap();
            assert!(r.self_consistent_m1 < 1e-12, "{r:?}");
            assert!(r.self_consistent_m2 < 1e-12, "{r:?}");
            assert!(r.m1_from_m2 < 1e-10 && r.trace_relation < 1e-10 && r.derivative_relation < 1e-10, "{r:?}");
            assert!(r.spike_identity < 1e-12, "{r:?}");
        }
    }

    #[test]
    fn real_branch_negative_and_increasing() {
        for y in [0.2, 1.0, 3.0] {
            let edge = mp_edges(y).lambda_plus;
            let mut prev = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for k in 1..200 {
                let x = edge + 0.05 * k as f64;
                let (a, b) = (m1_real(x, y).unwrap(), m2_real(x, y).unwrap());
                assert!(a < 0.0 && b < 0.0);
                assert!(a > prev.0 && b > prev.1);
                prev = (a, b);
            }
        }
    }

    #[test]
    fn theta_round_trip_near_threshold() {
        for y in [0.1f64, 0.5, 1.0, 5.0] {
            for d in [y.sqrt() * (1.0 + 1e-6) + 1e-9, y.sqrt() * 1.01, 1.0, 2.0, 10.0, 1e3] {
                if d <= y.sqrt() {
                    continue;
                }
                let back = invert_theta(theta(d, y), y).unwrap();
                assert!(((back - d) / d).abs() < 1e-12 || (back - d).abs() < 1e-12 * d.max(1.0) * 1e3,
                    "d={d}, y={y}, back={back}");
            }
        }
    }
}
