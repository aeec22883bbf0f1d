//! Direct Green-function computations with `G1(z) = (X X^T - z)^{-1}` and
//! `G2(z) = (X^T X - z)^{-1}`: the centered quadratic forms `chi`, the
//! representations of the outlier eigenvalue and of the generalized overlap,
//! a contour-integral projector, and the operator identities of the resolvent.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricTridiagonal, LU};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::TrialSeed;
use crate::error::{Error, Result};
use crate::model::{Direction, SpikeModel};
use crate::predictor::{overlap_factor, overlap_form};
use crate::scalar_theory::{m_derivatives_real, theta, Transform, C64};

/// `(X X^T - z)^{-1}` for real `z` above the spectrum, through a Cholesky
/// factorization of `z - X X^T`.
pub struct RealResolvent {
    chol: Cholesky<f64, Dyn>,
    pub z: f64,
}

impl RealResolvent {
    pub fn new(gram: &DMatrix<f64>, z: f64) -> Result<Self> {
        let shifted = DMatrix::from_diagonal_element(gram.nrows(), gram.nrows(), z) - gram;
        let chol = Cholesky::new(shifted).ok_or_else(|| {
            Error::Singular(format!("z = {z} is not above the spectrum of X X^T; the rigidity event failed"))
        })?;
        Ok(RealResolvent { chol, z })
    }

    /// `G1(z) B` for a block of right-hand sides.
    pub fn apply(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        -self.chol.solve(b)
    }

    pub fn apply_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        -self.chol.solve(b)
    }
}

/// `(A - z)^{-1}` for complex `z` through an LU factorization.
pub struct ComplexResolvent {
    lu: LU<C64, Dyn, Dyn>,
    pub z: C64,
}

impl ComplexResolvent {
    pub fn new(a: &DMatrix<f64>, z: C64) -> Result<Self> {
        let n = a.nrows();
        let shifted = DMatrix::from_fn(n, n, |r, c| C64::new(a[(r, c)], 0.0) - if r == c { z } else { C64::new(0.0, 0.0) });
        let lu = LU::new(shifted);
        if !lu.is_invertible() {
            return Err(Error::Singular(format!("z = {z} is an eigenvalue")));
        }
        Ok(ComplexResolvent { lu, z })
    }

    pub fn apply(&self, b: &DVector<C64>) -> DVector<C64> {
        self.lu.solve(b).expect("factorization checked invertible")
    }
}

fn complexify(v: &DVector<f64>) -> DVector<C64> {
    v.map(|x| C64::new(x, 0.0))
}

/// Dense `G1(z)`; quadratic forms elsewhere go through solves instead.
pub fn green1(x: &DMatrix<f64>, z: C64) -> Result<DMatrix<C64>> {
    let res = ComplexResolvent::new(&(x * x.transpose()), z)?;
    let m = x.nrows();
    let mut out = DMatrix::zeros(m, m);
    for c in 0..m {
        let e = DVector::from_fn(m, |r, _| C64::new((r == c) as u8 as f64, 0.0));
        out.set_column(c, &res.apply(&e));
    }
    Ok(out)
}

/// Centered resolvent quadratic forms along the spike directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiStats {
    /// `v_i^T (G1 - m1) v_j`
    pub chi: DMatrix<f64>,
    /// `u^T (G1 - m1) v_i`
    pub chi_u: Vec<f64>,
    /// `v_i^T G1^2 v_i - m1'`
    pub chi_prime: Vec<f64>,
    pub z: f64,
}

impl ChiStats {
    /// `(chi_{i1}, .., chi_{ir}, chi_{u i}, chi'_{ii})`, not rescaled.
    pub fn vector(&self, i: usize) -> DVector<f64> {
        let r = self.chi.nrows();
        let mut out = DVector::zeros(r + 2);
        for j in 0..r {
            out[j] = self.chi[(i, j)];
        }
        out[r] = self.chi_u[i];
        out[r + 1] = self.chi_prime[i];
        out
    }
}

pub fn chi_stats_with(res: &RealResolvent, model: &SpikeModel, dir: &Direction) -> Result<ChiStats> {
    let z = res.z;
    let r = model.r();
    let m = model.m();
    let md = m_derivatives_real(Transform::M1, z, model.y(), 1)?;
    let mut b = DMatrix::zeros(m, r);
    for (j, sp) in model.spikes().iter().enumerate() {
        b.set_column(j, &sp.v);
    }
    let gv = res.apply(&b);
    let mut chi = DMatrix::zeros(r, r);
    for a in 0..r {
        for c in 0..r {
            chi[(a, c)] = model.v(a).dot(&gv.column(c)) - if a == c { md[0] } else { 0.0 };
        }
    }
    let chi_u = (0..r).map(|a| dir.u.dot(&gv.column(a)) - md[0] * dir.u.dot(model.v(a))).collect();
    let chi_prime = (0..r).map(|a| gv.column(a).norm_squared() - md[1]).collect();
    Ok(ChiStats { chi, chi_u, chi_prime, z })
}

pub fn chi_stats(x: &DMatrix<f64>, model: &SpikeModel, dir: &Direction, z: f64) -> Result<ChiStats> {
    let res = RealResolvent::new(&(x * x.transpose()), z)?;
    chi_stats_with(&res, model, dir)
}

/// `theta(d_i) - (d_i^2 - y) theta(d_i) chi_ii(theta(d_i))` from precomputed statistics.
pub fn rep_eigenvalue_from(model: &SpikeModel, i: usize, chi: &ChiStats) -> f64 {
    let (d, y) = (model.d(i), model.y());
    let t = theta(d, y);
    t - (d * d - y) * t * chi.chi[(i, i)]
}

/// `limit - w~_i l^T chi + chi^T A chi` with unscaled `chi`.
pub fn rep_overlap_from(model: &SpikeModel, dir: &Direction, i: usize, chi: &ChiStats) -> Result<f64> {
    let form = overlap_form(model, dir, i)?;
    let c = chi.vector(i);
    let b = form.beta.dot(&c);
    let (d, y) = (model.d(i), model.y());
    Ok(overlap_factor(d, y) * dir.coefficients[i].powi(2) - dir.w_tilde[i] * form.l.dot(&c) + form.g * b * b)
}

pub fn rep_eigenvalue(x: &DMatrix<f64>, model: &SpikeModel, dir: &Direction, i: usize) -> Result<f64> {
    model.require_outlier(i)?;
    let chi = chi_stats(x, model, dir, theta(model.d(i), model.y()))?;
    Ok(rep_eigenvalue_from(model, i, &chi))
}

pub fn rep_overlap(x: &DMatrix<f64>, model: &SpikeModel, dir: &Direction, i: usize) -> Result<f64> {
    model.require_outlier(i)?;
    let chi = chi_stats(x, model, dir, theta(model.d(i), model.y()))?;
    rep_overlap_from(model, dir, i, &chi)
}

/// Circle of radius `rho` around `d_i`, mapped through `theta`, with `nodes`
/// trapezoid points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContourSpec {
    pub center: f64,
    pub radius: f64,
    pub nodes: usize,
    /// Minimal allowed distance between an eigenvalue and the contour's real crossings.
    pub clearance: f64,
}

pub const MIN_CONTOUR_NODES: usize = 64;

impl ContourSpec {
    /// Radius `min((d_i - sqrt(y))/2, half the gap to other outliers)`, 256 nodes.
    ///
    /// The separation margin is not used as a bound: at moderate N the outlier
    /// fluctuates by more than `theta'(d_i) delta / 2` and would leave the contour.
    pub fn default_for(model: &SpikeModel, i: usize) -> Result<Self> {
        model.require_outlier(i)?;
        let d = model.d(i);
        let mut rho = (d - model.y().sqrt()) / 2.0;
        for j in 0..model.r0() {
            if j != i {
                rho = rho.min((d - model.d(j)).abs() / 2.0);
            }
        }
        Ok(ContourSpec { center: d, radius: rho, nodes: 256, clearance: 1e-6 })
    }

    pub fn with_nodes(self, nodes: usize) -> Self {
        ContourSpec { nodes, ..self }
    }
}

/// Number of eigenvalues of the symmetric tridiagonal `(diag, off)` below `x`.
fn sturm_count(diag: &DVector<f64>, off: &DVector<f64>, x: f64) -> usize {
    let mut count = 0;
    let mut q = 1.0f64;
    for k in 0..diag.len() {
        let b2 = if k == 0 { 0.0 } else { off[k - 1] * off[k - 1] };
        q = diag[k] - x - if k == 0 { 0.0 } else { b2 / q };
        if q == 0.0 {
            q = f64::EPSILON * (diag[k].abs() + x.abs()).max(f64::MIN_POSITIVE);
        }
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// `b^T (T - z)^{-1} b` for a real symmetric tridiagonal `T` and complex `z`
/// off the real axis. No pivoting is needed: every pivot has imaginary part
/// bounded away from zero.
fn tridiagonal_form(diag: &DVector<f64>, off: &DVector<f64>, b: &DVector<f64>, z: C64) -> C64 {
    let n = diag.len();
    let mut piv = Vec::with_capacity(n);
    let mut rhs = Vec::with_capacity(n);
    for k in 0..n {
        let (p, r) = if k == 0 {
            (C64::new(diag[0], 0.0) - z, C64::new(b[0], 0.0))
        } else {
            let l = off[k - 1] / piv[k - 1];
            (C64::new(diag[k], 0.0) - z - l * off[k - 1], C64::new(b[k], 0.0) - l * rhs[k - 1])
        };
        piv.push(p);
        rhs.push(r);
    }
    let mut x = vec![C64::new(0.0, 0.0); n];
    for k in (0..n).rev() {
        let upper = if k + 1 < n { x[k + 1] * off[k] } else { C64::new(0.0, 0.0) };
        x[k] = (rhs[k] - upper) / piv[k];
    }
    (0..n).map(|k| x[k] * b[k]).sum()
}

/// Tridiagonal reduction of a symmetric matrix, reusable across directions and contours.
pub struct Tridiagonal {
    basis: DMatrix<f64>,
    diag: DVector<f64>,
    off: DVector<f64>,
}

impl Tridiagonal {
    pub fn new(q: &DMatrix<f64>) -> Result<Self> {
        if q.nrows() != q.ncols() || q.nrows() == 0 {
            return Err(Error::Shape("contour projector needs a non-empty square matrix".into()));
        }
        if q.nrows() == 1 {
            return Ok(Tridiagonal {
                basis: DMatrix::identity(1, 1),
                diag: DVector::from_element(1, q[(0, 0)]),
                off: DVector::zeros(0),
            });
        }
        let (basis, diag, off) = SymmetricTridiagonal::new(q.clone()).unpack();
        Ok(Tridiagonal { basis, diag, off })
    }

    pub fn count_below(&self, x: f64) -> usize {
        sturm_count(&self.diag, &self.off, x)
    }

    /// `-(1 / 2 pi i) \oint w^T (Q - z)^{-1} w dz` over the image under `theta`
    /// of the circle in `spec`.
    pub fn contour_overlap(&self, w: &DVector<f64>, y: f64, spec: &ContourSpec) -> Result<f64> {
        if spec.nodes < MIN_CONTOUR_NODES {
            return Err(Error::Contour(format!("{} nodes requested, at least {MIN_CONTOUR_NODES} needed", spec.nodes)));
        }
        if !(spec.radius > 0.0 && spec.center - spec.radius > y.sqrt()) {
            return Err(Error::Contour(format!(
                "circle of radius {} around {} does not stay right of sqrt(y)",
                spec.radius, spec.center
            )));
        }
        let lo = theta(spec.center - spec.radius, y);
        let hi = theta(spec.center + spec.radius, y);
        let eps = spec.clearance;
        for edge in [lo, hi] {
            if self.count_below(edge + eps) != self.count_below(edge - eps) {
                return Err(Error::Contour(format!("an eigenvalue lies within {eps} of the contour at {edge}")));
            }
        }
        let enclosed = self.count_below(hi) - self.count_below(lo);
        if enclosed != 1 {
            return Err(Error::Contour(format!("contour encloses {enclosed} eigenvalues, expected exactly 1")));
        }
        let b = self.basis.tr_mul(w);
        let nodes = spec.nodes;
        let mut acc = C64::new(0.0, 0.0);
        for k in 0..nodes {
            // half-shifted nodes keep every evaluation point off the real axis
            let t = std::f64::consts::TAU * (k as f64 + 0.5) / nodes as f64;
            let step = C64::from_polar(spec.radius, t);
            let zeta = step + spec.center;
            let z = zeta + y / zeta + (1.0 + y);
            let dtheta = C64::new(1.0, 0.0) - zeta.powi(-2) * y;
            acc += tridiagonal_form(&self.diag, &self.off, &b, z) * dtheta * step;
        }
        Ok(-(acc / nodes as f64).re)
    }
}

pub fn contour_overlap(q: &DMatrix<f64>, model: &SpikeModel, dir: &Direction, i: usize, spec: &ContourSpec) -> Result<f64> {
    model.require_outlier(i)?;
    Tridiagonal::new(q)?.contour_overlap(&dir.w, model.y(), spec)
}

/// Maximal residuals of the resolvent operator identities over random unit pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResolventResiduals {
    /// `u^T (G1^l X X^T - G1^{l-1} - z G1^l) v`, l = 1
    pub left_l1: f64,
    /// same, l = 2
    pub left_l2: f64,
    /// `u^T (X^T G1^l X - G2^{l-1} - z G2^l) v`, l = 1
    pub right_l1: f64,
    /// same, l = 2
    pub right_l2: f64,
    /// relative gap between `u^T G1^2 v` and a central difference of `u^T G1 v`
    pub derivative_fd: f64,
}

impl ResolventResiduals {
    pub fn max_identity(&self) -> f64 {
        self.left_l1.max(self.left_l2).max(self.right_l1).max(self.right_l2)
    }
}

fn random_unit(len: usize, rng: &mut impl Rng) -> DVector<C64> {
    let v = DVector::from_fn(len, |_, _| rng.random::<f64>() - 0.5);
    let n = v.norm();
    complexify(&(v / n))
}

fn dotc(a: &DVector<C64>, b: &DVector<C64>) -> C64 {
    // bilinear, not sesquilinear: G is complex symmetric
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn resolvent_identities(x: &DMatrix<f64>, z: C64, pairs: usize, seed: u64) -> Result<ResolventResiduals> {
    let (m, n) = x.shape();
    let gram1 = x * x.transpose();
    let gram2 = x.transpose() * x;
    let g1 = ComplexResolvent::new(&gram1, z)?;
    let g2 = ComplexResolvent::new(&gram2, z)?;
    let h = 1e-5;
    let g1p = ComplexResolvent::new(&gram1, z + h)?;
    let g1m = ComplexResolvent::new(&gram1, z - h)?;
    let xc = x.map(|v| C64::new(v, 0.0));
    let mut rng = TrialSeed::new(seed, u64::MAX).rng();
    let mut out = ResolventResiduals::default();
    for _ in 0..pairs {
        let (u, v) = (random_unit(m, &mut rng), random_unit(m, &mut rng));
        let gu = g1.apply(&u);
        let gv = g1.apply(&v);
        let p = complexify(&(&gram1 * v.map(|c| c.re)));
        let gp = g1.apply(&p);
        let l1 = dotc(&u, &gp) - dotc(&u, &v) - z * dotc(&u, &gv);
        let l2 = dotc(&gu, &gp) - dotc(&u, &gv) - z * dotc(&gu, &gv);
        out.left_l1 = out.left_l1.max(l1.norm());
        out.left_l2 = out.left_l2.max(l2.norm());

        let fd = (dotc(&u, &g1p.apply(&v)) - dotc(&u, &g1m.apply(&v))) / (2.0 * h);
        let exact = dotc(&gu, &gv);
        out.derivative_fd = out.derivative_fd.max((fd - exact).norm() / exact.norm());

        let (a, b) = (random_unit(n, &mut rng), random_unit(n, &mut rng));
        let xa = &xc * &a;
        let xb = &xc * &b;
        let gxa = g1.apply(&xa);
        let gxb = g1.apply(&xb);
        let g2a = g2.apply(&a);
        let g2b = g2.apply(&b);
        let r1 = dotc(&xa, &gxb) - dotc(&a, &b) - z * dotc(&a, &g2b);
        let r2 = dotc(&gxa, &gxb) - dotc(&a, &g2b) - z * dotc(&g2a, &g2b);
        out.right_l1 = out.right_l1.max(r1.norm());
        out.right_l2 = out.right_l2.max(r2.norm());
    }
    Ok(out)
}
