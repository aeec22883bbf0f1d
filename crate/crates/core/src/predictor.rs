//! Deterministic predictions for an outlier: first-order limits and the 3x3
//! limiting covariance of `(Upsilon, Theta, Lambda)`.
//!
//! The covariance is computed twice. [`covariance_theorem`] evaluates the
//! closed-form entries directly. [`covariance_greens`] builds the covariance of
//! the resolvent statistics `chi` and [`coefficient_map`] gives the linear maps
//! from `chi` to the three observables. The two routes share nothing but the
//! scalar functions, so each checks the other.

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Direction, SpikeModel};
use crate::scalar_theory::{f_of, g_of, nu, resolvent_scalars, theta, theta_facts, ThetaFacts};

/// Componentwise power sum `sum_k prod_j a_j[k]^{p_j}`.
pub fn moment_sum(factors: &[(&DVector<f64>, i32)]) -> f64 {
    let len = factors.first().map_or(0, |(a, _)| a.len());
    (0..len).map(|k| factors.iter().map(|(a, p)| a[k].powi(*p)).product::<f64>()).sum()
}

pub fn s4(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x.powi(4)).sum()
}

pub fn s11(a: &DVector<f64>, v: &DVector<f64>) -> f64 {
    a.dot(v)
}

pub fn s13(a: &DVector<f64>, v: &DVector<f64>) -> f64 {
    moment_sum(&[(a, 1), (v, 3)])
}

pub fn s22(a: &DVector<f64>, v: &DVector<f64>) -> f64 {
    moment_sum(&[(a, 2), (v, 2)])
}

pub fn s112(a: &DVector<f64>, b: &DVector<f64>, v: &DVector<f64>) -> f64 {
    moment_sum(&[(a, 1), (b, 1), (v, 2)])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShorthandVectors {
    pub varsigma: DVector<f64>,
    pub vhat: DVector<f64>,
}

pub fn shorthand_vectors(model: &SpikeModel, dir: &Direction, i: usize) -> Result<ShorthandVectors> {
    model.require_outlier(i)?;
    let y = model.y();
    let di = model.d(i);
    let mut inner = dir.u.clone();
    for (j, sp) in model.spikes().iter().enumerate() {
        if j != i {
            let coef = dir.coefficients[j] * di * (sp.d + 1.0).sqrt() / (di - sp.d);
            inner.axpy(coef, &sp.v, 1.0);
        }
    }
    let scale = 2.0 * (1.0 + di).sqrt() * (di * di - y) / (di * di * (di + y));
    let varsigma = inner * scale;
    let vhat_coef = dir.coefficients[i] * y * (1.0 + di) / (di * di * (di + y)) * (1.0 + di * (di + 1.0) / (di + y));
    let vhat = model.v(i) * vhat_coef;
    Ok(ShorthandVectors { varsigma, vhat })
}

/// `(theta(d_i), (d_i^2 - y) / (d_i (d_i + y)) <w, v_i>^2)`.
pub fn first_order(model: &SpikeModel, dir: &Direction, i: usize) -> Result<(f64, f64)> {
    model.require_outlier(i)?;
    let (d, y) = (model.d(i), model.y());
    Ok((theta(d, y), overlap_factor(d, y) * dir.coefficients[i].powi(2)))
}

/// Limit of `|<v_i, xi_i>|^2`.
pub fn overlap_factor(d: f64, y: f64) -> f64 {
    (d * d - y) / (d * (d + y))
}

/// Covariance of `(Upsilon, Theta, Lambda)`, split as `gaussian + kappa4 * quartic`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluctuationCovariance {
    pub gaussian: Matrix3<f64>,
    /// Coefficient of `kappa4`.
    pub quartic: Matrix3<f64>,
    pub kappa4: f64,
}

impl FluctuationCovariance {
    pub fn total(&self) -> Matrix3<f64> {
        self.gaussian + self.quartic * self.kappa4
    }
}

fn symmetric3(entries: [[f64; 3]; 3]) -> Matrix3<f64> {
    let mut m = Matrix3::from_fn(|r, c| entries[r.min(c)][r.max(c)]);
    m.fill_lower_triangle_with_upper_triangle();
    m
}

pub fn covariance_theorem(model: &SpikeModel, dir: &Direction, i: usize, kappa4: f64) -> Result<FluctuationCovariance> {
    let sh = shorthand_vectors(model, dir, i)?;
    let y = model.y();
    let d = model.d(i);
    let v = model.v(i);
    let wi = dir.coefficients[i];
    let gap = d * d - y;
    let s = d + y;
    let d2 = d * d;
    let vs = &sh.varsigma;
    let vh = &sh.vhat;
    let p = vh + vs;
    let vs_sq = vs.norm_squared();

    let lead = (1.0 + d).powi(2) * gap * gap / (d2 * d2);
    let rho = d2 / gap;
    let g = [
        [
            lead * 2.0 * d2 / gap,
            wi * 2.0 * y * (1.0 + d).powi(3) / (d * s * s),
            0.0,
        ],
        [
            0.0,
            rho * p.norm_squared()
                + wi * (d * y + d + 2.0 * y) / (s * s) * s11(vh, v)
                + wi * wi * y * (1.0 + d) * gap / (d2 * s.powi(3)),
            -0.5 * (d * s / gap).sqrt() * rho * vs_sq,
        ],
        [0.0, 0.0, d * s / (4.0 * gap) * rho * vs_sq],
    ];
    let k = [
        [
            lead * s4(v),
            (1.0 + d) * gap / d2 * s13(&p, v),
            -(d + 1.0) / (2.0 * d) * (s * gap / d).sqrt() * s13(vs, v),
        ],
        [
            0.0,
            s22(&p, v),
            -0.5 * (d * s / gap).sqrt() * (s22(vs, v) + s112(vs, vh, v)),
        ],
        [0.0, 0.0, d * s / (4.0 * gap) * s22(vs, v)],
    ];
    Ok(FluctuationCovariance { gaussian: symmetric3(g), quartic: symmetric3(k), kappa4 })
}

/// Covariance of the rescaled resolvent statistics
/// `sqrt(N) (chi_{i1}, .., chi_{ir}, chi_{u i}, chi'_{ii})`.
#[derive(Clone, Debug, PartialEq)]
pub struct GreensCovariance {
    pub gaussian: DMatrix<f64>,
    pub quartic: DMatrix<f64>,
    pub kappa4: f64,
    pub z: f64,
}

impl GreensCovariance {
    pub fn total(&self) -> DMatrix<f64> {
        &self.gaussian + &self.quartic * self.kappa4
    }

    pub fn quadratic_form(&self, c: &DVector<f64>) -> f64 {
        c.dot(&(self.total() * c))
    }

    /// `C V C^T` for the three coefficient vectors.
    pub fn mapped(&self, map: &CoefficientMap) -> FluctuationCovariance {
        let rows = [&map.upsilon, &map.theta, &map.lambda];
        let form = |m: &DMatrix<f64>| Matrix3::from_fn(|a, b| rows[a].dot(&(m * rows[b])));
        let mut gaussian = form(&self.gaussian);
        let mut quartic = form(&self.quartic);
        gaussian.fill_lower_triangle_with_upper_triangle();
        quartic.fill_lower_triangle_with_upper_triangle();
        FluctuationCovariance { gaussian, quartic, kappa4: self.kappa4 }
    }
}

/// Green-function covariance at `z = theta(d_i)`, using the closed-form scalars.
pub fn covariance_greens(model: &SpikeModel, dir: &Direction, i: usize, kappa4: f64) -> Result<GreensCovariance> {
    model.require_outlier(i)?;
    let (d, y) = (model.d(i), model.y());
    let facts = theta_facts(d, y)?;
    Ok(assemble_greens(model, dir, i, kappa4, theta(d, y), &facts))
}

/// Green-function covariance at an arbitrary real `z > lambda_+`.
pub fn covariance_greens_at(
    model: &SpikeModel,
    dir: &Direction,
    i: usize,
    kappa4: f64,
    z: f64,
) -> Result<GreensCovariance> {
    model.require_outlier(i)?;
    let facts = resolvent_scalars(z, model.y())?;
    Ok(assemble_greens(model, dir, i, kappa4, z, &facts))
}

fn assemble_greens(model: &SpikeModel, dir: &Direction, i: usize, kappa4: f64, z: f64, t: &ThetaFacts) -> GreensCovariance {
    let r = model.r();
    let n = r + 2;
    let (iu, ip) = (r, r + 1);
    let vi = model.v(i);
    let mut m = DMatrix::zeros(n, n);
    for j in 0..r {
        m[(j, j)] = t.a1;
    }
    m[(i, i)] = 2.0 * t.a1;
    m[(iu, iu)] = t.a1 * dir.u.norm_squared();
    m[(ip, ip)] = 2.0 * t.a2;
    m[(i, ip)] = t.a1_prime;
    m[(ip, i)] = t.a1_prime;

    let mut k = DMatrix::zeros(n, n);
    let vecs: Vec<&DVector<f64>> = model.spikes().iter().map(|s| &s.v).chain(std::iter::once(&dir.u)).collect();
    for (a, va) in vecs.iter().enumerate() {
        for (b, vb) in vecs.iter().enumerate().skip(a) {
            let val = s112(va, vb, vi) * t.a3 * t.a3;
            k[(a, b)] = val;
            k[(b, a)] = val;
        }
        let val = s13(va, vi) * t.a3 * t.a4;
        k[(a, ip)] = val;
        k[(ip, a)] = val;
    }
    k[(ip, ip)] = s4(vi) * t.a4 * t.a4;
    GreensCovariance { gaussian: m, quartic: k, kappa4, z }
}

/// Linear maps expressing `Upsilon`, `Theta` and `Lambda` in terms of the
/// rescaled resolvent statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientMap {
    pub upsilon: DVector<f64>,
    pub theta: DVector<f64>,
    pub lambda: DVector<f64>,
}

/// The vector `l` of the overlap expansion and the vector `beta` with
/// `A = g(d_i) beta beta^T`.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapForm {
    pub l: DVector<f64>,
    pub beta: DVector<f64>,
    pub g: f64,
}

impl OverlapForm {
    pub fn a_matrix(&self) -> DMatrix<f64> {
        &self.beta * self.beta.transpose() * self.g
    }
}

pub fn overlap_form(model: &SpikeModel, dir: &Direction, i: usize) -> Result<OverlapForm> {
    model.require_outlier(i)?;
    let r = model.r();
    let (d, y) = (model.d(i), model.y());
    let f = f_of(d, y);
    let wt = &dir.w_tilde;
    let mut l = DVector::zeros(r + 2);
    let mut beta = DVector::zeros(r + 2);
    for j in 0..r {
        if j == i {
            l[j] = 2.0 * d * (d + 1.0).powi(2) * wt[i];
        } else {
            let nu_j = nu(d, model.d(j))?;
            l[j] = 2.0 * f * nu_j * wt[j];
            beta[j] = nu_j * wt[j];
        }
    }
    l[r] = 2.0 * f;
    l[r + 1] = f * f * wt[i];
    beta[r] = 1.0;
    Ok(OverlapForm { l, beta, g: g_of(d, y) })
}

pub fn coefficient_map(model: &SpikeModel, dir: &Direction, i: usize) -> Result<CoefficientMap> {
    let form = overlap_form(model, dir, i)?;
    let (d, y) = (model.d(i), model.y());
    let mut upsilon = DVector::zeros(model.r() + 2);
    upsilon[i] = -(d * d - y) * theta(d, y);
    let theta_map = &form.l * (-1.0 / (1.0 + d).sqrt());
    let lambda = &form.beta * form.g.sqrt();
    Ok(CoefficientMap { upsilon, theta: theta_map, lambda })
}

/// Largest entrywise relative difference, with absolute floor `floor * max|entry|`
/// so that entries that vanish identically compare on the matrix scale.
pub fn max_relative_diff(a: &Matrix3<f64>, b: &Matrix3<f64>, floor: f64) -> f64 {
    let scale = a.amax().max(b.amax()) * floor;
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(scale).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

/// Everything the `predict` command reports for one outlier and direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub theta: f64,
    pub overlap_limit: f64,
    #[serde(rename = "V_theorem")]
    pub v_theorem: [[f64; 3]; 3],
    #[serde(rename = "V_greens_mapped")]
    pub v_greens_mapped: [[f64; 3]; 3],
    pub consistency_max_abs_diff: f64,
}

pub fn to_rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [0, 1, 2].map(|r| [0, 1, 2].map(|c| m[(r, c)]))
}

pub fn predict(model: &SpikeModel, dir: &Direction, i: usize, kappa4: f64) -> Result<Prediction> {
    let (theta_val, overlap_limit) = first_order(model, dir, i)?;
    let thm = covariance_theorem(model, dir, i, kappa4)?.total();
    let greens = covariance_greens(model, dir, i, kappa4)?.mapped(&coefficient_map(model, dir, i)?).total();
    Ok(Prediction {
        theta: theta_val,
        overlap_limit,
        v_theorem: to_rows(&thm),
        v_greens_mapped: to_rows(&greens),
        consistency_max_abs_diff: (thm - greens).amax(),
    })
}
