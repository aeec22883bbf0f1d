//! Outlier detection, spike debiasing and plug-in confidence intervals.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::scalar_theory::{invert_theta, mp_edges, theta_prime, AspectRatio};

pub const DEFAULT_EDGE_MARGIN: f64 = 4.0;
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeEstimate {
    /// 1-based position in the descending spectrum.
    pub index: usize,
    pub mu_observed: f64,
    pub d_hat: f64,
    pub supercritical: bool,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub alpha: f64,
    pub se: f64,
}

/// 1-based indices of eigenvalues at or beyond `lambda_+ + c N^{-2/3}`.
/// `eigenvalues` must be sorted in decreasing order.
pub fn detect_spikes(eigenvalues: &[f64], m: usize, n: usize, edge_margin_c: f64) -> Result<Vec<usize>> {
    if eigenvalues.is_empty() {
        return Err(Error::Shape("no eigenvalues given".into()));
    }
    if eigenvalues.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::Shape("eigenvalues must be sorted in decreasing order".into()));
    }
    let y = AspectRatio::from_dims(m, n)?.get();
    let threshold = detection_threshold(y, n, edge_margin_c);
    Ok(eigenvalues.iter().take_while(|mu| **mu >= threshold).enumerate().map(|(k, _)| k + 1).collect())
}

pub fn detection_threshold(y: f64, n: usize, edge_margin_c: f64) -> f64 {
    mp_edges(y).lambda_plus + edge_margin_c * (n as f64).powf(-2.0 / 3.0)
}

/// Plug-in variance of the outlier fluctuation at strength `d`, for a spike
/// vector with fourth moment sum `s4`.
pub fn outlier_variance(d: f64, y: f64, kappa4: f64, s4: f64) -> f64 {
    let gap = d * d - y;
    let lead = (1.0 + d).powi(2) * gap * gap / d.powi(4);
    lead * (2.0 * d * d / gap + kappa4 * s4)
}

/// Debiased spike strength with a delta-method interval at level `1 - alpha`.
pub fn estimate_spike(mu: f64, m: usize, n: usize, kappa4: f64, s4: f64, alpha: f64) -> Result<SpikeEstimate> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha = {alpha} must lie in (0, 1)")));
    }
    let y = AspectRatio::from_dims(m, n)?.get();
    let d_hat = invert_theta(mu, y)?;
    let var = outlier_variance(d_hat, y, kappa4, s4);
    if !(var >= 0.0) {
        return Err(Error::InvalidModel(format!("plug-in variance {var} is negative; check kappa4 and s4")));
    }
    let se = (var / n as f64).sqrt() / theta_prime(d_hat, y).abs();
    let z = Normal::standard().inverse_cdf(1.0 - alpha / 2.0);
    Ok(SpikeEstimate {
        index: 1,
        mu_observed: mu,
        d_hat,
        supercritical: d_hat > y.sqrt(),
        ci_lower: d_hat - z * se,
        ci_upper: d_hat + z * se,
        alpha,
        se,
    })
}

/// Estimates for every detected outlier of a descending spectrum.
pub fn estimate_all(
    eigenvalues: &[f64],
    m: usize,
    n: usize,
    kappa4: f64,
    s4: f64,
    alpha: f64,
    edge_margin_c: f64,
) -> Result<Vec<SpikeEstimate>> {
    detect_spikes(eigenvalues, m, n, edge_margin_c)?
        .into_iter()
        .map(|k| {
            let mut est = estimate_spike(eigenvalues[k - 1], m, n, kappa4, s4, alpha)?;
            est.index = k;
            Ok(est)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapEstimate {
    pub value: f64,
    pub clamped: bool,
}

/// `|<w, v_i>|^2` recovered from the observed squared overlap.
pub fn debias_overlap(overlap_sq_observed: f64, d_hat: f64, y: f64) -> Result<OverlapEstimate> {
    if !(d_hat > y.sqrt()) {
        return Err(Error::Subcritical(format!("d_hat = {d_hat} does not exceed sqrt(y) = {}", y.sqrt())));
    }
    let factor = (d_hat * d_hat - y) / (d_hat * (d_hat + y));
    let raw = overlap_sq_observed / factor;
    let value = raw.clamp(0.0, 1.0);
    Ok(OverlapEstimate { value, clamped: value != raw })
}

/// Descending eigenvalues of `D D^T / N` for a raw `M x N` data matrix.
pub fn eigenvalues_from_data(data: &DMatrix<f64>) -> Result<Vec<f64>> {
    let (m, n) = data.shape();
    if m == 0 || n == 0 {
        return Err(Error::Shape("empty data matrix".into()));
    }
    let mut q = data * data.transpose() / n as f64;
    crate::ensemble::symmetrize(&mut q);
    let mut values: Vec<f64> = SymmetricEigen::new(q).eigenvalues.iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}
