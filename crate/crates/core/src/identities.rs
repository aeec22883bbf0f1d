//! Deterministic battery of analytic and numerical identities.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::{sample_x, TrialSeed};
use crate::error::Result;
use crate::model::{build_model, decompose_direction, EntryLaw, Spike, SpikeModel};
use crate::predictor::{coefficient_map, covariance_greens, covariance_theorem, max_relative_diff};
use crate::resolvent::resolvent_identities;
use crate::scalar_theory::{m1_real, m2_real, scalar_identity_residuals, theta, theta_facts, C64};

pub const SCALAR_TOL: f64 = 1e-10;
pub const FACTS_TOL: f64 = 1e-6;
pub const RESOLVENT_TOL: f64 = 1e-9;
pub const TWO_ROUTE_TOL: f64 = 1e-8;
/// Entries smaller than this fraction of the largest entry are compared absolutely.
pub const TWO_ROUTE_FLOOR: f64 = 1e-6;
pub const FACT_POINTS: [(f64, f64); 3] = [(2.0, 1.0), (3.0, 0.5), (1.5, 0.25)];
pub const KAPPA4_VALUES: [f64; 3] = [-2.0, 0.0, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatteryEntry {
    pub max_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatteryReport {
    pub checks: BTreeMap<String, BatteryEntry>,
    pub pass: bool,
}

impl BatteryReport {
    fn push(&mut self, name: &str, max_residual: f64, tolerance: f64) {
        let pass = max_residual <= tolerance;
        self.pass &= pass;
        self.checks.insert(name.to_string(), BatteryEntry { max_residual, tolerance, pass });
    }
}

/// Sixth-order central difference of order 1.
fn d1(f: &dyn Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (-f(x - 3.0 * h) + 9.0 * f(x - 2.0 * h) - 45.0 * f(x - h) + 45.0 * f(x + h) - 9.0 * f(x + 2.0 * h)
        + f(x + 3.0 * h))
        / (60.0 * h)
}

fn d2(f: &dyn Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (2.0 * f(x - 3.0 * h) - 27.0 * f(x - 2.0 * h) + 270.0 * f(x - h) - 490.0 * f(x) + 270.0 * f(x + h)
        - 27.0 * f(x + 2.0 * h)
        + 2.0 * f(x + 3.0 * h))
        / (180.0 * h * h)
}

fn d3(f: &dyn Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (-7.0 * f(x - 4.0 * h) + 72.0 * f(x - 3.0 * h) - 338.0 * f(x - 2.0 * h) + 488.0 * f(x - h)
        - 488.0 * f(x + h)
        + 338.0 * f(x + 2.0 * h)
        - 72.0 * f(x + 3.0 * h)
        + 7.0 * f(x + 4.0 * h))
        / (240.0 * h * h * h)
}

/// `[a1, a2, a3, a4, a1']` at `theta(d)` from values of `m1`, `m2` and finite differences.
pub fn facts_by_finite_differences(d: f64, y: f64) -> Result<[f64; 5]> {
    let z = theta(d, y);
    m1_real(z, y)?;
    let h = 1e-2;
    let m = |x: f64| m1_real(x, y).unwrap_or(f64::NAN);
    let n = |x: f64| m2_real(x, y).unwrap_or(f64::NAN);
    let zm = |x: f64| x * m(x);
    let a1f = |x: f64| m(x) * m(x) * d1(&zm, x, h);
    let a3f = |x: f64| x * n(x) * m(x) * m(x);
    let (m0, m1d) = (m(z), d1(&m, z, h));
    let a2 = m0 * m1d * d2(&zm, z, h) + m1d * m1d * d1(&zm, z, h) + m0 * m0 * d3(&zm, z, h) / 6.0;
    Ok([a1f(z), a2, a3f(z), d1(&a3f, z, h), d1(&a1f, z, h)])
}

/// Random orthonormal columns by Gram-Schmidt on Gaussian vectors.
fn random_orthonormal(m: usize, r: usize, rng: &mut impl Rng) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(r);
    while out.len() < r {
        let mut v = DVector::from_fn(m, |_, _| rng.random::<f64>() - 0.5);
        for _ in 0..2 {
            for q in &out {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 1e-6 {
            out.push(v / norm);
        }
    }
    out
}

/// A random well-separated model with `r` spikes, at least one supercritical.
pub fn random_model(rng: &mut impl Rng) -> Result<SpikeModel> {
    let m = rng.random_range(8..40);
    let n = rng.random_range(m / 2 + 1..3 * m);
    let y = m as f64 / n as f64;
    let r = rng.random_range(1..4usize);
    let mut d = y.sqrt() + 0.3 + rng.random::<f64>() * 2.0;
    let mut strengths = Vec::with_capacity(r);
    for _ in 0..r {
        strengths.push(d);
        d -= 0.3 + rng.random::<f64>();
        if d <= 0.05 {
            break;
        }
    }
    // localized or delocalized spike vectors
    let vs = if rng.random::<bool>() {
        random_orthonormal(m, strengths.len(), rng)
    } else {
        (0..strengths.len()).map(|k| DVector::from_fn(m, |i, _| (i == k) as u8 as f64)).collect()
    };
    // subcritical strengths too close to the threshold are nudged below it
    let root_y = y.sqrt();
    let spikes: Vec<Spike> = strengths
        .into_iter()
        .zip(vs)
        .map(|(d, v)| {
            let d = if d > root_y && d < root_y + 0.1 { root_y - 0.05 } else { d };
            Spike::new(d.max(0.01), v)
        })
        .collect();
    let mut spikes = spikes;
    spikes.sort_by(|a, b| b.d.total_cmp(&a.d));
    spikes.dedup_by(|a, b| (a.d - b.d).abs() < 0.1);
    build_model(m, n, spikes, 0.1)
}

/// Largest relative gap between the two covariance routes over `count` random configurations.
pub fn two_route_max_diff(count: usize, seed: u64) -> Result<f64> {
    let mut rng = TrialSeed::new(seed, 0).rng();
    let mut worst = 0.0f64;
    for k in 0..count {
        let model = random_model(&mut rng)?;
        let i = rng.random_range(0..model.r0());
        let w = DVector::from_fn(model.m(), |_, _| rng.random::<f64>() - 0.5);
        let w = if rng.random::<bool>() { w } else { model.v(i) * 0.6 + w.normalize() * 0.8 };
        let dir = decompose_direction(&model, &w.normalize())?;
        let kappa4 = KAPPA4_VALUES[k % KAPPA4_VALUES.len()];
        let thm = covariance_theorem(&model, &dir, i, kappa4)?.total();
        let grn = covariance_greens(&model, &dir, i, kappa4)?.mapped(&coefficient_map(&model, &dir, i)?).total();
        worst = worst.max(max_relative_diff(&thm, &grn, TWO_ROUTE_FLOOR));
    }
    Ok(worst)
}

pub fn run_battery(seed: u64) -> Result<BatteryReport> {
    let mut report = BatteryReport { checks: BTreeMap::new(), pass: true };

    let mut scalar = 0.0f64;
    for y in [0.1, 0.25, 0.5, 1.0, 2.0] {
        scalar = scalar.max(scalar_identity_residuals(y, 0.1, 12)?.max());
    }
    report.push("scalar_identities", scalar, SCALAR_TOL);

    let mut facts = 0.0f64;
    for (d, y) in FACT_POINTS {
        let t = theta_facts(d, y)?;
        let fd = facts_by_finite_differences(d, y)?;
        for (exact, approx) in [t.a1, t.a2, t.a3, t.a4, t.a1_prime].into_iter().zip(fd) {
            facts = facts.max(((exact - approx) / exact).abs());
        }
    }
    report.push("theta_facts_finite_difference", facts, FACTS_TOL);

    let mut resolvent = 0.0f64;
    for (k, (m, n)) in [(40usize, 80usize), (60, 60), (30, 90)].into_iter().enumerate() {
        let x: DMatrix<f64> = sample_x(m, n, &EntryLaw::gaussian(), TrialSeed::new(seed, k as u64));
        for z in [C64::new(1.5, 0.5), C64::new(6.0, 0.1), C64::new(-0.5, 0.0)] {
            resolvent = resolvent.max(resolvent_identities(&x, z, 8, seed)?.max_identity());
        }
    }
    report.push("resolvent_identities", resolvent, RESOLVENT_TOL);

    report.push("two_route_covariance", two_route_max_diff(50, seed)?, TWO_ROUTE_TOL);
    Ok(report)
}
