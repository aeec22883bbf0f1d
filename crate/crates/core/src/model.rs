//! Spiked population model `Sigma = I + sum_i d_i v_i v_i^T`, projection
//! directions, and the entry laws of the data matrix.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar_theory::AspectRatio;

pub const DEFAULT_DELTA: f64 = 0.1;
pub const ORTHONORMALITY_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Spike {
    pub d: f64,
    pub v: DVector<f64>,
}

impl Spike {
    pub fn new(d: f64, v: DVector<f64>) -> Self {
        Spike { d, v }
    }
}

/// A validated spiked model. Spikes are stored in decreasing order of `d`;
/// the first `r0` of them are supercritical (`d > sqrt(y)`).
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeModel {
    m: usize,
    n: usize,
    y: AspectRatio,
    spikes: Vec<Spike>,
    r0: usize,
    delta: f64,
}

pub fn build_model(m: usize, n: usize, spikes: Vec<Spike>, delta: f64) -> Result<SpikeModel> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidModel(format!("dimensions must be positive, got M={m}, N={n}")));
    }
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::InvalidModel(format!("separation margin must be positive, got {delta}")));
    }
    let y = AspectRatio::from_dims(m, n)?;
    let root_y = y.get().sqrt();
    for (k, s) in spikes.iter().enumerate() {
        if s.v.len() != m {
            return Err(Error::Shape(format!("spike {} has length {}, expected M={m}", k + 1, s.v.len())));
        }
        if !(s.d.is_finite() && s.d > 0.0) {
            return Err(Error::InvalidModel(format!("spike {} has non-positive strength {}", k + 1, s.d)));
        }
    }
    for w in spikes.windows(2) {
        if w[0].d <= w[1].d {
            return Err(Error::InvalidModel(format!(
                "spike strengths must be strictly decreasing, got {} then {}",
                w[0].d, w[1].d
            )));
        }
    }
    for (a, sa) in spikes.iter().enumerate() {
        for (b, sb) in spikes.iter().enumerate().skip(a) {
            let ip = sa.v.dot(&sb.v);
            let target = if a == b { 1.0 } else { 0.0 };
            if (ip - target).abs() > ORTHONORMALITY_TOL {
                return Err(Error::InvalidModel(format!(
                    "spike directions are not orthonormal: <v_{}, v_{}> = {ip}",
                    a + 1,
                    b + 1
                )));
            }
        }
    }
    let r0 = spikes.iter().take_while(|s| s.d > root_y).count();
    for (k, s) in spikes.iter().take(r0).enumerate() {
        if s.d < root_y + delta {
            return Err(Error::Separation(format!(
                "spike {} with d = {} lies within delta = {delta} of the threshold sqrt(y) = {root_y}",
                k + 1,
                s.d
            )));
        }
    }
    for w in spikes[..r0].windows(2) {
        if w[0].d - w[1].d < delta {
            return Err(Error::Separation(format!(
                "supercritical spikes {} and {} are closer than delta = {delta}",
                w[0].d, w[1].d
            )));
        }
    }
    Ok(SpikeModel { m, n, y, spikes, r0, delta })
}

impl SpikeModel {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn y(&self) -> f64 {
        self.y.get()
    }

    pub fn aspect_ratio(&self) -> AspectRatio {
        self.y
    }

    pub fn spikes(&self) -> &[Spike] {
        &self.spikes
    }

    pub fn r(&self) -> usize {
        self.spikes.len()
    }

    pub fn r0(&self) -> usize {
        self.r0
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn d(&self, i: usize) -> f64 {
        self.spikes[i].d
    }

    pub fn v(&self, i: usize) -> &DVector<f64> {
        &self.spikes[i].v
    }

    pub fn strengths(&self) -> Vec<f64> {
        self.spikes.iter().map(|s| s.d).collect()
    }

    /// Validate a 0-based outlier index.
    pub fn require_outlier(&self, i: usize) -> Result<()> {
        if i >= self.r0 {
            return Err(Error::Subcritical(format!(
                "spike index {} is not supercritical (r0 = {})",
                i + 1,
                self.r0
            )));
        }
        Ok(())
    }

    /// Same model with a different sample count.
    pub fn with_n(&self, n: usize) -> Result<SpikeModel> {
        build_model(self.m, n, self.spikes.clone(), self.delta)
    }

    /// Dense `Sigma`.
    pub fn sigma(&self) -> DMatrix<f64> {
        let mut s = DMatrix::identity(self.m, self.m);
        for sp in &self.spikes {
            s.ger(sp.d, &sp.v, &sp.v, 1.0);
        }
        s
    }

    /// Dense `Sigma^{1/2}`, assembled in the spike basis.
    pub fn sigma_sqrt(&self) -> DMatrix<f64> {
        let mut s = DMatrix::identity(self.m, self.m);
        for sp in &self.spikes {
            s.ger((1.0 + sp.d).sqrt() - 1.0, &sp.v, &sp.v, 1.0);
        }
        s
    }

    /// `Sigma^{1/2} A` without forming `Sigma^{1/2}`.
    pub fn apply_sigma_sqrt(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if a.nrows() != self.m {
            return Err(Error::Shape(format!("expected {} rows, got {}", self.m, a.nrows())));
        }
        let mut out = a.clone();
        for sp in &self.spikes {
            let proj = a.tr_mul(&sp.v);
            out.ger((1.0 + sp.d).sqrt() - 1.0, &sp.v, &proj, 1.0);
        }
        Ok(out)
    }
}

/// A unit direction `w` split along the spike basis: `w = sum_j c_j v_j + u`.
#[derive(Clone, Debug, PartialEq)]
pub struct Direction {
    pub w: DVector<f64>,
    pub coefficients: Vec<f64>,
    pub u: DVector<f64>,
    /// `c_j / sqrt(1 + d_j)`
    pub w_tilde: Vec<f64>,
}

pub fn decompose_direction(model: &SpikeModel, w: &DVector<f64>) -> Result<Direction> {
    if w.len() != model.m() {
        return Err(Error::Shape(format!("direction has length {}, expected M={}", w.len(), model.m())));
    }
    let norm = w.norm();
    if (norm - 1.0).abs() > ORTHONORMALITY_TOL {
        return Err(Error::InvalidDirection(format!("direction must have unit norm, got {norm}")));
    }
    let mut u = w.clone();
    let mut coefficients = Vec::with_capacity(model.r());
    let mut w_tilde = Vec::with_capacity(model.r());
    for sp in model.spikes() {
        let c = sp.v.dot(w);
        u.axpy(-c, &sp.v, 1.0);
        coefficients.push(c);
        w_tilde.push(c / (1.0 + sp.d).sqrt());
    }
    let dir = Direction { w: w.clone(), coefficients, u, w_tilde };
    let residual = (dir.recompose(model) - w).amax();
    if residual > ORTHONORMALITY_TOL {
        return Err(Error::InvalidDirection(format!("decomposition residual {residual}")));
    }
    Ok(dir)
}

impl Direction {
    pub fn recompose(&self, model: &SpikeModel) -> DVector<f64> {
        let mut w = self.u.clone();
        for (c, sp) in self.coefficients.iter().zip(model.spikes()) {
            w.axpy(*c, &sp.v, 1.0);
        }
        w
    }

    /// `Sigma^{-1/2} w`.
    pub fn w_tilde_vector(&self, model: &SpikeModel) -> DVector<f64> {
        let mut w = self.u.clone();
        for (c, sp) in self.w_tilde.iter().zip(model.spikes()) {
            w.axpy(*c, &sp.v, 1.0);
        }
        w
    }
}

/// Direction of a projection as written in configs: `"v_k"`, `"uniform"`,
/// `"perp"` (a fixed unit vector orthogonal to every spike) or explicit entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DirectionSpec {
    Named(String),
    Explicit(Vec<f64>),
}

impl DirectionSpec {
    pub fn spike(k: usize) -> Self {
        DirectionSpec::Named(format!("v_{k}"))
    }

    pub fn resolve(&self, model: &SpikeModel) -> Result<DVector<f64>> {
        let m = model.m();
        match self {
            DirectionSpec::Explicit(x) => {
                if x.len() != m {
                    return Err(Error::Shape(format!("direction has length {}, expected M={m}", x.len())));
                }
                Ok(DVector::from_column_slice(x))
            }
            DirectionSpec::Named(name) => match name.as_str() {
                "uniform" => Ok(DVector::from_element(m, 1.0 / (m as f64).sqrt())),
                "perp" => perpendicular_direction(model),
                other => {
                    let k = parse_index(other, "v_").ok_or_else(|| {
                        Error::InvalidDirection(format!(
                            "unknown direction {other:?}; expected v_k, uniform, perp or a list of floats"
                        ))
                    })?;
                    if k == 0 || k > model.r() {
                        return Err(Error::InvalidDirection(format!(
                            "direction {other} refers to a spike that does not exist (r = {})",
                            model.r()
                        )));
                    }
                    Ok(model.v(k - 1).clone())
                }
            },
        }
    }
}

impl std::fmt::Display for DirectionSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DirectionSpec::Named(s) => f.write_str(s),
            DirectionSpec::Explicit(x) => write!(f, "explicit[{}]", x.len()),
        }
    }
}

fn parse_index(s: &str, prefix: &str) -> Option<usize> {
    s.strip_prefix(prefix)?.parse().ok()
}

/// Normalized projection of the all-ones vector onto the orthogonal
/// complement of the spikes; falls back to coordinate vectors if that vanishes.
fn perpendicular_direction(model: &SpikeModel) -> Result<DVector<f64>> {
    let m = model.m();
    let project = |mut x: DVector<f64>| {
        for sp in model.spikes() {
            let c = sp.v.dot(&x);
            x.axpy(-c, &sp.v, 1.0);
        }
        x
    };
    let candidates =
        std::iter::once(DVector::from_element(m, 1.0)).chain((0..m).map(|k| DVector::from_fn(m, |i, _| (i == k) as u8 as f64)));
    for c in candidates {
        let p = project(c);
        let norm = p.norm();
        if norm > 1e-6 {
            return Ok(p / norm);
        }
    }
    Err(Error::InvalidDirection("no direction orthogonal to every spike exists (r = M)".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpikeVectorSpec {
    Named(String),
    Explicit(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeSpec {
    pub d: f64,
    pub v: SpikeVectorSpec,
}

/// JSON form of a model: `{"M", "N", "spikes": [{"d", "v"}], "delta"}` with
/// `v` either `"e_k"`, `"uniform"` or explicit entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub spikes: Vec<SpikeSpec>,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

impl ModelSpec {
    pub fn build(&self) -> Result<SpikeModel> {
        let m = self.m;
        let mut spikes = Vec::with_capacity(self.spikes.len());
        for s in &self.spikes {
            let v = match &s.v {
                SpikeVectorSpec::Explicit(x) => DVector::from_column_slice(x),
                SpikeVectorSpec::Named(name) if name == "uniform" => {
                    DVector::from_element(m, 1.0 / (m as f64).sqrt())
                }
                SpikeVectorSpec::Named(name) => {
                    let k = parse_index(name, "e_")
                        .filter(|k| (1..=m).contains(k))
                        .ok_or_else(|| Error::InvalidModel(format!("bad spike vector {name:?}; expected e_k with 1 <= k <= M, uniform, or floats")))?;
                    DVector::from_fn(m, |i, _| if i + 1 == k { 1.0 } else { 0.0 })
                }
            };
            spikes.push(Spike::new(s.d, v));
        }
        build_model(self.m, self.n, spikes, self.delta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawKind {
    Gaussian,
    Rademacher,
    ThreePoint,
}

/// Zero-mean, unit-variance scalar law with declared third and fourth cumulants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryLaw {
    pub kind: LawKind,
    pub kappa3: f64,
    pub kappa4: f64,
    /// Atoms and probabilities of discrete laws (empty for gaussian).
    pub atoms: Vec<f64>,
    pub probabilities: Vec<f64>,
    #[serde(skip)]
    cumulative: Vec<f64>,
}

pub fn make_entry_law(kind: LawKind, kappa3: f64, kappa4: f64) -> Result<EntryLaw> {
    let infeasible = |reason: String| Error::InfeasibleCumulants { kappa3, kappa4, reason };
    let (atoms, probabilities) = match kind {
        LawKind::Gaussian => {
            if kappa3 != 0.0 || kappa4 != 0.0 {
                return Err(infeasible("the gaussian law has kappa3 = kappa4 = 0".into()));
            }
            (vec![], vec![])
        }
        LawKind::Rademacher => {
            if kappa3 != 0.0 || kappa4 != -2.0 {
                return Err(infeasible("the rademacher law has kappa3 = 0, kappa4 = -2".into()));
            }
            (vec![-1.0, 1.0], vec![0.5, 0.5])
        }
        LawKind::ThreePoint => three_point_atoms(kappa3, kappa4).map_err(infeasible)?,
    };
    Ok(EntryLaw::from_parts(kind, kappa3, kappa4, atoms, probabilities))
}

/// Atoms `{b, 0, a}` with `a + b = kappa3`, `ab = kappa3^2 - kappa4 - 3`.
/// Mean 0, variance 1 and the third/fourth moments then hold identically.
fn three_point_atoms(kappa3: f64, kappa4: f64) -> std::result::Result<(Vec<f64>, Vec<f64>), String> {
    if !(kappa3.is_finite() && kappa4.is_finite()) {
        return Err("cumulants must be finite".into());
    }
    // every law with unit variance has E x^4 >= (E x^3)^2 + 1; equality forces two atoms
    let excess = kappa4 + 2.0 - kappa3 * kappa3;
    if excess <= 0.0 {
        return Err(format!(
            "no law with mean 0 and variance 1 has kappa4 <= kappa3^2 - 2 (here kappa4 = {kappa4}, kappa3^2 - 2 = {}), \
             and equality only admits two-point laws",
            kappa3 * kappa3 - 2.0
        ));
    }
    let product = kappa3 * kappa3 - kappa4 - 3.0;
    let disc = (kappa3 * kappa3 - 4.0 * product).sqrt();
    // stable root pair
    let q = 0.5 * (kappa3 + if kappa3 >= 0.0 { disc } else { -disc });
    let (r1, r2) = if q != 0.0 { (q, product / q) } else { (0.5 * disc, -0.5 * disc) };
    let (a, b) = if r1 > r2 { (r1, r2) } else { (r2, r1) };
    let pa = 1.0 / (a * (a - b));
    let pb = -1.0 / (b * (a - b));
    let p0 = 1.0 - 1.0 / (excess + 1.0);
    Ok((vec![b, 0.0, a], vec![pb, p0, pa]))
}

impl EntryLaw {
    fn from_parts(kind: LawKind, kappa3: f64, kappa4: f64, atoms: Vec<f64>, probabilities: Vec<f64>) -> Self {
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = probabilities
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        if let Some(last) = cumulative.last_mut() {
            *last = f64::INFINITY;
        }
        EntryLaw { kind, kappa3, kappa4, atoms, probabilities, cumulative }
    }

    pub fn gaussian() -> Self {
        Self::from_parts(LawKind::Gaussian, 0.0, 0.0, vec![], vec![])
    }

    pub fn rademacher() -> Self {
        Self::from_parts(LawKind::Rademacher, 0.0, -2.0, vec![-1.0, 1.0], vec![0.5, 0.5])
    }

    /// Raw moment of order k computed from the atoms (exact for discrete laws).
    pub fn moment(&self, k: i32) -> f64 {
        match self.kind {
            LawKind::Gaussian => match k {
                0 => 1.0,
                k if k % 2 == 1 => 0.0,
                k => (1..k).step_by(2).map(|j| j as f64).product(),
            },
            _ => self.atoms.iter().zip(&self.probabilities).map(|(a, p)| p * a.powi(k)).sum(),
        }
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.kind {
            LawKind::Gaussian => rng.sample(StandardNormal),
            LawKind::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            LawKind::ThreePoint => {
                let u: f64 = rng.random();
                let k = self.cumulative.iter().position(|c| u < *c).unwrap_or(self.atoms.len() - 1);
                self.atoms[k]
            }
        }
    }
}

/// JSON form of an entry law: `{"kind": "three_point", "kappa3": .., "kappa4": ..}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LawSpec {
    pub kind: LawKind,
    #[serde(default)]
    pub kappa3: Option<f64>,
    #[serde(default)]
    pub kappa4: Option<f64>,
}

impl LawSpec {
    pub fn build(&self) -> Result<EntryLaw> {
        let (k3, k4) = match self.kind {
            LawKind::Gaussian => (0.0, 0.0),
            LawKind::Rademacher => (0.0, -2.0),
            LawKind::ThreePoint => (
                self.kappa3.ok_or_else(|| Error::Config("three_point law needs kappa3".into()))?,
                self.kappa4.ok_or_else(|| Error::Config("three_point law needs kappa4".into()))?,
            ),
        };
        make_entry_law(self.kind, self.kappa3.unwrap_or(k3), self.kappa4.unwrap_or(k4))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn e(m: usize, k: usize) -> DVector<f64> {
        DVector::from_fn(m, |i, _| if i == k { 1.0 } else { 0.0 })
    }

    #[test]
    fn single_spike_model() {
        let model = build_model(200, 400, vec![Spike::new(2.0, e(200, 0))], 0.1).unwrap();
        assert_eq!(model.y(), 0.5);
        assert_eq!(model.r0(), 1);
    }

    #[test]
    fn separation_violation() {
        let err = build_model(200, 400, vec![Spike::new(2.0, e(200, 0)), Spike::new(1.95, e(200, 1))], 0.1);
        assert!(matches!(err, Err(Error::Separation(_))));
    }

    #[test]
    fn subcritical_only() {
        let model = build_model(200, 400, vec![Spike::new(0.5, e(200, 0))], 0.1).unwrap();
        assert_eq!(model.r0(), 0);
        assert!(model.require_outlier(0).is_err());
    }

    #[test]
    fn near_threshold_rejected() {
        // sqrt(0.5) = 0.7071..; 0.75 is supercritical but within delta of the threshold
        let err = build_model(200, 400, vec![Spike::new(0.75, e(200, 0))], 0.1);
        assert!(matches!(err, Err(Error::Separation(_))));
    }

    #[test]
    fn rejects_bad_vectors_and_order() {
        let mut v = e(10, 0);
        v[1] = 1e-4;
        assert!(build_model(10, 20, vec![Spike::new(2.0, v)], 0.1).is_err());
        let err = build_model(10, 20, vec![Spike::new(2.0, e(10, 0)), Spike::new(3.0, e(10, 1))], 0.1);
        assert!(matches!(err, Err(Error::InvalidModel(_))));
        let err = build_model(10, 20, vec![Spike::new(3.0, e(10, 0)), Spike::new(2.0, e(10, 0))], 0.1);
        assert!(matches!(err, Err(Error::InvalidModel(_))));
        assert!(build_model(10, 20, vec![Spike::new(2.0, e(9, 0))], 0.1).is_err());
        assert!(matches!(build_model(10, 1000, vec![], 0.1), Err(Error::AspectRatio { .. })));
    }

    #[test]
    fn sigma_sqrt_squares_to_sigma() {
        let m = 12;
        let v1 = DVector::from_element(m, 1.0 / (m as f64).sqrt());
        let mut v2 = DVector::from_fn(m, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
        v2 /= v2.norm();
        let model = build_model(m, 24, vec![Spike::new(3.0, v1), Spike::new(1.5, v2)], 0.1).unwrap();
        let s = model.sigma_sqrt();
        assert!((&s * &s - model.sigma()).amax() < 1e-12);
        let eig = model.sigma().symmetric_eigenvalues();
        let mut ev: Vec<f64> = eig.iter().copied().collect();
        ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert_relative_eq!(ev[0], 4.0, epsilon = 1e-12);
        assert_relative_eq!(ev[1], 2.5, epsilon = 1e-12);
        assert!(ev[2..].iter().all(|x| (x - 1.0).abs() < 1e-12));
        let a = DMatrix::from_fn(m, 5, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        assert!((model.apply_sigma_sqrt(&a).unwrap() - &s * &a).amax() < 1e-12);
    }

    #[test]
    fn decompose_spike_and_perp() {
        let m = 8;
        let model = build_model(m, 16, vec![Spike::new(3.0, e(m, 0)), Spike::new(1.5, e(m, 1))], 0.1).unwrap();
        let d = decompose_direction(&model, &e(m, 0)).unwrap();
        assert_eq!(d.coefficients, vec![1.0, 0.0]);
        assert_eq!(d.u.amax(), 0.0);
        let w = e(m, 5);
        let d = decompose_direction(&model, &w).unwrap();
        assert_eq!(d.coefficients, vec![0.0, 0.0]);
        assert_eq!(d.u, w);
        let mut w = e(m, 0) + e(m, 1);
        w /= 2f64.sqrt();
        let d = decompose_direction(&model, &w).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert_relative_eq!(d.coefficients[0], h, epsilon = 1e-15);
        assert_relative_eq!(d.coefficients[1], h, epsilon = 1e-15);
        assert!(d.u.amax() < 1e-15);
        assert_relative_eq!(d.w_tilde[0], h / 2.0, epsilon = 1e-15);
        assert_relative_eq!(d.w_tilde[1], h / 2.5f64.sqrt(), epsilon = 1e-15);
        assert!(decompose_direction(&model, &(e(m, 0) * 2.0)).is_err());
    }

    #[test]
    fn direction_specs() {
        let m = 6;
        let model = ModelSpec {
            m,
            n: 12,
            spikes: vec![SpikeSpec { d: 2.0, v: SpikeVectorSpec::Named("e_1".into()) }],
            delta: 0.1,
        }
        .build()
        .unwrap();
        let p = DirectionSpec::Named("perp".into()).resolve(&model).unwrap();
        assert_relative_eq!(p.norm(), 1.0, epsilon = 1e-15);
        assert_eq!(p[0], 0.0);
        assert_eq!(DirectionSpec::spike(1).resolve(&model).unwrap(), e(m, 0));
        assert!(DirectionSpec::spike(2).resolve(&model).is_err());
        assert!(DirectionSpec::Named("v1".into()).resolve(&model).is_err());
        let u = DirectionSpec::Named("uniform".into()).resolve(&model).unwrap();
        assert_relative_eq!(u.norm(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn model_json() {
        let spec: ModelSpec =
            serde_json::from_str(r#"{"M": 4, "N": 8, "spikes": [{"d": 2, "v": "e_2"}, {"d": 0.3, "v": [1,0,0,0]}]}"#)
                .unwrap();
        let model = spec.build().unwrap();
        assert_eq!(model.delta(), DEFAULT_DELTA);
        assert_eq!(model.v(0)[1], 1.0);
        assert_eq!(model.r0(), 1);
        let bad: ModelSpec = serde_json::from_str(r#"{"M": 4, "N": 8, "spikes": [{"d": 2, "v": "e_9"}]}"#).unwrap();
        assert!(bad.build().is_err());
        assert!(serde_json::from_str::<ModelSpec>(r#"{"M": 4, "N": 8, "spikes": [], "extra": 1}"#).is_err());
    }

    fn cumulants(law: &EntryLaw) -> (f64, f64, f64, f64) {
        (law.moment(1), law.moment(2), law.moment(3), law.moment(4) - 3.0)
    }

    #[test]
    fn law_cumulants_exact() {
        let g = make_entry_law(LawKind::Gaussian, 0.0, 0.0).unwrap();
        assert_eq!(cumulants(&g), (0.0, 1.0, 0.0, 0.0));
        let r = make_entry_law(LawKind::Rademacher, 0.0, -2.0).unwrap();
        assert_eq!(cumulants(&r), (0.0, 1.0, 0.0, -2.0));
        assert!(make_entry_law(LawKind::Rademacher, 0.0, 0.0).is_err());
        for (k3, k4) in [(1.0, 1.0), (0.0, 0.0), (1.2, 0.0), (-0.7, 2.5), (2.0, 2.5), (0.0, -1.5)] {
            let t = make_entry_law(LawKind::ThreePoint, k3, k4).unwrap();
            let (m1, m2, m3, c4) = cumulants(&t);
            assert!(m1.abs() < 1e-12 && (m2 - 1.0).abs() < 1e-12, "{k3} {k4}");
            assert!((m3 - k3).abs() < 1e-12 && (c4 - k4).abs() < 1e-12, "{k3} {k4}: {m3} {c4}");
            assert!(t.probabilities.iter().all(|p| *p > 0.0 && *p < 1.0));
            assert_relative_eq!(t.probabilities.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn three_point_example_atoms() {
        let t = make_entry_law(LawKind::ThreePoint, 1.0, 1.0).unwrap();
        let s13 = 13f64.sqrt();
        assert_relative_eq!(t.atoms[0], (1.0 - s13) / 2.0, epsilon = 1e-14);
        assert_relative_eq!(t.atoms[2], (1.0 + s13) / 2.0, epsilon = 1e-14);
        assert_relative_eq!(t.probabilities[1], 2.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn infeasible_cumulants() {
        // kappa4 must exceed kappa3^2 - 2
        assert!(matches!(make_entry_law(LawKind::ThreePoint, 1.5, 0.0), Err(Error::InfeasibleCumulants { .. })));
        assert!(make_entry_law(LawKind::ThreePoint, 0.0, -2.0).is_err());
        assert!(make_entry_law(LawKind::ThreePoint, 0.0, -2.5).is_err());
        assert!(make_entry_law(LawKind::ThreePoint, 1.5, 0.26).is_ok());
    }

    #[test]
    fn sample_moments_within_five_standard_errors() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 2_000_000;
        for law in [
            EntryLaw::gaussian(),
            EntryLaw::rademacher(),
            make_entry_law(LawKind::ThreePoint, 1.0, 1.0).unwrap(),
        ] {
            let mut s = [0.0f64; 5];
            for _ in 0..n {
                let x = law.sample(&mut rng);
                let mut p = 1.0;
                for v in s.iter_mut().skip(1) {
                    p *= x;
                    *v += p;
                }
            }
            for k in 1..=4 {
                let mean = s[k] / n as f64;
                let se = ((law.moment(2 * k as i32) - law.moment(k as i32).powi(2)) / n as f64).sqrt();
                assert!(
                    (mean - law.moment(k as i32)).abs() <= 5.0 * se.max(1e-300),
                    "{:?} moment {k}: {mean} vs {}",
                    law.kind,
                    law.moment(k as i32)
                );
            }
        }
    }
}
