//! Random data matrices, the sample covariance `Q = T X X^T T` with
//! `T = Sigma^{1/2}`, its top eigenpairs, and per-trial observables.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Direction, EntryLaw, SpikeModel};
use crate::predictor::first_order;

/// Below this dimension the full symmetric eigendecomposition is used directly.
const DENSE_EIGEN_MAX_DIM: usize = 64;
/// Residual tolerance `||Q xi - mu xi|| <= tol * ||Q||` for returned eigenpairs.
pub const EIGEN_RESIDUAL_TOL: f64 = 1e-8;
/// Overlaps `|<w, v_i>|` below this are treated as zero.
pub const ZERO_OVERLAP_TOL: f64 = 1e-8;

/// Identifies the random stream of one trial.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrialSeed {
    pub master_seed: u64,
    pub trial_index: u64,
}

impl TrialSeed {
    pub fn new(master_seed: u64, trial_index: u64) -> Self {
        TrialSeed { master_seed, trial_index }
    }

    /// ChaCha keyed by the master seed, on the stream numbered by the trial.
    pub fn rng(self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.trial_index);
        rng
    }
}

/// `M x N` matrix of i.i.d. entries distributed as `law / sqrt(N)`, filled
/// column by column.
pub fn sample_x(m: usize, n: usize, law: &EntryLaw, seed: TrialSeed) -> DMatrix<f64> {
    let mut rng = seed.rng();
    let scale = 1.0 / (n as f64).sqrt();
    let data: Vec<f64> = (0..m * n).map(|_| law.sample(&mut rng) * scale).collect();
    DMatrix::from_vec(m, n, data)
}

/// `Q = Sigma^{1/2} X X^T Sigma^{1/2}`, exactly symmetric.
pub fn build_q(model: &SpikeModel, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.nrows() != model.m() {
        return Err(Error::Shape(format!("X has {} rows, model has M = {}", x.nrows(), model.m())));
    }
    let y = model.apply_sigma_sqrt(x)?;
    let mut q = &y * y.transpose();
    symmetrize(&mut q);
    Ok(q)
}

pub(crate) fn symmetrize(q: &mut DMatrix<f64>) {
    let n = q.nrows();
    for c in 0..n {
        for r in c + 1..n {
            let avg = 0.5 * (q[(r, c)] + q[(c, r)]);
            q[(r, c)] = avg;
            q[(c, r)] = avg;
        }
    }
}

/// Top eigenpairs in decreasing order.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub values: Vec<f64>,
    pub vectors: Vec<DVector<f64>>,
}

/// Top `k` eigenpairs of a symmetric matrix. Vector `t` is oriented so that
/// `<references[t], xi_t> >= 0` when a reference is given and the inner product
/// is nonzero; otherwise its first nonzero component is positive.
pub fn top_spectrum(q: &DMatrix<f64>, k: usize, references: &[&DVector<f64>]) -> Result<Spectrum> {
    let n = q.nrows();
    if q.ncols() != n {
        return Err(Error::Shape(format!("matrix is {}x{}, expected square", n, q.ncols())));
    }
    if k == 0 || k > n {
        return Err(Error::Shape(format!("requested {k} eigenpairs of a {n}x{n} matrix")));
    }
    let mut spec = if n <= DENSE_EIGEN_MAX_DIM {
        dense_top(q, k)
    } else {
        match lanczos_top(q, k) {
            Some(s) => s,
            None => dense_top(q, k),
        }
    };
    let norm = q.iter().fold(0.0f64, |a, x| a.max(x.abs())) * n as f64;
    for (mu, xi) in spec.values.iter().zip(&spec.vectors) {
        let res = (q * xi - xi * *mu).norm();
        if !(res <= EIGEN_RESIDUAL_TOL * norm.max(f64::MIN_POSITIVE)) {
            return Err(Error::NoConvergence(format!("eigenpair residual {res} for eigenvalue {mu}")));
        }
    }
    for (t, xi) in spec.vectors.iter_mut().enumerate() {
        orient(xi, references.get(t).copied());
    }
    Ok(spec)
}

fn orient(xi: &mut DVector<f64>, reference: Option<&DVector<f64>>) {
    let ip = reference.map_or(0.0, |v| v.dot(xi));
    let flip = if ip != 0.0 { ip < 0.0 } else { xi.iter().find(|x| **x != 0.0).is_some_and(|x| *x < 0.0) };
    if flip {
        xi.neg_mut();
    }
}

fn dense_top(q: &DMatrix<f64>, k: usize) -> Spectrum {
    let eig = SymmetricEigen::new(q.clone());
    let mut order: Vec<usize> = (0..q.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order[..k].iter().map(|&j| eig.eigenvalues[j]).collect();
    let vectors = order[..k].iter().map(|&j| eig.eigenvectors.column(j).into_owned()).collect();
    Spectrum { values, vectors }
}

/// Lanczos with full reorthogonalization from a fixed start vector. Returns
/// `None` if the top `k` Ritz pairs do not reach the residual tolerance before
/// the Krylov space exhausts a quarter of the dimension.
fn lanczos_top(q: &DMatrix<f64>, k: usize) -> Option<Spectrum> {
    let n = q.nrows();
    let max_steps = (n / 4).max(k + 40).min(n);
    let scale = q.iter().fold(0.0f64, |a, x| a.max(x.abs())) * n as f64;
    // target well inside the final acceptance test
    let target = 0.01 * EIGEN_RESIDUAL_TOL * scale;
    let mut basis = DMatrix::<f64>::zeros(n, max_steps);
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.5 * ((i as f64 + 1.0) * 0.618_033_988_749_895).fract());
    v /= v.norm();
    let mut alpha = Vec::with_capacity(max_steps);
    let mut beta: Vec<f64> = Vec::with_capacity(max_steps);
    let mut next_check = (k + 20).min(max_steps);
    for j in 0..max_steps {
        basis.set_column(j, &v);
        let mut w = q * &v;
        let a = v.dot(&w);
        alpha.push(a);
        // two passes of classical Gram-Schmidt against the whole basis
        for _ in 0..2 {
            let active = basis.columns(0, j + 1);
            let coef = active.tr_mul(&w);
            w.gemv(-1.0, &active, &coef, 1.0);
        }
        let b = w.norm();
        let steps = j + 1;
        let exhausted = b <= 1e-12 * scale;
        if steps >= next_check || exhausted || steps == max_steps {
            next_check = steps + 10;
            let t = DMatrix::from_fn(steps, steps, |r, c| {
                if r == c {
                    alpha[r]
                } else if r + 1 == c {
                    beta[r]
                } else if c + 1 == r {
                    beta[c]
                } else {
                    0.0
                }
            });
            let eig = SymmetricEigen::new(t);
            let mut order: Vec<usize> = (0..steps).collect();
            order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
            if steps >= k {
                let converged = order[..k].iter().all(|&c| (b * eig.eigenvectors[(steps - 1, c)]).abs() <= target);
                if converged {
                    let active = basis.columns(0, steps);
                    let values = order[..k].iter().map(|&c| eig.eigenvalues[c]).collect();
                    let vectors = order[..k]
                        .iter()
                        .map(|&c| {
                            let x = &active * eig.eigenvectors.column(c);
                            let nrm = x.norm();
                            x / nrm
                        })
                        .collect();
                    return Some(Spectrum { values, vectors });
                }
            }
            if exhausted {
                return None;
            }
        }
        beta.push(b);
        v = w / b;
    }
    None
}

/// Observables of one trial for one projection direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionObservation {
    /// `<w, xi_i>` under the sign convention `<v_i, xi_i> >= 0`.
    pub overlap: f64,
    /// `sqrt(N) (|<w, xi_i>|^2 - limit) / <w, v_i>`; absent when `<w, v_i> = 0`.
    pub theta_hat: Option<f64>,
    /// `N |<w, xi_i>|^2`; present only when `<w, v_i> = 0`.
    pub lambda_sq_hat: Option<f64>,
    /// `sqrt(N) <w, xi_i>`; present only when `<w, v_i> = 0`.
    pub lambda_signed_hat: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialObservation {
    pub trial_index: u64,
    /// Top `r0 + 1` eigenvalues, decreasing.
    pub mu: Vec<f64>,
    /// `sqrt(N) (mu_i - theta(d_i))`
    pub upsilon_hat: f64,
    pub directions: Vec<DirectionObservation>,
}

/// Precomputed per-experiment quantities for observing spike `i`.
#[derive(Clone, Debug)]
pub struct TrialPlan {
    pub model: SpikeModel,
    pub directions: Vec<Direction>,
    pub spike: usize,
    theta: f64,
    limits: Vec<f64>,
}

impl TrialPlan {
    pub fn new(model: SpikeModel, directions: Vec<Direction>, spike: usize) -> Result<Self> {
        if model.r0() == 0 {
            return Err(Error::InvalidModel("the model has no supercritical spike to observe".into()));
        }
        model.require_outlier(spike)?;
        let mut limits = Vec::with_capacity(directions.len());
        let mut theta = 0.0;
        for dir in &directions {
            let (t, l) = first_order(&model, dir, spike)?;
            theta = t;
            limits.push(l);
        }
        if directions.is_empty() {
            theta = crate::scalar_theory::theta(model.d(spike), model.y());
        }
        Ok(TrialPlan { model, directions, spike, theta, limits })
    }

    pub fn eigen_count(&self) -> usize {
        (self.model.r0() + 1).min(self.model.m())
    }

    pub fn observe(&self, law: &EntryLaw, seed: TrialSeed) -> Result<TrialObservation> {
        let x = sample_x(self.model.m(), self.model.n(), law, seed);
        self.observe_matrix(&x, seed.trial_index)
    }

    pub fn observe_matrix(&self, x: &DMatrix<f64>, trial_index: u64) -> Result<TrialObservation> {
        let q = build_q(&self.model, x)?;
        let refs: Vec<&DVector<f64>> = (0..self.model.r0()).map(|t| self.model.v(t)).collect();
        let spec = top_spectrum(&q, self.eigen_count(), &refs)?;
        Ok(self.observe_spectrum(&spec, trial_index))
    }

    pub fn observe_spectrum(&self, spec: &Spectrum, trial_index: u64) -> TrialObservation {
        let sqrt_n = (self.model.n() as f64).sqrt();
        let xi = &spec.vectors[self.spike];
        let directions = self
            .directions
            .iter()
            .zip(&self.limits)
            .map(|(dir, limit)| {
                let overlap = dir.w.dot(xi);
                let wi = dir.coefficients[self.spike];
                if wi.abs() < ZERO_OVERLAP_TOL {
                    DirectionObservation {
                        overlap,
                        theta_hat: None,
                        lambda_sq_hat: Some(self.model.n() as f64 * overlap * overlap),
                        lambda_signed_hat: Some(sqrt_n * overlap),
                    }
                } else {
                    DirectionObservation {
                        overlap,
                        theta_hat: Some(sqrt_n * (overlap * overlap - limit) / wi),
                        lambda_sq_hat: None,
                        lambda_signed_hat: None,
                    }
                }
            })
            .collect();
        TrialObservation {
            trial_index,
            mu: spec.values.clone(),
            upsilon_hat: sqrt_n * (spec.values[self.spike] - self.theta),
            directions,
        }
    }

    pub fn csv_header(&self, names: &[String]) -> String {
        let mut cols = vec!["trial_index".to_string()];
        cols.extend((1..=self.eigen_count()).map(|k| format!("mu_{k}")));
        cols.extend(names.iter().map(|n| format!("overlap_{n}")));
        cols.push("Upsilon_hat".into());
        for n in names {
            cols.push(format!("Theta_hat_{n}"));
            cols.push(format!("Lambda_sq_hat_{n}"));
            cols.push(format!("Lambda_signed_hat_{n}"));
        }
        cols.join(",")
    }
}

/// One CSV row matching [`TrialPlan::csv_header`].
pub fn csv_row(obs: &TrialObservation) -> String {
    let fmt = |x: Option<f64>| x.map_or_else(|| "NA".to_string(), |v| format!("{v:e}"));
    let mut cols = vec![obs.trial_index.to_string()];
    cols.extend(obs.mu.iter().map(|m| format!("{m:e}")));
    cols.extend(obs.directions.iter().map(|d| format!("{:e}", d.overlap)));
    cols.push(format!("{:e}", obs.upsilon_hat));
    for d in &obs.directions {
        cols.push(fmt(d.theta_hat));
        cols.push(fmt(d.lambda_sq_hat));
        cols.push(fmt(d.lambda_signed_hat));
    }
    cols.join(",")
}

/// Convenience wrapper: observe spike `i` of `model` along `directions`.
pub fn observe_trial(
    model: &SpikeModel,
    directions: &[Direction],
    law: &EntryLaw,
    seed: TrialSeed,
    i: usize,
) -> Result<TrialObservation> {
    TrialPlan::new(model.clone(), directions.to_vec(), i)?.observe(law, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, decompose_direction, make_entry_law, LawKind, Spike};
    use crate::predictor::covariance_theorem;
    use approx::assert_relative_eq;

    fn e(m: usize, k: usize) -> DVector<f64> {
        DVector::from_fn(m, |i, _| if i == k { 1.0 } else { 0.0 })
    }

    fn random_symmetric(n: usize, seed: u64) -> DMatrix<f64> {
        let x = sample_x(n, n, &EntryLaw::gaussian(), TrialSeed::new(seed, 0));
        let mut q = &x + x.transpose();
        symmetrize(&mut q);
        q
    }

    #[test]
    fn sample_moments() {
        let (m, n) = (500, 500);
        let x = sample_x(m, n, &EntryLaw::gaussian(), TrialSeed::new(3, 9));
        let count = (m * n) as f64;
        let mean = x.sum() / count;
        assert!(mean.abs() < 5.0 / (n as f64).sqrt() / count.sqrt());
        let var = x.iter().map(|v| v * v * n as f64).sum::<f64>() / count;
        assert!((var - 1.0).abs() < 5.0 * (2.0 / count).sqrt());
    }

    #[test]
    fn sampling_is_deterministic_and_stream_separated() {
        let law = make_entry_law(LawKind::ThreePoint, 1.0, 1.0).unwrap();
        let a = sample_x(20, 30, &law, TrialSeed::new(5, 2));
        let b = sample_x(20, 30, &law, TrialSeed::new(5, 2));
        assert_eq!(a, b);
        assert_ne!(a, sample_x(20, 30, &law, TrialSeed::new(5, 3)));
        assert_ne!(a, sample_x(20, 30, &law, TrialSeed::new(6, 2)));
    }

    #[test]
    fn q_without_spikes_is_gram() {
        let model = build_model(30, 60, vec![], 0.1).unwrap();
        let x = sample_x(30, 60, &EntryLaw::gaussian(), TrialSeed::new(1, 1));
        let q = build_q(&model, &x).unwrap();
        assert!((q - &x * x.transpose()).amax() < 1e-14);
    }

    #[test]
    fn q_symmetry_and_trace() {
        let m = 40;
        let mut v2 = DVector::from_element(m, 0.0);
        v2[1] = 0.6;
        v2[2] = 0.8;
        let model = build_model(m, 80, vec![Spike::new(3.0, e(m, 0)), Spike::new(1.5, v2)], 0.1).unwrap();
        let x = sample_x(m, 80, &EntryLaw::gaussian(), TrialSeed::new(4, 0));
        let q = build_q(&model, &x).unwrap();
        assert!((&q - q.transpose()).amax() <= 1e-12 * q.amax());
        let g = &x * x.transpose();
        let expect = g.trace() + model.spikes().iter().map(|s| s.d * s.v.dot(&(&g * &s.v))).sum::<f64>();
        assert_relative_eq!(q.trace(), expect, max_relative = 1e-10);
        let bad = DMatrix::zeros(m + 1, 80);
        assert!(build_q(&model, &bad).is_err());
    }

    #[test]
    fn spectrum_of_diagonal() {
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0, 2.0]));
        let s = top_spectrum(&q, 3, &[]).unwrap();
        assert_eq!(s.values, vec![3.0, 2.0, 1.0]);
        assert_eq!(s.vectors[0], e(3, 1));
        assert_eq!(s.vectors[1], e(3, 2));
        assert_eq!(s.vectors[2], e(3, 0));
    }

    #[test]
    fn rank_one_spectrum() {
        let mut v = DVector::from_fn(100, |i, _| (i as f64 * 0.3).sin());
        v /= v.norm();
        let q = &v * v.transpose() * 5.0;
        let s = top_spectrum(&q, 2, &[&v]).unwrap();
        assert_relative_eq!(s.values[0], 5.0, epsilon = 1e-12);
        assert!(s.values[1].abs() < 1e-12);
        assert_relative_eq!(s.vectors[0].dot(&v), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn dense_round_trip() {
        let q = random_symmetric(50, 8);
        let s = top_spectrum(&q, 50, &[]).unwrap();
        let mut rec = DMatrix::zeros(50, 50);
        for (mu, xi) in s.values.iter().zip(&s.vectors) {
            rec.ger(*mu, xi, xi, 1.0);
        }
        assert!((rec - q).amax() < 1e-10);
    }

    #[test]
    fn lanczos_matches_dense() {
        let m = 300;
        let model = build_model(m, 600, vec![Spike::new(3.0, e(m, 0)), Spike::new(1.5, e(m, 1))], 0.1).unwrap();
        let x = sample_x(m, 600, &EntryLaw::gaussian(), TrialSeed::new(12, 0));
        let q = build_q(&model, &x).unwrap();
        let fast = lanczos_top(&q, 3).expect("lanczos converges on a spiked matrix");
        let full = dense_top(&q, 3);
        for t in 0..3 {
            assert_relative_eq!(fast.values[t], full.values[t], max_relative = 1e-10);
            assert!(fast.vectors[t].dot(&full.vectors[t]).abs() > 1.0 - 1e-8);
        }
    }

    #[test]
    fn noise_free_plumbing() {
        // X = [I 0] gives X X^T = I, hence Q = Sigma
        let (m, n) = (20, 40);
        let model = build_model(m, n, vec![Spike::new(2.0, e(m, 3))], 0.1).unwrap();
        let dir = decompose_direction(&model, &e(m, 3)).unwrap();
        let plan = TrialPlan::new(model, vec![dir], 0).unwrap();
        let x = DMatrix::from_fn(m, n, |r, c| (r == c) as u8 as f64);
        let obs = plan.observe_matrix(&x, 0).unwrap();
        assert_relative_eq!(obs.mu[0], 3.0, epsilon = 1e-12);
        assert_relative_eq!(obs.directions[0].overlap, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn observation_sanity() {
        let (m, n, d) = (250, 500, 2.0);
        let model = build_model(m, n, vec![Spike::new(d, e(m, 0))], 0.1).unwrap();
        let dirs = vec![decompose_direction(&model, &e(m, 0)).unwrap(), decompose_direction(&model, &e(m, 7)).unwrap()];
        let v11 = covariance_theorem(&model, &dirs[0], 0, 0.0).unwrap().total()[(0, 0)];
        let plan = TrialPlan::new(model, dirs, 0).unwrap();
        let law = EntryLaw::gaussian();
        let a = plan.observe(&law, TrialSeed::new(77, 4)).unwrap();
        assert!(a.upsilon_hat.abs() < 6.0 * v11.sqrt());
        assert!(a.upsilon_hat.abs() < 50.0);
        assert!(a.directions[0].overlap > 0.0);
        assert!(a.directions[0].theta_hat.is_some() && a.directions[0].lambda_sq_hat.is_none());
        assert!(a.directions[1].theta_hat.is_none() && a.directions[1].lambda_sq_hat.is_some());
        assert_eq!(a.mu.len(), 2);
        assert!(a.mu[0] > a.mu[1]);
        let b = plan.observe(&law, TrialSeed::new(77, 4)).unwrap();
        assert_eq!(a, b);
        let header = plan.csv_header(&["w1".into(), "w2".into()]);
        assert_eq!(header.split(',').count(), csv_row(&a).split(',').count());
        assert!(csv_row(&a).contains("NA"));
    }

    #[test]
    fn rejects_models_without_outliers() {
        let model = build_model(20, 40, vec![Spike::new(0.3, e(20, 0))], 0.1).unwrap();
        assert!(TrialPlan::new(model, vec![], 0).is_err());
    }
}
