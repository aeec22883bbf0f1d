use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};
use proptest::prelude::*;

use spike_spectra::inference::estimate_spike;
use spike_spectra::model::{build_model, decompose_direction, Spike, SpikeModel};
use spike_spectra::montecarlo::{merge_tree, MomentAccumulator};
use spike_spectra::predictor::{coefficient_map, covariance_greens, covariance_theorem, max_relative_diff, predict};
use spike_spectra::scalar_theory::{invert_theta, m1, m2, mp_edges, theta, C64};

/// Orthonormal vectors from Gram-Schmidt on the given raw columns.
fn orthonormalize(raw: &[Vec<f64>]) -> Option<Vec<DVector<f64>>> {
    let mut out: Vec<DVector<f64>> = Vec::new();
    for r in raw {
        let mut v = DVector::from_column_slice(r);
        for _ in 0..2 {
            for q in &out {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let n = v.norm();
        if n < 1e-3 {
            return None;
        }
        out.push(v / n);
    }
    Some(out)
}

#[derive(Debug, Clone)]
struct Config {
    m: usize,
    n: usize,
    strengths: Vec<f64>,
    raw_vectors: Vec<Vec<f64>>,
    raw_w: Vec<f64>,
    kappa4: f64,
}

fn config() -> impl Strategy<Value = Config> {
    (6usize..30, 1usize..4, prop::sample::select(vec![-2.0, 0.0, 1.0]))
        .prop_flat_map(|(m, r, kappa4)| {
            (
                Just(m),
                m / 2 + 1..4 * m,
                prop::collection::vec(0.2f64..1.5, r),
                prop::collection::vec(prop::collection::vec(-1.0f64..1.0, m), r),
                prop::collection::vec(-1.0f64..1.0, m),
                Just(kappa4),
            )
        })
        .prop_map(|(m, n, gaps, raw_vectors, raw_w, kappa4)| {
            // top strength sqrt(y) + 0.2 + ..., later ones separated by at least 0.2
            let y = m as f64 / n as f64;
            let mut d = y.sqrt() + 0.2 + gaps[0];
            let mut strengths = vec![d];
            for g in &gaps[1..] {
                d -= g;
                if d < 0.05 {
                    break;
                }
                strengths.push(d);
            }
            let root_y = y.sqrt();
            for s in strengths.iter_mut().skip(1) {
                if *s > root_y - 0.05 && *s < root_y + 0.15 {
                    *s = root_y + 0.15;
                }
            }
            strengths.sort_by(|a, b| b.total_cmp(a));
            strengths.dedup_by(|a, b| (*a - *b).abs() < 0.15);
            let k = strengths.len();
            Config { m, n, strengths, raw_vectors: raw_vectors[..k].to_vec(), raw_w, kappa4 }
        })
}

fn build(c: &Config) -> Option<(SpikeModel, DVector<f64>)> {
    let vs = orthonormalize(&c.raw_vectors)?;
    let spikes = c.strengths.iter().zip(vs).map(|(d, v)| Spike::new(*d, v)).collect();
    let model = build_model(c.m, c.n, spikes, 0.1).ok()?;
    let w = DVector::from_column_slice(&c.raw_w);
    let norm = w.norm();
    (norm > 1e-3).then(|| (model, w / norm))
}

fn permute(v: &DVector<f64>, perm: &[usize]) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| v[perm[i]])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn two_routes_agree(c in config()) {
        let Some((model, w)) = build(&c) else { return Ok(()) };
        let dir = decompose_direction(&model, &w).unwrap();
        for i in 0..model.r0() {
            let thm = covariance_theorem(&model, &dir, i, c.kappa4).unwrap().total();
            let grn = covariance_greens(&model, &dir, i, c.kappa4).unwrap()
                .mapped(&coefficient_map(&model, &dir, i).unwrap()).total();
            prop_assert!(max_relative_diff(&thm, &grn, 1e-6) < 1e-8, "{thm} vs {grn}");
        }
    }

    #[test]
    fn gaussian_part_is_psd(c in config()) {
        let Some((model, w)) = build(&c) else { return Ok(()) };
        let dir = decompose_direction(&model, &w).unwrap();
        for i in 0..model.r0() {
            let g: Matrix3<f64> = covariance_theorem(&model, &dir, i, 0.0).unwrap().gaussian;
            let eig = SymmetricEigen::new(g).eigenvalues;
            prop_assert!(eig.min() >= -1e-10 * g.amax().max(1.0), "{g}");
        }
    }

    #[test]
    fn predictions_invariant_under_coordinate_permutation(c in config(), seed in any::<u64>()) {
        let Some((model, w)) = build(&c) else { return Ok(()) };
        let mut perm: Vec<usize> = (0..c.m).collect();
        // deterministic shuffle from the seed
        let mut s = seed | 1;
        for k in (1..perm.len()).rev() {
            s ^= s << 13; s ^= s >> 7; s ^= s << 17;
            perm.swap(k, (s % (k as u64 + 1)) as usize);
        }
        let spikes = model.spikes().iter().map(|sp| Spike::new(sp.d, permute(&sp.v, &perm))).collect();
        let permuted = build_model(c.m, c.n, spikes, 0.1).unwrap();
        let dir = decompose_direction(&model, &w).unwrap();
        let pdir = decompose_direction(&permuted, &permute(&w, &perm)).unwrap();
        let a = predict(&model, &dir, 0, c.kappa4).unwrap();
        let b = predict(&permuted, &pdir, 0, c.kappa4).unwrap();
        let to_m = |x: [[f64; 3]; 3]| Matrix3::from_fn(|r, k| x[r][k]);
        prop_assert!(max_relative_diff(&to_m(a.v_theorem), &to_m(b.v_theorem), 1e-6) < 1e-10);
        prop_assert!((a.overlap_limit - b.overlap_limit).abs() < 1e-12);
    }

    #[test]
    fn decompose_recompose_round_trip(c in config()) {
        let Some((model, w)) = build(&c) else { return Ok(()) };
        let dir = decompose_direction(&model, &w).unwrap();
        prop_assert!((dir.recompose(&model) - &w).amax() < 1e-12);
        for sp in model.spikes() {
            prop_assert!(sp.v.dot(&dir.u).abs() < 1e-12);
        }
    }

    #[test]
    fn stieltjes_maps_upper_half_plane_to_itself(e in -5.0f64..10.0, eta in 1e-3f64..5.0, y in 0.05f64..3.0) {
        let z = C64::new(e, eta);
        prop_assert!(m1(z, y).unwrap().im > 0.0);
        prop_assert!(m2(z, y).unwrap().im > 0.0);
    }

    #[test]
    fn theta_inverse_round_trip(y in 0.05f64..3.0, excess in 1e-3f64..20.0) {
        let d = y.sqrt() + excess;
        let back = invert_theta(theta(d, y), y).unwrap();
        prop_assert!((back - d).abs() <= 1e-9 * d.max(1.0));
    }

    #[test]
    fn estimated_strength_increases_with_eigenvalue(a in 1e-4f64..10.0, b in 1e-4f64..10.0) {
        prop_assume!((a - b).abs() > 1e-9);
        let edge = mp_edges(0.5).lambda_plus;
        let da = estimate_spike(edge + a, 250, 500, 0.0, 0.0, 0.05).unwrap().d_hat;
        let db = estimate_spike(edge + b, 250, 500, 0.0, 0.0, 0.05).unwrap().d_hat;
        prop_assert_eq!(a < b, da < db);
        prop_assert!(da > 0.5f64.sqrt());
    }

    #[test]
    fn accumulator_merges_are_order_free(xs in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 4..60), cut in 1usize..1000, cut2 in 1usize..1000) {
        let n = xs.len();
        let (i, j) = {
            let a = 1 + cut % (n - 2);
            let b = 1 + cut2 % (n - 2);
            (a.min(b), a.max(b).max(a.min(b) + 1).min(n - 1))
        };
        let acc = |lo: usize, hi: usize| {
            let mut a = MomentAccumulator::empty(3);
            for (t, x) in xs.iter().enumerate().take(hi).skip(lo) {
                a.push(t as u64, &DVector::from_column_slice(x));
            }
            a
        };
        let (a, b, c) = (acc(0, i), acc(i, j), acc(j, n));
        let whole = acc(0, n);
        let left = a.merge(&b).unwrap().merge(&c).unwrap();
        let right = a.merge(&b.merge(&c).unwrap()).unwrap();
        let swapped = c.merge(&b).unwrap().merge(&a).unwrap();
        for other in [&left, &right, &swapped, &merge_tree(&[a.clone(), b.clone(), c.clone()]).unwrap()] {
            prop_assert!((&other.mean - &whole.mean).amax() < 1e-12);
            prop_assert!((&other.comoment - &whole.comoment).amax() < 1e-9 * whole.comoment.amax().max(1.0));
        }
        let cov: DMatrix<f64> = whole.covariance();
        prop_assert_eq!(cov.clone(), cov.transpose());
        prop_assert!(SymmetricEigen::new(cov.clone()).eigenvalues.min() >= -1e-12 * cov.amax().max(1.0));
    }
}

