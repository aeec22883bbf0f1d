use spike_spectra::montecarlo::{run_experiment, ExperimentConfig};

fn config(trials: usize) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(
        r#"{{
            "model": {{"M": 100, "N": 200, "spikes": [{{"d": 2.0, "v": "e_1"}}]}},
            "directions": ["v_1", "perp"],
            "law": {{"kind": "gaussian"}},
            "trials": {trials},
            "seed": 3
        }}"#
    ))
    .unwrap()
}

#[test]
fn standard_errors_shrink_as_root_r() {
    let a = run_experiment(&config(400), None).unwrap().report;
    let b = run_experiment(&config(1600), None).unwrap().report;
    for k in 0..a.observables.len() {
        let ratio = a.mean_se[k] / b.mean_se[k];
        assert!((1.6..=2.4).contains(&ratio), "{}: mean se ratio {ratio}", a.observables[k]);
        let ratio = a.covariance_se[k][k] / b.covariance_se[k][k];
        assert!((1.6..=2.4).contains(&ratio), "{}: variance se ratio {ratio}", a.observables[k]);
    }
}

#[test]
fn report_shape() {
    let r = run_experiment(&config(128), Some(2)).unwrap().report;
    assert_eq!(r.trials, 128);
    assert_eq!(r.failed_trials, 0);
    assert_eq!(r.pass, r.checks.iter().all(|c| c.pass));
    assert_eq!(r.samples["Upsilon_hat"].len(), 128);
    let dim = r.observables.len();
    assert!(r.covariance.iter().all(|row| row.len() == dim));
    for a in 0..dim {
        for b in 0..dim {
            assert_eq!(r.covariance[a][b], r.covariance[b][a]);
        }
    }
    assert!(r.predicted_covariance[1][2].is_none());
    assert!(r.predicted_covariance_greens[0][0].is_some());
    assert_eq!(r.config_hash.len(), 64);
}
