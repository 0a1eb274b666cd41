use equishape::checks::{run_suite, CheckConfig, Suite};

#[test]
fn reduced_equivariance_suite_passes() {
    let cfg = CheckConfig {
        lrf_trials: 10,
        invariance_trials: 5,
        gram_schmidt_trials: 200,
        models: 2,
        ..CheckConfig::default()
    };
    let results = run_suite(Suite::Equivariance, &cfg).unwrap();
    assert!(results.len() >= 4);
    for r in &results {
        assert!(r.passed, "{r:?}");
        assert!(r.max_err <= r.tolerance || r.tolerance == 0.0, "{r:?}");
    }
}

#[test]
fn suite_names_parse() {
    assert_eq!("gradients".parse::<Suite>().unwrap(), Suite::Gradients);
    assert_eq!("all".parse::<Suite>().unwrap(), Suite::All);
    assert!("other".parse::<Suite>().is_err());
}
