//! Rigid-motion properties of a freshly initialized network.

use equishape::checks::{run_suite, CheckConfig, Suite};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // fewer trials than the full suite so the example stays quick
    let cfg = CheckConfig {
        lrf_trials: 10,
        invariance_trials: 5,
        gram_schmidt_trials: 200,
        models: 2,
        ..CheckConfig::default()
    };
    for r in run_suite(Suite::Equivariance, &cfg)? {
        let mark = if r.passed { "ok  " } else { "FAIL" };
        println!("{mark} {:<60} {:.2e} <= {:.0e}  {}", r.name, r.max_err, r.tolerance, r.detail);
    }
    Ok(())
}
