use bp_tandem::analysis::batch_means;
use bp_tandem::engine::{stationary_samples, ArrivalProcessSpec};
use bp_tandem::model::{Horizon, SystemConfig};
use bp_tandem::oracle::{build_chain, marginal, solve_stationary, DEFAULT_TOLERANCE};

const CAP: u64 = 15;
const BATCHES: usize = 50;

/// Simulated stationary marginals against the truncated chain, state by
/// state. The truncated law differs from the untruncated one by roughly its
/// truncation mass, which widens the tolerance at high load.
#[test]
fn simulated_marginals_match_exact_chain() {
    let mut report = Vec::new();
    let mut failures = 0;
    let mut checked = 0;
    for n in 1..=3 {
        for &lambda in &[0.2, 0.5, 0.8] {
            let chain = build_chain(n, lambda, CAP).unwrap();
            let dist = solve_stationary(&chain, DEFAULT_TOLERANCE).unwrap();
            let cfg = SystemConfig::new(lambda, Horizon::Finite(n), 7 + n as u64, 4e5).unwrap();
            let samples = stationary_samples(&cfg, &ArrivalProcessSpec::poisson(lambda), 0.25, 300_000).unwrap();
            for site in 1..=n {
                let exact = marginal(&chain, &dist, site);
                for (k, &p) in exact.iter().enumerate().take(CAP as usize) {
                    if p < 1e-3 {
                        continue;
                    }
                    let series: Vec<f64> = samples.iter().map(|s| (s.get(site) == k as u64) as u8 as f64).collect();
                    let est = batch_means(&series, BATCHES).unwrap();
                    checked += 1;
                    let tol = 3.0 * est.std_error() + dist.truncation_mass;
                    if (est.value - p).abs() > tol {
                        failures += 1;
                        report.push(format!(
                            "N={n} lambda={lambda} site={site} k={k}: sim {:.5} exact {p:.5} tol {tol:.5}",
                            est.value
                        ));
                    }
                }
            }
        }
    }
    eprintln!("{checked} state probabilities compared");
    assert!(checked > 100);
    assert_eq!(failures, 0, "{report:#?}");
}
