use bp_tandem::analysis::{
    batch_means, boundary_probabilities, busy_interval_distribution, fit_exponential_tail, flux_estimate,
};
use bp_tandem::engine::{simulate, stationary_samples, ArrivalProcessSpec};
use bp_tandem::model::{Horizon, SystemConfig};
use bp_tandem::oracle::{build_chain, expected_queue_profile, solve_stationary, DEFAULT_TOLERANCE};

fn poisson(lambda: f64) -> ArrivalProcessSpec {
    ArrivalProcessSpec::poisson(lambda)
}

#[test]
fn every_site_carries_the_arrival_rate() {
    let lambda = 0.3;
    let t = 2e5;
    let cfg = SystemConfig::new(lambda, Horizon::Finite(3), 11, t).unwrap();
    let epochs: Vec<f64> = (1..=2000).map(|k| k as f64 * t / 2000.0).collect();
    let traj = simulate(&cfg, &poisson(lambda), &epochs).unwrap();
    // counter 1 is arrivals, counter n + 1 the moves out of site n
    for counter in 1..=4 {
        let est = flux_estimate(&traj, counter, (t / 10.0, t), 40).unwrap();
        assert!((est.value - lambda).abs() < 0.01, "counter {counter}: {est:?}");
    }
}

#[test]
fn mm1_boundary_and_idle_probabilities() {
    let cfg = SystemConfig::new(0.5, Horizon::Finite(1), 5, 4e5).unwrap();
    let samples = stationary_samples(&cfg, &poisson(0.5), 0.25, 100_000).unwrap();
    let idle: Vec<f64> = samples.iter().map(|s| (s.get(1) == 0) as u8 as f64).collect();
    let idle = batch_means(&idle, 20).unwrap();
    assert!((idle.value - 0.5).abs() < 0.01, "{idle:?}");
    let busy = boundary_probabilities(&samples, 20).unwrap();
    assert_eq!(busy.len(), 1);
    assert!((busy[0].value - 0.5).abs() < 0.01, "{busy:?}");
}

#[test]
fn bprime_tail_in_the_infinite_tandem_is_exponential() {
    let lambda = 0.2;
    let t = 2e4;
    let cfg = SystemConfig::new(lambda, Horizon::Infinite, 21, t).unwrap();
    let epochs: Vec<f64> = (1..=10_000).map(|k| t / 2.0 + k as f64 * t / 20_000.0).collect();
    let traj = simulate(&cfg, &poisson(lambda), &epochs).unwrap();
    let states: Vec<_> = traj.states().cloned().collect();
    let dist = busy_interval_distribution(&states);
    let fit = dist.fit_bprime().unwrap();
    assert!(fit.slope < 0.0);
    assert!(fit.r_squared >= 0.95, "{fit:?}");
}

#[test]
fn q1_tail_is_exponential_at_low_load() {
    let cfg = SystemConfig::new(0.2, Horizon::Finite(40), 3, 2e5).unwrap();
    let samples = stationary_samples(&cfg, &poisson(0.2), 0.25, 100_000).unwrap();
    let q1: Vec<u64> = samples.iter().map(|s| s.get(1)).collect();
    let fit = fit_exponential_tail(&q1).unwrap();
    assert!(fit.support.len() >= 3, "{fit:?}");
    assert!(fit.r_squared >= 0.98, "{fit:?}");
}

#[test]
fn doubling_batches_keeps_intervals_consistent() {
    let cfg = SystemConfig::new(0.4, Horizon::Finite(4), 9, 2e5).unwrap();
    let samples = stationary_samples(&cfg, &poisson(0.4), 0.25, 80_000).unwrap();
    let q1: Vec<f64> = samples.iter().map(|s| s.get(1) as f64).collect();
    let coarse = batch_means(&q1, 20).unwrap();
    let fine = batch_means(&q1, 40).unwrap();
    assert!(coarse.overlaps(&fine), "{coarse:?} {fine:?}");
    assert!((coarse.value - fine.value).abs() < 1e-9);
}

#[test]
fn exact_mean_exceeds_linear_bound() {
    let chain = build_chain(3, 0.6, 25).unwrap();
    let dist = solve_stationary(&chain, DEFAULT_TOLERANCE).unwrap();
    let means = expected_queue_profile(&chain, &dist);
    assert!(means[0] > (2.0 * 0.6 - 1.0) * 3.0, "{means:?}");
    // differences telescope to the same bound
    for w in means.windows(2) {
        assert!(w[0] - w[1] >= 2.0 * 0.6 - 1.0 - dist.truncation_mass * 25.0, "{means:?}");
    }
}

#[test]
fn exact_boundary_probabilities_at_light_load() {
    let chain = build_chain(2, 0.3, 20).unwrap();
    let dist = solve_stationary(&chain, DEFAULT_TOLERANCE).unwrap();
    assert!(dist.truncation_mass < 1e-6);
    for p in bp_tandem::oracle::exact_boundary_probabilities(&chain, &dist) {
        assert!((p - 0.3).abs() < 1e-6, "{p}");
    }
}
