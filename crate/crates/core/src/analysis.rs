//! Statistical reductions of simulation output.
//!
//! Confidence intervals are 95% Student-t intervals, from batch means within
//! one run or from independent seeds across runs. Tail fits report an
//! empirical decay rate only; they make no claim about the constants of any
//! bound.

use crate::engine::{stationary_scan, ArrivalProcessSpec, EngineError, Trajectory};
use crate::model::{Horizon, QueueState, SystemConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

/// Tail bins with fewer samples beyond them are left out of fits.
pub const MIN_BIN_COUNT: u64 = 100;
/// Fewest batches accepted for a batch-means interval.
pub const MIN_BATCHES: usize = 20;
/// Largest relative difference of fitted slopes still called stable.
pub const TAIL_SLOPE_TOLERANCE: f64 = 0.25;
const CONFIDENCE: f64 = 0.95;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("only {usable} usable tail bins, need at least 3")]
    TooFewBins { usable: usize },
    #[error("{got} batches requested, need at least {MIN_BATCHES}")]
    TooFewBatches { got: usize },
    #[error("not enough observations: {0}")]
    NotEnoughData(String),
    #[error("invalid window [{0}, {1}]")]
    BadWindow(f64, f64),
    #[error("invalid scan grid: {0}")]
    BadGrid(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Point estimate with a symmetric confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub ci_halfwidth: f64,
    /// Batches or independent replications behind the interval.
    pub n_batches: usize,
}

impl Estimate {
    pub fn ci_lo(&self) -> f64 {
        self.value - self.ci_halfwidth
    }

    pub fn ci_hi(&self) -> f64 {
        self.value + self.ci_halfwidth
    }

    pub fn covers(&self, x: f64) -> bool {
        self.ci_lo() <= x && x <= self.ci_hi()
    }

    pub fn overlaps(&self, other: &Estimate) -> bool {
        self.ci_lo() <= other.ci_hi() && other.ci_lo() <= self.ci_hi()
    }

    /// Sample standard error implied by the interval.
    pub fn std_error(&self) -> f64 {
        self.ci_halfwidth / t_quantile(self.n_batches)
    }
}

fn t_quantile(n: usize) -> f64 {
    let dof = (n.max(2) - 1) as f64;
    StudentsT::new(0.0, 1.0, dof)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.5 + CONFIDENCE / 2.0)
}

/// Mean of independent values with a t interval.
pub fn mean_ci(values: &[f64]) -> Result<Estimate, AnalysisError> {
    if values.len() < 2 {
        return Err(AnalysisError::NotEnoughData(format!(
            "{} values, need at least 2",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(Estimate {
        value: mean,
        ci_halfwidth: t_quantile(values.len()) * (var / n).sqrt(),
        n_batches: values.len(),
    })
}

/// Batch-means estimate of the mean of a correlated series.
///
/// The series is cut into `n_batches` contiguous batches of equal length;
/// trailing observations that do not fill a batch are dropped.
pub fn batch_means(series: &[f64], n_batches: usize) -> Result<Estimate, AnalysisError> {
    if n_batches < MIN_BATCHES {
        return Err(AnalysisError::TooFewBatches { got: n_batches });
    }
    let size = series.len() / n_batches;
    if size == 0 {
        return Err(AnalysisError::NotEnoughData(format!(
            "{} observations for {n_batches} batches",
            series.len()
        )));
    }
    let means: Vec<f64> = series
        .chunks_exact(size)
        .take(n_batches)
        .map(|c| c.iter().sum::<f64>() / size as f64)
        .collect();
    mean_ci(&means)
}

/// Least-squares line through `(r, ln P{X > r})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    pub support: Vec<u64>,
    pub log_survival: Vec<f64>,
    /// Empirical decay rate, negated.
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Smallest number of samples beyond any used bin.
    pub min_count: u64,
}

impl TailFit {
    /// Fitted `ln P{X > r}` at `r`.
    pub fn predict(&self, r: u64) -> f64 {
        self.intercept + self.slope * r as f64
    }

    /// Whether two fits describe the same decay within `tolerance`.
    pub fn agrees_with(&self, other: &TailFit, tolerance: f64) -> bool {
        let scale = self.slope.abs().max(other.slope.abs());
        (self.slope - other.slope).abs() <= tolerance * scale
    }
}

pub fn fit_exponential_tail(samples: &[u64]) -> Result<TailFit, AnalysisError> {
    fit_exponential_tail_with(samples, MIN_BIN_COUNT)
}

/// [`fit_exponential_tail`] with an explicit bin threshold: `r` enters the
/// fit when at least `min_bin_count` samples exceed it.
pub fn fit_exponential_tail_with(samples: &[u64], min_bin_count: u64) -> Result<TailFit, AnalysisError> {
    let max = samples.iter().copied().max().unwrap_or(0) as usize;
    let mut hist = vec![0u64; max + 1];
    for &x in samples {
        hist[x as usize] += 1;
    }
    let total = samples.len() as f64;
    let mut beyond = samples.len() as u64;
    let (mut support, mut log_survival) = (Vec::new(), Vec::new());
    let mut min_count = u64::MAX;
    for (r, &h) in hist.iter().enumerate() {
        beyond -= h;
        if beyond < min_bin_count.max(1) {
            break;
        }
        support.push(r as u64);
        log_survival.push((beyond as f64 / total).ln());
        min_count = min_count.min(beyond);
    }
    if support.len() < 3 {
        return Err(AnalysisError::TooFewBins {
            usable: support.len(),
        });
    }
    let xs: Vec<f64> = support.iter().map(|&r| r as f64).collect();
    let (slope, intercept, r_squared) = least_squares(&xs, &log_survival);
    Ok(TailFit {
        support,
        log_survival,
        slope,
        intercept,
        r_squared,
        min_count,
    })
}

fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r_squared)
}

/// Flux estimate from counting increments.
pub type FluxEstimate = Estimate;

/// Rate of the counter `F_counter` over `window`, from batch means.
///
/// `counter` follows the trajectory convention: 1 counts arrivals and `n + 1`
/// counts moves out of site `n`. Batch edges are the sample epochs inside
/// the window, so the run should be sampled finely enough to supply at least
/// `n_batches` intervals.
pub fn flux_estimate(
    traj: &Trajectory,
    counter: usize,
    window: (f64, f64),
    n_batches: usize,
) -> Result<FluxEstimate, AnalysisError> {
    let (t0, t1) = window;
    if !(t0 >= 0.0 && t1 > t0) {
        return Err(AnalysisError::BadWindow(t0, t1));
    }
    if n_batches < MIN_BATCHES {
        return Err(AnalysisError::TooFewBatches { got: n_batches });
    }
    let points: Vec<(f64, u64)> = traj
        .samples
        .iter()
        .filter(|s| s.time >= t0 && s.time <= t1)
        .map(|s| (s.time, s.passes(counter)))
        .collect();
    let intervals = points.len().saturating_sub(1);
    if intervals < n_batches {
        return Err(AnalysisError::NotEnoughData(format!(
            "{intervals} sample intervals in window for {n_batches} batches"
        )));
    }
    let per = intervals / n_batches;
    let rates: Vec<f64> = (0..n_batches)
        .map(|b| {
            let (a, z) = (points[b * per], points[(b + 1) * per]);
            (z.1 - a.1) as f64 / (z.0 - a.0)
        })
        .collect();
    mean_ci(&rates)
}

/// Rate of a stream of event times over `window`, from equal-length batches.
pub fn flux_from_times(
    times: &[f64],
    window: (f64, f64),
    n_batches: usize,
) -> Result<FluxEstimate, AnalysisError> {
    let (t0, t1) = window;
    if t1.is_nan() || t0.is_nan() || t1 <= t0 {
        return Err(AnalysisError::BadWindow(t0, t1));
    }
    if n_batches < MIN_BATCHES {
        return Err(AnalysisError::TooFewBatches { got: n_batches });
    }
    let width = (t1 - t0) / n_batches as f64;
    let mut counts = vec![0u64; n_batches];
    for &t in times {
        if t > t0 && t <= t1 {
            let b = (((t - t0) / width).ceil() as usize).clamp(1, n_batches) - 1;
            counts[b] += 1;
        }
    }
    let rates: Vec<f64> = counts.iter().map(|&c| c as f64 / width).collect();
    mean_ci(&rates)
}

fn site_count(samples: &[QueueState]) -> usize {
    samples
        .iter()
        .map(|s| match s.horizon() {
            Horizon::Finite(n) => n,
            Horizon::Infinite => s.extent(),
        })
        .max()
        .unwrap_or(0)
}

/// `P{Q_n > Q_{n+1}}` for every site, with batch-means intervals.
pub fn boundary_probabilities(
    samples: &[QueueState],
    n_batches: usize,
) -> Result<Vec<Estimate>, AnalysisError> {
    (1..=site_count(samples))
        .map(|n| {
            let series: Vec<f64> = samples
                .iter()
                .map(|s| s.eligible_unchecked(n) as u8 as f64)
                .collect();
            batch_means(&series, n_batches)
        })
        .collect()
}

/// Empirical laws of the busy intervals `B` and `B'`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusyIntervalDistribution {
    pub b: Vec<u64>,
    pub bprime: Vec<u64>,
    /// `survival_b[n] = P{B > n}` for `n = 0..=max`.
    pub survival_b: Vec<f64>,
    pub survival_bprime: Vec<f64>,
}

impl BusyIntervalDistribution {
    pub fn fit_b(&self) -> Result<TailFit, AnalysisError> {
        fit_exponential_tail(&self.b)
    }

    pub fn fit_bprime(&self) -> Result<TailFit, AnalysisError> {
        fit_exponential_tail(&self.bprime)
    }
}

fn survival(values: &[u64], len: usize) -> Vec<f64> {
    let total = values.len().max(1) as f64;
    (0..len)
        .map(|n| values.iter().filter(|&&v| v > n as u64).count() as f64 / total)
        .collect()
}

/// Saturated intervals of a finite system count as `N + 1`.
pub fn busy_interval_distribution(samples: &[QueueState]) -> BusyIntervalDistribution {
    let b: Vec<u64> = samples.iter().map(|s| s.busy_interval_b().site as u64).collect();
    let bprime: Vec<u64> = samples
        .iter()
        .map(|s| s.busy_interval_bprime().site as u64)
        .collect();
    let len = bprime.iter().chain(&b).copied().max().unwrap_or(0) as usize + 1;
    BusyIntervalDistribution {
        survival_b: survival(&b, len),
        survival_bprime: survival(&bprime, len),
        b,
        bprime,
    }
}

/// Run settings shared by every grid point of a scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub seeds: Vec<u64>,
    pub time_horizon: f64,
    pub burn_in_fraction: f64,
    pub samples_per_seed: usize,
    /// Threads used for replications; results do not depend on it.
    pub workers: usize,
}

/// Statistics of `Q_1` at one `(lambda, N)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub lambda: f64,
    pub n: usize,
    /// Interval across seeds of the per-seed means.
    pub q1_mean: Estimate,
    /// Interval across seeds of the per-seed medians.
    pub q1_median: Estimate,
    pub seed_means: Vec<f64>,
    pub seed_medians: Vec<f64>,
    /// Tail fit of the pooled samples, when enough bins are populated.
    pub tail: Option<TailFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSummary {
    pub lambda: f64,
    /// The two largest `N` have overlapping mean intervals and agreeing tails.
    pub saturation_flag: bool,
    /// Mean intervals are strictly ordered along the whole `N` ladder.
    pub growth_flag: bool,
    /// No mean lies above the next one beyond both intervals.
    pub monotone_within_ci: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseScanResult {
    /// Grid points ordered by `lambda`, then `N`.
    pub points: Vec<ScanPoint>,
    pub summaries: Vec<LambdaSummary>,
}

impl PhaseScanResult {
    pub fn point(&self, lambda: f64, n: usize) -> Option<&ScanPoint> {
        self.points.iter().find(|p| p.lambda == lambda && p.n == n)
    }

    pub fn summary(&self, lambda: f64) -> Option<&LambdaSummary> {
        self.summaries.iter().find(|s| s.lambda == lambda)
    }
}

fn median(values: &mut [u64]) -> f64 {
    values.sort_unstable();
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m] as f64
    } else {
        (values[m - 1] + values[m]) as f64 / 2.0
    }
}

/// `Q_1` samples of one stationary run.
pub fn q1_samples(
    lambda: f64,
    n: usize,
    seed: u64,
    config: &ScanConfig,
) -> Result<Vec<u64>, AnalysisError> {
    let sys = SystemConfig::new(lambda, Horizon::Finite(n), seed, config.time_horizon)
        .map_err(EngineError::from)?;
    let mut out = Vec::with_capacity(config.samples_per_seed);
    stationary_scan(
        &sys,
        &ArrivalProcessSpec::poisson(lambda),
        config.burn_in_fraction,
        config.samples_per_seed,
        |s| out.push(s.get(1)),
    )?;
    Ok(out)
}

fn check_grid(lambdas: &[f64], ns: &[usize], config: &ScanConfig) -> Result<(), AnalysisError> {
    if lambdas.is_empty() || ns.is_empty() {
        return Err(AnalysisError::BadGrid("empty lambda or N list".into()));
    }
    if let Some(l) = lambdas.iter().find(|&&l| !(l > 0.0 && l < 1.0)) {
        return Err(AnalysisError::BadGrid(format!("lambda {l} outside (0, 1)")));
    }
    if ns.contains(&0) || ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(AnalysisError::BadGrid("N values must be positive and increasing".into()));
    }
    if config.seeds.len() < 2 {
        return Err(AnalysisError::BadGrid("at least 2 seeds needed for intervals".into()));
    }
    Ok(())
}

/// Stationary `Q_1` statistics over a `lambda` by `N` grid.
///
/// Each seed drives an independent run; seeds are shared across grid points.
/// Replications may run on `config.workers` threads, and their results are
/// merged in seed order, so the output does not depend on the worker count.
pub fn phase_scan(lambdas: &[f64], ns: &[usize], config: &ScanConfig) -> Result<PhaseScanResult, AnalysisError> {
    check_grid(lambdas, ns, config)?;
    let jobs: Vec<(f64, usize, u64)> = lambdas
        .iter()
        .flat_map(|&l| ns.iter().flat_map(move |&n| config.seeds.iter().map(move |&s| (l, n, s))))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| AnalysisError::BadGrid(e.to_string()))?;
    let runs: Vec<Vec<u64>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(l, n, s)| q1_samples(l, n, s, config))
            .collect::<Result<_, _>>()
    })?;

    let mut points = Vec::new();
    for (chunk, grid) in runs
        .chunks(config.seeds.len())
        .zip(jobs.chunks(config.seeds.len()))
    {
        let seed_means: Vec<f64> = chunk
            .iter()
            .map(|r| r.iter().sum::<u64>() as f64 / r.len() as f64)
            .collect();
        let seed_medians: Vec<f64> = chunk.iter().map(|r| median(&mut r.clone())).collect();
        let pooled: Vec<u64> = chunk.concat();
        points.push(ScanPoint {
            lambda: grid[0].0,
            n: grid[0].1,
            q1_mean: mean_ci(&seed_means)?,
            q1_median: mean_ci(&seed_medians)?,
            seed_means,
            seed_medians,
            tail: fit_exponential_tail(&pooled).ok(),
        });
    }
    let summaries = points.chunks(ns.len()).map(summarize).collect();
    Ok(PhaseScanResult { points, summaries })
}

fn summarize(ladder: &[ScanPoint]) -> LambdaSummary {
    let means: Vec<&Estimate> = ladder.iter().map(|p| &p.q1_mean).collect();
    let growth_flag = ladder.len() >= 2 && means.windows(2).all(|w| w[0].ci_hi() < w[1].ci_lo());
    let monotone_within_ci = means.windows(2).all(|w| w[0].ci_lo() <= w[1].ci_hi());
    let saturation_flag = match ladder {
        [.., a, b] => {
            let tails_agree = match (&a.tail, &b.tail) {
                (Some(x), Some(y)) => x.agrees_with(y, TAIL_SLOPE_TOLERANCE),
                _ => false,
            };
            a.q1_mean.overlaps(&b.q1_mean) && tails_agree
        }
        _ => false,
    };
    LambdaSummary {
        lambda: ladder[0].lambda,
        saturation_flag,
        growth_flag,
        monotone_within_ci,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_geometric() -> Vec<u64> {
        // P{X > r} = 2^-(r+1) exactly on r = 0..=19
        let mut out = Vec::new();
        for k in 0..20u64 {
            out.extend(std::iter::repeat_n(k, 1 << (19 - k)));
        }
        out.push(20);
        out
    }

    #[test]
    fn exact_geometric_fit() {
        let samples = synthetic_geometric();
        assert_eq!(samples.len(), 1 << 20);
        let fit = fit_exponential_tail(&samples).unwrap();
        assert!((fit.slope + std::f64::consts::LN_2).abs() < 1e-6);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert!((fit.intercept + std::f64::consts::LN_2).abs() < 1e-9);
        assert!(fit.min_count >= MIN_BIN_COUNT);
        assert_eq!(fit.support, (0..=12).collect::<Vec<_>>());
    }

    #[test]
    fn degenerate_fits() {
        assert_eq!(
            fit_exponential_tail(&[0; 1000]).unwrap_err(),
            AnalysisError::TooFewBins { usable: 0 }
        );
        assert!(fit_exponential_tail(&[]).is_err());
        let two_bins: Vec<u64> = (0..3000).map(|i| i % 3).collect();
        assert_eq!(
            fit_exponential_tail(&two_bins).unwrap_err(),
            AnalysisError::TooFewBins { usable: 2 }
        );
    }

    #[test]
    fn batch_means_rules() {
        let series: Vec<f64> = (0..1000).map(|i| (i % 2) as f64).collect();
        assert!(matches!(
            batch_means(&series, 10),
            Err(AnalysisError::TooFewBatches { got: 10 })
        ));
        let est = batch_means(&series, 20).unwrap();
        assert_eq!(est.value, 0.5);
        assert_eq!(est.ci_halfwidth, 0.0);
        assert!(batch_means(&series[..5], 20).is_err());
    }

    #[test]
    fn t_interval_matches_table() {
        // t_{0.975, 9} = 2.262
        assert!((t_quantile(10) - 2.2622).abs() < 1e-3);
        let est = mean_ci(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(est.value, 2.0);
        assert!((est.ci_halfwidth - 4.3027 * (1.0f64 / 3.0).sqrt()).abs() < 1e-3);
    }

    #[test]
    fn flux_from_regular_times() {
        let times: Vec<f64> = (1..=1000).map(|k| k as f64 * 0.5).collect();
        let f = flux_from_times(&times, (0.0, 500.0), 20).unwrap();
        assert!((f.value - 2.0).abs() < 1e-12);
        assert!(f.ci_halfwidth < 1e-9);
        assert!(flux_from_times(&times, (0.0, 500.0), 19).is_err());
    }

    #[test]
    fn zero_samples() {
        let zeros = vec![QueueState::finite(vec![0, 0, 0]).unwrap(); 200];
        let probs = boundary_probabilities(&zeros, 20).unwrap();
        assert_eq!(probs.len(), 3);
        assert!(probs.iter().all(|p| p.value == 0.0 && p.ci_halfwidth == 0.0));
        let busy = busy_interval_distribution(&zeros);
        assert!(busy.survival_b[1..].iter().all(|&p| p == 0.0));
        assert_eq!(busy.survival_b[0], 1.0);
    }

    #[test]
    fn bprime_survival_dominates() {
        let samples: Vec<QueueState> = [vec![1, 0, 3], vec![2, 2, 0], vec![0, 5], vec![3, 1, 1, 1]]
            .into_iter()
            .map(QueueState::infinite)
            .collect();
        let busy = busy_interval_distribution(&samples);
        for (b, bp) in busy.survival_b.iter().zip(&busy.survival_bprime) {
            assert!(bp >= b);
        }
    }

    #[test]
    fn scan_grid_errors() {
        let cfg = ScanConfig {
            seeds: vec![1, 2],
            time_horizon: 10.0,
            burn_in_fraction: 0.5,
            samples_per_seed: 10,
            workers: 1,
        };
        assert!(phase_scan(&[1.2], &[5], &cfg).is_err());
        assert!(phase_scan(&[0.2], &[10, 5], &cfg).is_err());
        let one_seed = ScanConfig {
            seeds: vec![1],
            ..cfg.clone()
        };
        assert!(phase_scan(&[0.2], &[5], &one_seed).is_err());
        let small = phase_scan(&[0.2], &[2, 4], &cfg).unwrap();
        assert_eq!(small.points.len(), 2);
        assert_eq!(small.summaries.len(), 1);
    }
}
