//! Exact answers for small systems.
//!
//! A finite tandem with every queue truncated at `cap` is a finite
//! continuous-time Markov chain whose stationary law can be solved to machine
//! precision. Arrivals that find site 1 at `cap` are lost; no other transition
//! can overflow, since a server only feeds a strictly shorter queue. Choose
//! `cap` so that `truncation_mass` is negligible (below `1e-8`) before reading
//! the solution as the untruncated law.

use crate::engine::{ArrivalProcessSpec, ClockField};
use crate::model::{Horizon, QueueState};
use crate::tasep::{ring_flux, ring_service_record, TasepError};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest state space [`build_chain`] accepts by default.
pub const DEFAULT_STATE_LIMIT: usize = 2_000_000;
/// Default stationarity residual `max_j |(pi G)_j|`.
pub const DEFAULT_TOLERANCE: f64 = 1e-12;
/// Chains up to this size are solved by dense LU.
const DENSE_LIMIT: usize = 1500;
const MAX_SWEEPS: usize = 500_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("invalid chain parameters: {0}")]
    BadParameters(String),
    #[error("{states} states exceed the limit of {limit}; lower N or cap ((cap+1)^N states)")]
    TooLarge { states: usize, limit: usize },
    #[error("solver stopped after {iterations} sweeps with residual {residual:e}")]
    NotConverged { residual: f64, iterations: usize },
}

/// Off-diagonal transition rates; the diagonal is minus the row's outflow.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseGenerator {
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseGenerator {
    pub fn with_states(n: usize) -> Self {
        Self {
            rows: vec![Vec::new(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn add(&mut self, from: usize, to: usize, rate: f64) {
        debug_assert!(from != to && rate > 0.0);
        self.rows[from].push((to, rate));
    }

    /// Off-diagonal entries of row `i`.
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn outflow(&self, i: usize) -> f64 {
        self.rows[i].iter().map(|&(_, r)| r).sum()
    }

    /// Largest `|sum_j G_ij|` over rows.
    pub fn max_row_sum(&self) -> f64 {
        (0..self.len())
            .map(|i| (self.rows[i].iter().map(|&(_, r)| r).sum::<f64>() - self.outflow(i)).abs())
            .fold(0.0, f64::max)
    }

    /// `max_j |(pi G)_j|`.
    pub fn residual(&self, pi: &[f64]) -> f64 {
        let mut flow = vec![0.0; self.len()];
        for (i, row) in self.rows.iter().enumerate() {
            let mut out = 0.0;
            for &(j, r) in row {
                flow[j] += pi[i] * r;
                out += r;
            }
            flow[i] -= pi[i] * out;
        }
        flow.into_iter().map(f64::abs).fold(0.0, f64::max)
    }
}

/// Truncated back-pressure tandem.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedChain {
    pub sites: usize,
    pub cap: u64,
    pub lambda: f64,
    pub states: Vec<QueueState>,
    pub generator: SparseGenerator,
}

impl TruncatedChain {
    /// Index of a state, sites weighted `(cap+1)^(n-1)`.
    pub fn index_of(&self, lengths: &[u64]) -> Option<usize> {
        if lengths.len() != self.sites || lengths.iter().any(|&q| q > self.cap) {
            return None;
        }
        Some(encode(lengths, self.cap))
    }
}

fn encode(lengths: &[u64], cap: u64) -> usize {
    lengths
        .iter()
        .rev()
        .fold(0usize, |acc, &q| acc * (cap as usize + 1) + q as usize)
}

fn decode(mut index: usize, sites: usize, cap: u64) -> Vec<u64> {
    let base = cap as usize + 1;
    (0..sites)
        .map(|_| {
            let q = (index % base) as u64;
            index /= base;
            q
        })
        .collect()
}

pub fn build_chain(sites: usize, lambda: f64, cap: u64) -> Result<TruncatedChain, OracleError> {
    build_chain_limited(sites, lambda, cap, DEFAULT_STATE_LIMIT)
}

/// [`build_chain`] with an explicit state-count limit.
pub fn build_chain_limited(
    sites: usize,
    lambda: f64,
    cap: u64,
    limit: usize,
) -> Result<TruncatedChain, OracleError> {
    if sites == 0 || cap == 0 || !(lambda > 0.0 && lambda.is_finite()) {
        return Err(OracleError::BadParameters(format!(
            "need N >= 1, cap >= 1, lambda > 0 (got N {sites}, cap {cap}, lambda {lambda})"
        )));
    }
    let states_count = (cap as usize + 1)
        .checked_pow(sites as u32)
        .filter(|&n| n <= limit)
        .ok_or(OracleError::TooLarge {
            states: (cap as usize + 1).saturating_pow(sites as u32),
            limit,
        })?;
    let horizon = Horizon::Finite(sites);
    let mut generator = SparseGenerator::with_states(states_count);
    let mut states = Vec::with_capacity(states_count);
    for idx in 0..states_count {
        let q = decode(idx, sites, cap);
        if q[0] < cap {
            let mut next = q.clone();
            next[0] += 1;
            generator.add(idx, encode(&next, cap), lambda);
        }
        for n in 0..sites {
            let downstream = q.get(n + 1).copied().unwrap_or(0);
            if q[n] > downstream {
                let mut next = q.clone();
                next[n] -= 1;
                if n + 1 < sites {
                    next[n + 1] += 1;
                }
                generator.add(idx, encode(&next, cap), 1.0);
            }
        }
        states.push(QueueState::from_lengths(horizon, q).expect("N entries"));
    }
    Ok(TruncatedChain {
        sites,
        cap,
        lambda,
        states,
        generator,
    })
}

/// Solved stationary law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryDistribution {
    pub probabilities: Vec<f64>,
    pub residual: f64,
    /// Mass of states with some queue at the cap.
    pub truncation_mass: f64,
}

/// Stationary vector of an irreducible generator: `pi G = 0`, `sum pi = 1`,
/// with `max_j |(pi G)_j| <= tol`.
pub fn solve_generator(gen: &SparseGenerator, tol: f64) -> Result<(Vec<f64>, f64), OracleError> {
    let n = gen.len();
    if n == 0 {
        return Err(OracleError::BadParameters("empty chain".into()));
    }
    let start = if n <= DENSE_LIMIT {
        dense_solve(gen)
    } else {
        vec![1.0 / n as f64; n]
    };
    let residual = gen.residual(&start);
    if residual <= tol {
        return Ok((start, residual));
    }
    gauss_seidel(gen, start, tol)
}

fn dense_solve(gen: &SparseGenerator) -> Vec<f64> {
    let n = gen.len();
    // rows of A are the balance equations (columns of G); the last one is
    // replaced by the normalization
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for &(j, r) in gen.row(i) {
            a[(j, i)] += r;
        }
        a[(i, i)] -= gen.outflow(i);
    }
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    let x = a.lu().solve(&b).unwrap_or_else(|| DVector::from_element(n, 1.0 / n as f64));
    normalized(x.iter().map(|&p| p.max(0.0)).collect())
}

fn normalized(mut pi: Vec<f64>) -> Vec<f64> {
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= total);
    pi
}

fn gauss_seidel(
    gen: &SparseGenerator,
    mut pi: Vec<f64>,
    tol: f64,
) -> Result<(Vec<f64>, f64), OracleError> {
    let n = gen.len();
    let mut incoming: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for i in 0..n {
        for &(j, r) in gen.row(i) {
            incoming[j].push((i, r));
        }
    }
    let outflow: Vec<f64> = (0..n).map(|i| gen.outflow(i)).collect();
    let mut residual = f64::INFINITY;
    for sweep in 1..=MAX_SWEEPS {
        for j in 0..n {
            let inflow: f64 = incoming[j].iter().map(|&(i, r)| pi[i] * r).sum();
            pi[j] = inflow / outflow[j];
        }
        if sweep % 16 == 0 {
            pi = normalized(pi);
            residual = gen.residual(&pi);
            if residual <= tol {
                return Ok((pi, residual));
            }
        }
    }
    Err(OracleError::NotConverged {
        residual,
        iterations: MAX_SWEEPS,
    })
}

pub fn solve_stationary(chain: &TruncatedChain, tol: f64) -> Result<StationaryDistribution, OracleError> {
    let (probabilities, residual) = solve_generator(&chain.generator, tol)?;
    let truncation_mass = chain
        .states
        .iter()
        .zip(&probabilities)
        .filter(|(s, _)| s.lengths().contains(&chain.cap))
        .map(|(_, p)| p)
        .sum();
    Ok(StationaryDistribution {
        probabilities,
        residual,
        truncation_mass,
    })
}

/// `E Q_n` for `n = 1..=N`.
pub fn expected_queue_profile(chain: &TruncatedChain, dist: &StationaryDistribution) -> Vec<f64> {
    let mut means = vec![0.0; chain.sites];
    for (s, &p) in chain.states.iter().zip(&dist.probabilities) {
        for (m, &q) in means.iter_mut().zip(s.lengths()) {
            *m += p * q as f64;
        }
    }
    means
}

/// `P{Q_n > Q_{n+1}}` for `n = 1..=N`, with `Q_{N+1} = 0`.
pub fn exact_boundary_probabilities(chain: &TruncatedChain, dist: &StationaryDistribution) -> Vec<f64> {
    let mut out = vec![0.0; chain.sites];
    for (s, &p) in chain.states.iter().zip(&dist.probabilities) {
        for (n, o) in out.iter_mut().enumerate() {
            if s.eligible_unchecked(n + 1) {
                *o += p;
            }
        }
    }
    out
}

/// Law of `Q_site` on `0..=cap`.
pub fn marginal(chain: &TruncatedChain, dist: &StationaryDistribution, site: usize) -> Vec<f64> {
    let mut out = vec![0.0; chain.cap as usize + 1];
    for (s, &p) in chain.states.iter().zip(&dist.probabilities) {
        out[s.get(site) as usize] += p;
    }
    out
}

/// Exclusion process on a ring with a fixed number of particles.
#[derive(Debug, Clone, PartialEq)]
pub struct RingChain {
    pub len: usize,
    pub count: usize,
    pub configs: Vec<Vec<bool>>,
    pub generator: SparseGenerator,
}

/// Enumerates all `C(len, count)` configurations with unit jump rates.
pub fn ring_tasep_chain(len: usize, count: usize) -> Result<RingChain, OracleError> {
    if len < 2 || count > len || len > 24 {
        return Err(OracleError::BadParameters(format!(
            "ring chain needs 2 <= L <= 24 and K <= L (got L {len}, K {count})"
        )));
    }
    let configs: Vec<Vec<bool>> = (0u32..1 << len)
        .filter(|m| m.count_ones() as usize == count)
        .map(|m| (0..len).map(|i| m >> i & 1 == 1).collect())
        .collect();
    let index: std::collections::HashMap<&[bool], usize> = configs
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_slice(), i))
        .collect();
    let mut generator = SparseGenerator::with_states(configs.len());
    for (from, c) in configs.iter().enumerate() {
        for i in 0..len {
            let j = (i + 1) % len;
            if c[i] && !c[j] {
                let mut next = c.clone();
                next[i] = false;
                next[j] = true;
                generator.add(from, index[next.as_slice()], 1.0);
            }
        }
    }
    Ok(RingChain {
        len,
        count,
        configs,
        generator,
    })
}

impl RingChain {
    pub fn solve(&self, tol: f64) -> Result<StationaryDistribution, OracleError> {
        let (probabilities, residual) = solve_generator(&self.generator, tol)?;
        Ok(StationaryDistribution {
            probabilities,
            residual,
            truncation_mass: 0.0,
        })
    }

    /// Stationary rate of jumps from site 1 to site 2.
    pub fn bond_flux(&self, dist: &StationaryDistribution) -> f64 {
        self.configs
            .iter()
            .zip(&dist.probabilities)
            .filter(|(c, _)| c[0] && !c[1])
            .map(|(_, p)| p)
            .sum()
    }

    pub fn closed_form_flux(&self) -> f64 {
        ring_flux(self.len, self.count)
    }
}

/// `max_{0 <= s <= horizon} [A(-s, 0) - S(-s, 0)]` for finite streams.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoynesEstimate {
    pub horizon: f64,
    pub value: u64,
}

/// Evaluates the Loynes supremum over `s` in `[0, horizon]`.
///
/// `arrival_times` and `service_times` are epochs on the negative half-line;
/// `A(-s, 0)` counts arrivals in `(-s, 0]`. The supremum is attained just past
/// an event epoch, so scanning epochs from 0 backwards is exact.
pub fn loynes_estimate(arrival_times: &[f64], service_times: &[f64], horizon: f64) -> LoynesEstimate {
    let mut events: Vec<(f64, i64)> = arrival_times
        .iter()
        .map(|&t| (t, 1))
        .chain(service_times.iter().map(|&t| (t, -1)))
        .filter(|&(t, _)| t <= 0.0 && t > -horizon)
        .collect();
    events.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut running = 0i64;
    let mut best = 0i64;
    let mut i = 0;
    while i < events.len() {
        let t = events[i].0;
        while i < events.len() && events[i].0 == t {
            running += events[i].1;
            i += 1;
        }
        best = best.max(running);
    }
    LoynesEstimate {
        horizon,
        value: best as u64,
    }
}

/// [`loynes_estimate`] for streams recorded forward in time on `[0, end]`,
/// read backwards from `end`.
pub fn loynes_from_forward(
    arrival_times: &[f64],
    service_times: &[f64],
    end: f64,
    horizon: f64,
) -> LoynesEstimate {
    let shift = |ts: &[f64]| -> Vec<f64> {
        ts.iter().filter(|&&t| t <= end).map(|&t| t - end).collect()
    };
    loynes_estimate(&shift(arrival_times), &shift(service_times), horizon.min(end))
}

/// Loynes estimate at the end of `[0, horizon]` for Poisson(`lambda`)
/// arrivals served by the bond 1 to 2 jumps of a stationary ring with `count`
/// particles on `len` sites. Arrivals and ring clocks are independent streams
/// of one seed.
pub fn loynes_ring_replication(
    lambda: f64,
    len: usize,
    count: usize,
    seed: u64,
    horizon: f64,
) -> Result<LoynesEstimate, TasepError> {
    let service = ring_service_record(len, count, seed, horizon)?;
    let spec = ArrivalProcessSpec::poisson(lambda);
    spec.validate()?;
    let mut source = ClockField::new(seed).arrivals(&spec);
    let mut arrivals = Vec::new();
    while let Some(t) = source.next_arrival() {
        if t > horizon {
            break;
        }
        arrivals.push(t);
    }
    Ok(loynes_from_forward(&arrivals, &service.jump_times, horizon, horizon))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_chains() {
        let c = build_chain(1, 0.5, 2).unwrap();
        assert_eq!(c.states.len(), 3);
        assert_eq!(c.generator.row(0), &[(1, 0.5)]);
        assert_eq!(c.generator.row(2), &[(1, 1.0)]);

        let c = build_chain(2, 0.4, 1).unwrap();
        assert_eq!(c.states.len(), 4);
        let full = c.index_of(&[1, 1]).unwrap();
        // arrival lost at cap; only site 2 serves
        assert_eq!(c.generator.row(full), &[(c.index_of(&[1, 0]).unwrap(), 1.0)]);

        let c = build_chain(2, 0.3, 3).unwrap();
        assert_eq!(c.states.len(), 16);
        assert!(c.generator.max_row_sum() < 1e-12);
        for i in 0..16 {
            assert!(c.generator.row(i).iter().all(|&(_, r)| r == 1.0 || r == 0.3));
        }
    }

    #[test]
    fn refuses_oversized_chains() {
        assert!(matches!(
            build_chain(8, 0.5, 10),
            Err(OracleError::TooLarge { .. })
        ));
        assert!(matches!(
            build_chain_limited(3, 0.5, 4, 100),
            Err(OracleError::TooLarge { states: 125, .. })
        ));
        assert!(build_chain(0, 0.5, 3).is_err());
        assert!(build_chain(2, 0.0, 3).is_err());
    }

    #[test]
    fn mm1_geometric() {
        let c = build_chain(1, 0.5, 30).unwrap();
        let d = solve_stationary(&c, DEFAULT_TOLERANCE).unwrap();
        assert!(d.residual <= DEFAULT_TOLERANCE);
        assert!((d.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for k in 0..=20 {
            let exact = 0.5 * 0.5f64.powi(k);
            assert!((d.probabilities[k as usize] - exact).abs() < 1e-8);
        }
        let weights: Vec<f64> = (0..=30).map(|k| 0.5f64.powi(k)).collect();
        let truncated_mean = weights.iter().enumerate().map(|(k, w)| k as f64 * w).sum::<f64>()
            / weights.iter().sum::<f64>();
        let mean = expected_queue_profile(&c, &d)[0];
        assert!((mean - truncated_mean).abs() < 1e-10, "{mean}");
        assert!(d.truncation_mass < 1e-9);
    }

    #[test]
    fn gauss_seidel_matches_dense() {
        let c = build_chain(2, 0.5, 12).unwrap();
        let (dense, _) = solve_generator(&c.generator, 1e-13).unwrap();
        let (gs, res) = gauss_seidel(
            &c.generator,
            vec![1.0 / c.states.len() as f64; c.states.len()],
            1e-13,
        )
        .unwrap();
        assert!(res <= 1e-13);
        let gap = dense.iter().zip(&gs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-10, "{gap}");
    }

    #[test]
    fn ring_chain_is_uniform() {
        let ring = ring_tasep_chain(4, 2).unwrap();
        assert_eq!(ring.configs.len(), 6);
        let d = ring.solve(DEFAULT_TOLERANCE).unwrap();
        for p in &d.probabilities {
            assert!((p - 1.0 / 6.0).abs() < 1e-10);
        }
        assert!((ring.bond_flux(&d) - ring.closed_form_flux()).abs() < 1e-12);
        assert!((ring.closed_form_flux() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn loynes_hand_example() {
        let est = loynes_estimate(&[-0.5, -1.5], &[-1.0], 2.0);
        assert_eq!(est.value, 1);
        assert_eq!(loynes_estimate(&[], &[-1.0, -0.2], 5.0).value, 0);
        // window excludes the arrival at -1.5
        assert_eq!(loynes_estimate(&[-0.5, -1.5], &[-1.0], 1.2).value, 1);
        assert_eq!(loynes_estimate(&[-0.5, -0.7], &[-0.6], 1.0).value, 1);
        assert_eq!(loynes_estimate(&[-0.5, -0.7], &[], 1.0).value, 2);
        // simultaneous events count together
        assert_eq!(loynes_estimate(&[-1.0], &[-1.0], 2.0).value, 0);

        let fwd = loynes_from_forward(&[1.5, 0.5], &[1.0], 2.0, 2.0);
        assert_eq!(fwd.value, 1);
    }
}
