//! State representation and transition rules for the back-pressure tandem.
//!
//! Sites are numbered from 1. A [`QueueState`] stores the queue length at
//! every site of a finite tandem of `N` servers, or, for the infinite tandem,
//! the lengths up to the rightmost occupied site. Every site outside the
//! stored range reads as zero, which also gives the virtual site `N + 1` of a
//! finite system.
//!
//! A server at site `n` works only while `Q_n > Q_{n+1}`; a ring of its unit
//! rate clock while it is blocked is simply ignored.

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("site {site} is outside the horizon {horizon}")]
    SiteOutOfRange { site: usize, horizon: Horizon },
    #[error("finite horizon needs N >= 1")]
    EmptyHorizon,
    #[error("state of length {got} does not fit horizon {horizon}")]
    LengthMismatch { got: usize, horizon: Horizon },
    #[error("arrival rate must be positive and finite, got {0}")]
    BadRate(f64),
    #[error("time horizon must be nonnegative and finite, got {0}")]
    BadTimeHorizon(f64),
    #[error("tail sums overflow: total customer count is not finite in u64")]
    UnboundedTotal,
}

/// Number of servers in the tandem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Horizon {
    Finite(usize),
    Infinite,
}

impl Horizon {
    /// Largest site index that exists, `None` for the infinite tandem.
    pub fn last_site(self) -> Option<usize> {
        match self {
            Horizon::Finite(n) => Some(n),
            Horizon::Infinite => None,
        }
    }

    pub fn contains(self, site: usize) -> bool {
        site >= 1 && self.last_site().is_none_or(|n| site <= n)
    }
}

impl fmt::Display for Horizon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Horizon::Finite(n) => write!(f, "{n}"),
            Horizon::Infinite => f.write_str("inf"),
        }
    }
}

/// One elementary event of the tandem dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Event {
    /// Exogenous arrival at site 1.
    Arrival,
    /// A point of the service clock of the given site.
    ServiceRing(usize),
}

/// What an event did to the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transition {
    Arrived,
    /// A customer moved from `from` to `from + 1`.
    Moved { from: usize },
    /// A customer left the finite system from its last site.
    Departed,
    Suppressed,
}

impl Transition {
    /// Whether the event changed the state.
    pub fn is_effective(self) -> bool {
        !matches!(self, Transition::Suppressed)
    }
}

/// Queue lengths along the tandem.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QueueState {
    lengths: Vec<u64>,
    horizon: Horizon,
}

impl QueueState {
    pub fn empty(horizon: Horizon) -> Result<Self, ModelError> {
        match horizon {
            Horizon::Finite(0) => Err(ModelError::EmptyHorizon),
            Horizon::Finite(n) => Ok(Self {
                lengths: vec![0; n],
                horizon,
            }),
            Horizon::Infinite => Ok(Self {
                lengths: Vec::new(),
                horizon,
            }),
        }
    }

    /// Builds a state from per-site lengths, site 1 first.
    ///
    /// A finite horizon needs exactly `N` entries. For the infinite tandem
    /// trailing zeros are dropped.
    pub fn from_lengths(horizon: Horizon, mut lengths: Vec<u64>) -> Result<Self, ModelError> {
        match horizon {
            Horizon::Finite(0) => return Err(ModelError::EmptyHorizon),
            Horizon::Finite(n) if lengths.len() != n => {
                return Err(ModelError::LengthMismatch {
                    got: lengths.len(),
                    horizon,
                })
            }
            Horizon::Finite(_) => {}
            Horizon::Infinite => {
                while lengths.last() == Some(&0) {
                    lengths.pop();
                }
            }
        }
        Ok(Self { lengths, horizon })
    }

    /// Shorthand for an infinite-tandem state.
    pub fn infinite(lengths: Vec<u64>) -> Self {
        Self::from_lengths(Horizon::Infinite, lengths).expect("infinite horizon accepts any length")
    }

    /// Shorthand for a finite state whose horizon is the length of `lengths`.
    pub fn finite(lengths: Vec<u64>) -> Result<Self, ModelError> {
        Self::from_lengths(Horizon::Finite(lengths.len()), lengths)
    }

    pub fn horizon(&self) -> Horizon {
        self.horizon
    }

    /// Stored lengths; index 0 is site 1.
    pub fn lengths(&self) -> &[u64] {
        &self.lengths
    }

    /// Number of stored sites: `N` when finite, the rightmost occupied
    /// site when infinite.
    pub fn extent(&self) -> usize {
        self.lengths.len()
    }

    /// Queue length at `site`; zero outside the stored range.
    pub fn get(&self, site: usize) -> u64 {
        if site == 0 {
            return 0;
        }
        self.lengths.get(site - 1).copied().unwrap_or(0)
    }

    /// Total customer count.
    pub fn total(&self) -> u64 {
        self.lengths.iter().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.lengths.iter().all(|&q| q == 0)
    }

    /// Whether the server at `site` is allowed to work.
    pub fn is_eligible(&self, site: usize) -> Result<bool, ModelError> {
        if !self.horizon.contains(site) {
            return Err(ModelError::SiteOutOfRange {
                site,
                horizon: self.horizon,
            });
        }
        Ok(self.eligible_unchecked(site))
    }

    /// `Q_site > Q_{site+1}` without range checking.
    #[inline]
    pub fn eligible_unchecked(&self, site: usize) -> bool {
        self.get(site) > self.get(site + 1)
    }

    /// Applies `event` in place.
    pub fn apply(&mut self, event: Event) -> Transition {
        match event {
            Event::Arrival => {
                if self.lengths.is_empty() {
                    self.lengths.push(0);
                }
                self.lengths[0] += 1;
                Transition::Arrived
            }
            Event::ServiceRing(site) => {
                if !self.horizon.contains(site) || !self.eligible_unchecked(site) {
                    return Transition::Suppressed;
                }
                self.lengths[site - 1] -= 1;
                if self.horizon.last_site() == Some(site) {
                    return Transition::Departed;
                }
                if self.lengths.len() == site {
                    self.lengths.push(0);
                }
                self.lengths[site] += 1;
                Transition::Moved { from: site }
            }
        }
    }

    /// Pure form of [`apply`](Self::apply).
    pub fn apply_transition(&self, event: Event) -> QueueState {
        let mut next = self.clone();
        next.apply(event);
        next
    }

    /// Smallest site with an empty queue.
    pub fn busy_interval_b(&self) -> BusyInterval {
        match self.lengths.iter().position(|&q| q == 0) {
            Some(i) => BusyInterval::open(i + 1),
            None => self.past_extent(self.lengths.len() + 1),
        }
    }

    /// Smallest `n` with fewer than `n` customers at sites `1..=n`.
    ///
    /// Equivalently, the leftmost empty site after spreading every surplus
    /// customer to the leftmost empty sites.
    pub fn busy_interval_bprime(&self) -> BusyInterval {
        let mut prefix = 0u64;
        for (i, &q) in self.lengths.iter().enumerate() {
            prefix += q;
            if prefix < (i + 1) as u64 {
                return BusyInterval::open(i + 1);
            }
        }
        // Beyond the stored range the prefix sum stays at the total.
        let first_free = (prefix as usize + 1).max(self.lengths.len() + 1);
        self.past_extent(first_free)
    }

    fn past_extent(&self, site: usize) -> BusyInterval {
        match self.horizon {
            Horizon::Finite(n) => BusyInterval {
                site: n + 1,
                saturated: true,
            },
            Horizon::Infinite => BusyInterval::open(site),
        }
    }

    /// `Q_n + 1 >= max_{k>n} Q_k` for every site `n`.
    pub fn check_tail_dominance(&self) -> bool {
        let mut max_right = 0u64;
        for &q in self.lengths.iter().rev() {
            if q + 1 < max_right {
                return false;
            }
            max_right = max_right.max(q);
        }
        true
    }

    /// Suffix sums `sum_{k>=n} Q_k` for `n = 1..=len`, padded with zeros.
    fn suffix_sums(&self, len: usize) -> Result<Vec<u64>, ModelError> {
        let mut out = vec![0u64; len];
        let mut acc = 0u64;
        for site in (1..=len).rev() {
            acc = acc
                .checked_add(self.get(site))
                .ok_or(ModelError::UnboundedTotal)?;
            out[site - 1] = acc;
        }
        Ok(out)
    }
}

impl fmt::Display for QueueState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, q) in self.lengths.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{q}")?;
        }
        f.write_str(")")
    }
}

/// Result of a busy-interval functional.
///
/// `saturated` is set when a finite state has no site satisfying the
/// definition; `site` is then `N + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BusyInterval {
    pub site: usize,
    pub saturated: bool,
}

impl BusyInterval {
    fn open(site: usize) -> Self {
        Self {
            site,
            saturated: false,
        }
    }
}

/// Partial orders on queue states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OrderRelation {
    /// `a_n <= b_n` at every site.
    Componentwise,
    /// Every suffix sum of `a` is at most the matching suffix sum of `b`.
    TailSum,
}

/// Tests `a <= b` (componentwise) or `a ⪯ b` (tail sums).
///
/// States of different horizons are compared as sequences padded with zeros.
pub fn compare(a: &QueueState, b: &QueueState, rel: OrderRelation) -> Result<bool, ModelError> {
    let len = a.extent().max(b.extent());
    match rel {
        OrderRelation::Componentwise => Ok((1..=len).all(|n| a.get(n) <= b.get(n))),
        OrderRelation::TailSum => {
            let sa = a.suffix_sums(len)?;
            let sb = b.suffix_sums(len)?;
            Ok(sa.iter().zip(&sb).all(|(x, y)| x <= y))
        }
    }
}

/// Parameters of one tandem run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub lambda: f64,
    pub horizon: Horizon,
    pub seed: u64,
    pub time_horizon: f64,
}

impl SystemConfig {
    pub fn new(
        lambda: f64,
        horizon: Horizon,
        seed: u64,
        time_horizon: f64,
    ) -> Result<Self, ModelError> {
        let cfg = Self {
            lambda,
            horizon,
            seed,
            time_horizon,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(ModelError::BadRate(self.lambda));
        }
        if !(self.time_horizon >= 0.0 && self.time_horizon.is_finite()) {
            return Err(ModelError::BadTimeHorizon(self.time_horizon));
        }
        if self.horizon == Horizon::Finite(0) {
            return Err(ModelError::EmptyHorizon);
        }
        Ok(())
    }

    /// Which side of the critical load 1/4 this configuration sits on.
    pub fn regime(&self) -> Regime {
        match self.lambda.partial_cmp(&CRITICAL_LOAD) {
            Some(Ordering::Less) => Regime::Subcritical,
            Some(Ordering::Greater) => Regime::Supercritical,
            _ => Regime::Critical,
        }
    }
}

/// Load separating uniformly bounded queues from queues that grow with `N`.
pub const CRITICAL_LOAD: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Subcritical,
    Critical,
    Supercritical,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fin(v: &[u64]) -> QueueState {
        QueueState::finite(v.to_vec()).unwrap()
    }

    #[test]
    fn eligibility() {
        assert!(fin(&[2, 1]).is_eligible(1).unwrap());
        assert!(!fin(&[1, 1]).is_eligible(1).unwrap());
        // virtual site N+1 is empty
        assert!(fin(&[1]).is_eligible(1).unwrap());
        assert!(fin(&[1]).is_eligible(2).is_err());
        assert!(fin(&[1]).is_eligible(0).is_err());
        assert!(QueueState::infinite(vec![]).is_eligible(7).is_ok());
    }

    #[test]
    fn transitions() {
        let s = fin(&[1, 1]);
        assert_eq!(s.apply_transition(Event::ServiceRing(1)), s);
        assert_eq!(
            fin(&[2, 0]).apply_transition(Event::ServiceRing(1)),
            fin(&[1, 1])
        );
        let mut s = fin(&[1, 1]);
        assert_eq!(s.apply(Event::ServiceRing(2)), Transition::Departed);
        assert_eq!(s, fin(&[1, 0]));
        assert_eq!(s.apply(Event::ServiceRing(3)), Transition::Suppressed);
        assert_eq!(s.apply(Event::Arrival), Transition::Arrived);
        assert_eq!(s, fin(&[2, 0]));
    }

    #[test]
    fn infinite_state_grows_and_stays_trimmed() {
        let mut s = QueueState::empty(Horizon::Infinite).unwrap();
        s.apply(Event::Arrival);
        assert_eq!(s.lengths(), &[1]);
        assert_eq!(s.apply(Event::ServiceRing(1)), Transition::Moved { from: 1 });
        assert_eq!(s.lengths(), &[0, 1]);
        assert_eq!(s.apply(Event::ServiceRing(5)), Transition::Suppressed);
        assert_eq!(QueueState::infinite(vec![3, 0, 0]).extent(), 1);
    }

    #[test]
    fn busy_intervals() {
        let inf = QueueState::infinite;
        assert_eq!(inf(vec![2, 1, 0, 1]).busy_interval_b().site, 3);
        assert_eq!(inf(vec![0, 5, 5]).busy_interval_b().site, 1);
        assert_eq!(inf(vec![]).busy_interval_b().site, 1);
        assert_eq!(inf(vec![2, 0, 0]).busy_interval_bprime().site, 3);
        assert_eq!(inf(vec![0, 7]).busy_interval_bprime().site, 1);
        assert_eq!(inf(vec![1, 1, 0]).busy_interval_bprime().site, 3);
        assert_eq!(inf(vec![1, 1, 0]).busy_interval_b().site, 3);
        // surplus spills past the stored extent
        assert_eq!(inf(vec![5]).busy_interval_bprime().site, 6);
        assert_eq!(inf(vec![1, 1]).busy_interval_bprime().site, 3);

        let sat = fin(&[1, 2, 1]).busy_interval_b();
        assert_eq!(
            sat,
            BusyInterval {
                site: 4,
                saturated: true
            }
        );
        assert!(fin(&[1, 2, 1]).busy_interval_bprime().saturated);
        assert!(!fin(&[2, 0, 0]).busy_interval_bprime().saturated);
    }

    #[test]
    fn orders() {
        let a = fin(&[1, 1]);
        let b = fin(&[0, 2]);
        assert!(compare(&a, &b, OrderRelation::TailSum).unwrap());
        assert!(!compare(&a, &b, OrderRelation::Componentwise).unwrap());
        for rel in [OrderRelation::TailSum, OrderRelation::Componentwise] {
            assert!(compare(&a, &a, rel).unwrap());
        }
        // mixed horizons compare as zero-padded sequences
        let short = fin(&[1]);
        let long = QueueState::infinite(vec![1, 0, 3]);
        assert!(compare(&short, &long, OrderRelation::Componentwise).unwrap());
        assert!(!compare(&long, &short, OrderRelation::TailSum).unwrap());

        let huge = QueueState::infinite(vec![u64::MAX, 1]);
        assert_eq!(
            compare(&huge, &huge, OrderRelation::TailSum),
            Err(ModelError::UnboundedTotal)
        );
    }

    #[test]
    fn tail_dominance() {
        assert!(fin(&[3, 2, 1]).check_tail_dominance());
        assert!(!fin(&[1, 3, 0]).check_tail_dominance());
        assert!(fin(&[0, 0, 0]).check_tail_dominance());
        assert!(fin(&[0, 1, 1]).check_tail_dominance());
        assert!(!fin(&[0, 0, 2]).check_tail_dominance());
    }

    #[test]
    fn config_validation() {
        assert!(SystemConfig::new(0.3, Horizon::Finite(3), 1, 10.0).is_ok());
        assert!(SystemConfig::new(0.0, Horizon::Finite(3), 1, 10.0).is_err());
        assert!(SystemConfig::new(0.3, Horizon::Finite(0), 1, 10.0).is_err());
        assert!(SystemConfig::new(0.3, Horizon::Infinite, 1, f64::NAN).is_err());
        let cfg = SystemConfig::new(0.3, Horizon::Infinite, 1, 1.0).unwrap();
        assert_eq!(cfg.regime(), Regime::Supercritical);
    }
}
