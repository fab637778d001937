//! Totally asymmetric simple exclusion on a ring or a line window.
//!
//! A point of the clock at site `n` makes the particle at `n`, if any, jump
//! to `n + 1` when that site is empty. The same clocks drive the queues in
//! the bounding construction, where the ring of `L` sites is lifted
//! periodically onto the tandem: tandem site `n` and ring site
//! `((n - 1) mod L) + 1` share one clock. The lifted configuration evolves as
//! an exclusion process on the half-line, so the path-wise comparisons hold
//! exactly; the price is that tandem sites `L` apart share clocks, which only
//! matters once the occupied region spans more than `L` sites.

use crate::engine::{
    drive, sub_rng, ArrivalProcessSpec, ClockField, Driven, Engine, EngineError, QueueSystem,
    Sample, TimedEvent, Trajectory, TAG_INIT,
};
use crate::model::{QueueState, SystemConfig};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Density maximizing the stationary flux.
pub const DEFAULT_DENSITY: f64 = 0.5;
/// Default ring size of the bounding environment.
pub const DEFAULT_RING: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TasepError {
    #[error("density must lie in (0, 1), got {0}")]
    BadDensity(f64),
    #[error("ring of {len} sites cannot hold {count} particles")]
    BadCount { len: usize, count: usize },
    #[error("ring needs at least 2 sites, got {0}")]
    RingTooSmall(usize),
    #[error("line window [{first}, {last}] is empty")]
    EmptyWindow { first: i64, last: i64 },
    #[error("operation needs a {0} topology")]
    WrongTopology(&'static str),
    #[error("no particle at sites >= 2 in the window")]
    NoParticle,
    #[error("time horizon must be nonnegative and finite, got {0}")]
    BadHorizon(f64),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Topology {
    /// Sites `1..=L`, site `L` feeding site 1.
    Ring(usize),
    /// Sites `first..=last`; a particle jumping from `last` leaves the window.
    Line { first: i64, last: i64 },
}

impl Topology {
    fn validate(self) -> Result<usize, TasepError> {
        match self {
            Topology::Ring(l) if l < 2 => Err(TasepError::RingTooSmall(l)),
            Topology::Ring(l) => Ok(l),
            Topology::Line { first, last } if last < first => {
                Err(TasepError::EmptyWindow { first, last })
            }
            Topology::Line { first, last } => Ok((last - first + 1) as usize),
        }
    }

    fn origin(self) -> i64 {
        match self {
            Topology::Ring(_) => 1,
            Topology::Line { first, .. } => first,
        }
    }
}

/// Occupancy of every site in the window, with optional particle labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TasepState {
    topology: Topology,
    occupancy: Vec<bool>,
    particle_ids: Option<Vec<Option<u32>>>,
    density: f64,
}

fn check_density(rho: f64) -> Result<(), TasepError> {
    if rho > 0.0 && rho < 1.0 {
        Ok(())
    } else {
        Err(TasepError::BadDensity(rho))
    }
}

/// Product Bernoulli(`rho`) occupancy.
pub fn bernoulli_init(topology: Topology, rho: f64, seed: u64) -> Result<TasepState, TasepError> {
    check_density(rho)?;
    let len = topology.validate()?;
    let mut rng = sub_rng(seed, &[TAG_INIT, 0]);
    let occupancy = (0..len).map(|_| rng.random::<f64>() < rho).collect();
    Ok(TasepState {
        topology,
        occupancy,
        particle_ids: None,
        density: rho,
    })
}

/// Exactly `count` particles placed uniformly on a ring of `len` sites.
///
/// This is a draw from the stationary law of the ring with `count` particles.
pub fn fixed_count_ring(len: usize, count: usize, seed: u64) -> Result<TasepState, TasepError> {
    Topology::Ring(len).validate()?;
    if count > len {
        return Err(TasepError::BadCount { len, count });
    }
    let mut rng = sub_rng(seed, &[TAG_INIT, 1]);
    let mut occupancy = vec![false; len];
    for i in sample(&mut rng, len, count) {
        occupancy[i] = true;
    }
    Ok(TasepState {
        topology: Topology::Ring(len),
        occupancy,
        particle_ids: None,
        density: count as f64 / len as f64,
    })
}

/// Ring of `len` sites with `round(rho * len)` particles.
pub fn ring_with_density(len: usize, rho: f64, seed: u64) -> Result<TasepState, TasepError> {
    check_density(rho)?;
    fixed_count_ring(len, (rho * len as f64).round() as usize, seed)
}

/// Exact stationary bond flux of a ring with `count` particles on `len` sites.
pub fn ring_flux(len: usize, count: usize) -> f64 {
    let (l, k) = (len as f64, count as f64);
    k * (l - k) / (l * (l - 1.0))
}

impl TasepState {
    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn density(&self) -> f64 {
        self.density
    }

    pub fn len(&self) -> usize {
        self.occupancy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupancy.is_empty()
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }

    pub fn particle_count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    pub fn particle_ids(&self) -> Option<&[Option<u32>]> {
        self.particle_ids.as_deref()
    }

    /// Labels particles `0, 1, ...` from left to right.
    pub fn label_particles(&mut self) {
        let mut next = 0u32;
        self.particle_ids = Some(
            self.occupancy
                .iter()
                .map(|&o| {
                    o.then(|| {
                        next += 1;
                        next - 1
                    })
                })
                .collect(),
        );
    }

    pub fn site_of(&self, index: usize) -> i64 {
        self.topology.origin() + index as i64
    }

    pub fn index_of(&self, site: i64) -> Option<usize> {
        let i = site - self.topology.origin();
        (i >= 0 && (i as usize) < self.len()).then_some(i as usize)
    }

    /// Whether `site` holds a particle; `false` outside the window.
    pub fn occupied(&self, site: i64) -> bool {
        self.index_of(site).is_some_and(|i| self.occupancy[i])
    }

    /// Index of the site to the right, `None` past the end of a line.
    fn next_index(&self, i: usize) -> Option<usize> {
        match self.topology {
            Topology::Ring(l) => Some((i + 1) % l),
            Topology::Line { .. } => (i + 1 < self.len()).then_some(i + 1),
        }
    }

    fn prev_index(&self, i: usize) -> Option<usize> {
        match self.topology {
            Topology::Ring(l) => Some((i + l - 1) % l),
            Topology::Line { .. } => i.checked_sub(1),
        }
    }

    /// Whether the particle at index `i` would jump at a clock point.
    pub fn can_jump_index(&self, i: usize) -> bool {
        self.occupancy[i] && self.next_index(i).is_none_or(|j| !self.occupancy[j])
    }

    /// Moves the particle at `i` right if allowed; returns whether it moved.
    pub fn jump_index(&mut self, i: usize) -> bool {
        if !self.can_jump_index(i) {
            return false;
        }
        self.occupancy[i] = false;
        let label = self.particle_ids.as_mut().and_then(|ids| ids[i].take());
        if let Some(j) = self.next_index(i) {
            self.occupancy[j] = true;
            if let Some(ids) = self.particle_ids.as_mut() {
                ids[j] = label;
            }
        }
        true
    }

    fn clock_of_index(&self, i: usize) -> usize {
        i + 1
    }

    fn index_of_clock(&self, clock: usize) -> Option<usize> {
        (clock >= 1 && clock <= self.len()).then(|| clock - 1)
    }

    fn wake_neighbours(&self, i: usize, wake: &mut Vec<usize>) {
        if let Some(p) = self.prev_index(i) {
            wake.push(self.clock_of_index(p));
        }
        wake.push(self.clock_of_index(i));
        if let Some(n) = self.next_index(i) {
            wake.push(self.clock_of_index(n));
        }
    }
}

/// Times of particle jumps out of `bond` towards `bond + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceRecord {
    pub bond: i64,
    pub jump_times: Vec<f64>,
    /// Nominal stationary rate `rho (1 - rho)`.
    pub mu_nominal: f64,
    /// Length of the observed window `[0, horizon]`.
    pub horizon: f64,
}

impl ServiceRecord {
    fn new(bond: i64, rho: f64, horizon: f64) -> Self {
        Self {
            bond,
            jump_times: Vec::new(),
            mu_nominal: rho * (1.0 - rho),
            horizon,
        }
    }

    /// Jumps in `(t0, t1]`.
    pub fn count_in(&self, t0: f64, t1: f64) -> usize {
        let lo = self.jump_times.partition_point(|&t| t <= t0);
        let hi = self.jump_times.partition_point(|&t| t <= t1);
        hi - lo
    }

    /// Jumps per unit time over the whole record.
    pub fn rate(&self) -> f64 {
        self.jump_times.len() as f64 / self.horizon
    }
}

/// Exclusion process alone, recording one bond and optionally following one
/// particle.
struct TasepSystem {
    state: TasepState,
    bond_index: Option<usize>,
    record: ServiceRecord,
    tagged: Option<usize>,
    positions: Vec<(f64, i64)>,
}

impl Driven for TasepSystem {
    fn on_arrival(&mut self, _time: f64, _wake: &mut Vec<usize>) {}

    fn on_ring(&mut self, time: f64, clock: usize, _valid: bool, wake: &mut Vec<usize>) {
        let Some(i) = self.state.index_of_clock(clock) else {
            return;
        };
        if self.state.jump_index(i) {
            if self.bond_index == Some(i) {
                self.record.jump_times.push(time);
            }
            if self.tagged == Some(i) {
                let next = i + 1;
                self.tagged = (next < self.state.len()).then_some(next);
                self.positions.push((time, self.state.site_of(next)));
            }
            self.state.wake_neighbours(i, wake);
        }
    }

    fn wants(&self, clock: usize) -> bool {
        self.state
            .index_of_clock(clock)
            .is_some_and(|i| self.state.can_jump_index(i))
    }

    fn initial_clocks(&self, out: &mut Vec<usize>) {
        out.extend(1..=self.state.len());
    }
}

fn check_horizon(horizon: f64) -> Result<(), TasepError> {
    if horizon >= 0.0 && horizon.is_finite() {
        Ok(())
    } else {
        Err(TasepError::BadHorizon(horizon))
    }
}

fn tasep_engine(field: &ClockField, system: &TasepSystem) -> Engine {
    // no exogenous input drives the exclusion process
    let none = ArrivalProcessSpec::Deterministic(Vec::new());
    Engine::new(field.clone(), field.arrivals(&none), system)
}

/// Runs the exclusion process over `[0, horizon]` on the clocks of `field`
/// (site `first + k` uses clock `k + 1`), recording jumps across `bond`.
pub fn step_tasep(
    state: TasepState,
    field: &ClockField,
    horizon: f64,
    bond: i64,
) -> Result<(TasepState, ServiceRecord), TasepError> {
    step_tasep_observed(state, field, horizon, bond, |_, _| {})
}

/// [`step_tasep`] with an observer called after every jump attempt.
pub fn step_tasep_observed<F>(
    state: TasepState,
    field: &ClockField,
    horizon: f64,
    bond: i64,
    mut observe: F,
) -> Result<(TasepState, ServiceRecord), TasepError>
where
    F: FnMut(&TimedEvent, &TasepState),
{
    check_horizon(horizon)?;
    let bond_index = state.index_of(bond);
    let rho = state.density;
    let mut system = TasepSystem {
        state,
        bond_index,
        record: ServiceRecord::new(bond, rho, horizon),
        tagged: None,
        positions: Vec::new(),
    };
    let mut engine = tasep_engine(field, &system);
    engine.advance(horizon, &mut system, |s, ev| observe(ev, &s.state));
    Ok((system.state, system.record))
}

/// Bond 1 to 2 jump times of a stationary ring with `count` particles.
pub fn ring_service_record(
    len: usize,
    count: usize,
    seed: u64,
    horizon: f64,
) -> Result<ServiceRecord, TasepError> {
    let ring = fixed_count_ring(len, count, seed)?;
    let (_, record) = step_tasep(ring, &ClockField::new(seed), horizon, 1)?;
    Ok(record)
}

/// Path of one tagged particle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedStats {
    /// Leftmost occupied site `>= 2` at time 0.
    pub initial_site: i64,
    /// `(time, site)` after each jump of the tagged particle, starting with
    /// `(0, initial_site)`.
    pub positions: Vec<(f64, i64)>,
    /// `headcount_profile[k]` is the number of particles at sites
    /// `2..=k + 2` at time 0.
    pub headcount_profile: Vec<u64>,
    pub horizon: f64,
}

impl TaggedStats {
    /// Initial gap `n_0 - 2`.
    pub fn initial_gap(&self) -> i64 {
        self.initial_site - 2
    }

    pub fn final_site(&self) -> i64 {
        self.positions.last().map_or(self.initial_site, |p| p.1)
    }

    /// Displacement per unit time over the horizon.
    pub fn speed(&self) -> f64 {
        (self.final_site() - self.initial_site) as f64 / self.horizon
    }
}

/// Line window large enough that its open right edge cannot influence a
/// particle starting near site 2 before `horizon`.
pub fn tagged_window(rho: f64, horizon: f64) -> Topology {
    let spread = 6.0 * horizon.sqrt();
    let travel = (1.0 - rho) * horizon + spread;
    // a jammed right edge recedes at speed 2 rho - 1 when rho > 1/2
    let recession = (2.0 * rho - 1.0).max(0.0) * horizon + spread;
    Topology::Line {
        first: 1,
        last: 2 + (travel + recession).ceil() as i64 + 16,
    }
}

/// Tags the leftmost particle at a site `>= 2` and follows it up to `horizon`.
pub fn tagged_particle(
    state: &TasepState,
    horizon: f64,
    seed: u64,
) -> Result<TaggedStats, TasepError> {
    check_horizon(horizon)?;
    let Topology::Line { last, .. } = state.topology else {
        return Err(TasepError::WrongTopology("line"));
    };
    let start = state.index_of(2.max(state.topology.origin())).ok_or(TasepError::NoParticle)?;
    let tagged = (start..state.len())
        .find(|&i| state.occupancy[i])
        .ok_or(TasepError::NoParticle)?;
    let initial_site = state.site_of(tagged);
    let mut running = 0u64;
    let headcount_profile = (2..=last)
        .map(|site| {
            running += state.occupied(site) as u64;
            running
        })
        .collect();
    let mut system = TasepSystem {
        state: state.clone(),
        bond_index: None,
        record: ServiceRecord::new(0, state.density, horizon),
        tagged: Some(tagged),
        positions: vec![(0.0, initial_site)],
    };
    let field = ClockField::new(seed);
    let mut engine = tasep_engine(&field, &system);
    engine.advance(horizon, &mut system, |_, _| {});
    Ok(TaggedStats {
        initial_site,
        positions: system.positions,
        headcount_profile,
        horizon,
    })
}

/// Exclusion process on sites `1, 2, ...` whose site 1 is refilled the
/// instant its particle leaves.
struct SourceTasep {
    occupancy: Vec<bool>,
    record: ServiceRecord,
}

impl SourceTasep {
    fn occ(&self, site: usize) -> bool {
        site == 1 || self.occupancy.get(site).copied().unwrap_or(false)
    }

    fn set(&mut self, site: usize, value: bool) {
        if site >= self.occupancy.len() {
            self.occupancy.resize(site + 1, false);
        }
        self.occupancy[site] = value;
    }
}

impl Driven for SourceTasep {
    fn on_arrival(&mut self, _time: f64, _wake: &mut Vec<usize>) {}

    fn on_ring(&mut self, time: f64, clock: usize, _valid: bool, wake: &mut Vec<usize>) {
        if !self.wants(clock) {
            return;
        }
        if clock == 1 {
            self.record.jump_times.push(time);
        } else {
            self.set(clock, false);
        }
        self.set(clock + 1, true);
        if clock > 1 {
            wake.push(clock - 1);
        }
        wake.push(clock);
        wake.push(clock + 1);
    }

    fn wants(&self, clock: usize) -> bool {
        self.occ(clock) && !self.occ(clock + 1)
    }

    fn initial_clocks(&self, out: &mut Vec<usize>) {
        out.push(1);
    }
}

/// Source exclusion process from a single particle at site 1.
///
/// Returns the record of jumps from site 1 to 2, i.e. the arrivals at site 2.
pub fn source_tasep(horizon: f64, seed: u64) -> Result<ServiceRecord, TasepError> {
    check_horizon(horizon)?;
    let mut system = SourceTasep {
        occupancy: vec![false, true],
        record: ServiceRecord::new(1, 0.5, horizon),
    };
    let field = ClockField::new(seed);
    let none = ArrivalProcessSpec::Deterministic(Vec::new());
    let mut engine = Engine::new(field.clone(), field.arrivals(&none), &system);
    engine.advance(horizon, &mut system, |_, _| {});
    Ok(system.record)
}

/// Unobstructed tandem `Q`, its TASEP-gated copy `Q'` and the ring
/// environment, all on one clock field.
struct BoundSystem {
    free: QueueSystem,
    bounded: QueueSystem,
    env: TasepState,
    record: ServiceRecord,
}

impl Driven for BoundSystem {
    fn on_arrival(&mut self, time: f64, wake: &mut Vec<usize>) {
        self.free.on_arrival(time, wake);
        self.bounded.on_arrival(time, wake);
    }

    fn on_ring(&mut self, time: f64, clock: usize, valid: bool, wake: &mut Vec<usize>) {
        let i = clock - 1;
        let tasep_jumps = self.env.can_jump_index(i);
        self.free.on_ring(time, clock, valid, wake);
        self.bounded.ring_gated(clock, tasep_jumps, wake);
        if tasep_jumps {
            self.env.jump_index(i);
            if clock == 1 {
                self.record.jump_times.push(time);
            }
            self.env.wake_neighbours(i, wake);
        }
    }

    fn wants(&self, clock: usize) -> bool {
        self.env.can_jump_index(clock - 1)
            || self.free.wants_site_clock(clock)
            || self.bounded.wants_site_clock(clock)
    }

    fn initial_clocks(&self, out: &mut Vec<usize>) {
        out.extend(1..=self.env.len());
    }
}

/// Output of [`bound_process`].
#[derive(Debug, Clone, PartialEq)]
pub struct BoundRun {
    /// The back-pressure tandem `Q`.
    pub free: Trajectory,
    /// The bounding process `Q'`.
    pub bounded: Trajectory,
    /// TASEP jumps across bond 1 to 2: the service process of `Q'_1`.
    pub service: ServiceRecord,
    pub environment: TasepState,
    /// Set when `lambda >= rho (1 - rho)`: the bound still holds path-wise
    /// but `Q'_1` is not stochastically bounded.
    pub warning: Option<String>,
}

/// Builds the bounding process `Q'` next to `Q`.
///
/// `Q'` follows the back-pressure rule except that a customer crosses from
/// site 1 to 2 only together with a TASEP particle jumping across the same
/// bond. Both start empty. On every path `Q' ⪯ Q`, `Q'_1 >= Q_1`, and
/// `Q'_n <= Y_n` for `n >= 2`, where `Y` is the periodically lifted ring.
pub fn bound_process(
    config: &SystemConfig,
    arrivals: &ArrivalProcessSpec,
    environment: TasepState,
    sample_epochs: &[f64],
) -> Result<BoundRun, TasepError> {
    run_bound(config, arrivals, environment, sample_epochs, |_, _, _, _| {})
}

/// [`bound_process`] with an observer receiving `(event, Q, Q', Y)` after
/// every processed clock point.
pub fn run_bound<F>(
    config: &SystemConfig,
    arrivals: &ArrivalProcessSpec,
    environment: TasepState,
    sample_epochs: &[f64],
    mut observe: F,
) -> Result<BoundRun, TasepError>
where
    F: FnMut(&TimedEvent, &QueueState, &QueueState, &TasepState),
{
    config.validate().map_err(EngineError::from)?;
    arrivals.validate()?;
    let Topology::Ring(len) = environment.topology else {
        return Err(TasepError::WrongTopology("ring"));
    };
    let field = ClockField::periodic(config.seed, len)?;
    let empty = QueueState::empty(config.horizon).map_err(EngineError::from)?;
    let rho = environment.density;
    let mu = rho * (1.0 - rho);
    let lambda = arrivals.rate().unwrap_or(config.lambda);
    let warning = (lambda >= mu).then(|| {
        format!("lambda {lambda} >= rho (1 - rho) = {mu}: bounding queue is not stable")
    });
    let mut system = BoundSystem {
        free: QueueSystem::new(empty.clone(), Some(len)),
        bounded: QueueSystem::new(empty, Some(len)),
        env: environment,
        record: ServiceRecord::new(1, rho, config.time_horizon),
    };
    let mut engine = Engine::new(field.clone(), field.arrivals(arrivals), &system);
    let snaps: Vec<(Sample, Sample)> = drive(
        &mut engine,
        &mut system,
        epochs_checked(sample_epochs, config.time_horizon)?,
        config.time_horizon,
        |s, t| (s.free.snapshot_at(t), s.bounded.snapshot_at(t)),
        |s, ev| observe(ev, s.free.state(), s.bounded.state(), &s.env),
    );
    let (free_samples, bounded_samples) = snaps.into_iter().unzip();
    let end = config.time_horizon;
    Ok(BoundRun {
        free: Trajectory {
            samples: free_samples,
            event_log: None,
            final_sample: system.free.snapshot_at(end),
        },
        bounded: Trajectory {
            samples: bounded_samples,
            event_log: None,
            final_sample: system.bounded.snapshot_at(end),
        },
        service: system.record,
        environment: system.env,
        warning,
    })
}

fn epochs_checked(epochs: &[f64], horizon: f64) -> Result<&[f64], EngineError> {
    let mut prev = 0.0;
    for &e in epochs {
        if !(e >= prev && e <= horizon) {
            return Err(EngineError::BadEpoch { epoch: e, horizon });
        }
        prev = e;
    }
    Ok(epochs)
}

/// `Q'_n <= Y_n` for every tandem site `n >= 2`, with `Y` lifted from the ring.
pub fn within_environment(bounded: &QueueState, env: &TasepState) -> bool {
    let len = env.len();
    (2..=bounded.extent()).all(|n| bounded.get(n) <= env.occupancy[(n - 1) % len] as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{compare, Horizon, OrderRelation};

    #[test]
    fn initializers() {
        assert_eq!(
            bernoulli_init(Topology::Ring(10), 0.0, 1).unwrap_err(),
            TasepError::BadDensity(0.0)
        );
        assert!(bernoulli_init(Topology::Ring(10), 1.0, 1).is_err());
        assert_eq!(fixed_count_ring(4, 2, 9).unwrap().particle_count(), 2);
        assert!(fixed_count_ring(4, 5, 9).is_err());
        assert!(fixed_count_ring(1, 0, 9).is_err());
        assert_eq!(ring_with_density(1000, 0.5, 3).unwrap().particle_count(), 500);
        let line = bernoulli_init(Topology::Line { first: -5, last: 5 }, 0.3, 2).unwrap();
        assert_eq!(line.len(), 11);
        assert_eq!(line.site_of(0), -5);
        assert_eq!(line.index_of(5), Some(10));
        assert_eq!(line.index_of(6), None);
    }

    #[test]
    fn jump_rule() {
        let mut s = TasepState {
            topology: Topology::Line { first: 1, last: 3 },
            occupancy: vec![true, false, true],
            particle_ids: None,
            density: 0.5,
        };
        s.label_particles();
        assert!(s.jump_index(0));
        assert_eq!(s.occupancy(), &[false, true, true]);
        assert_eq!(s.particle_ids().unwrap(), &[None, Some(0), Some(1)]);
        // blocked
        assert!(!s.jump_index(1));
        // open right edge
        assert!(s.jump_index(2));
        assert_eq!(s.particle_count(), 1);

        let mut ring = TasepState {
            topology: Topology::Ring(2),
            occupancy: vec![false, true],
            particle_ids: None,
            density: 0.5,
        };
        assert!(ring.jump_index(1));
        assert_eq!(ring.occupancy(), &[true, false]);
    }

    #[test]
    fn first_source_jump_is_first_clock_point() {
        let seed = 12;
        let record = source_tasep(50.0, seed).unwrap();
        let first = ClockField::new(seed).points(1, 0.0, 50.0)[0];
        assert_eq!(record.jump_times[0], first);
    }

    #[test]
    fn ring_conserves_particles_and_exclusion() {
        let ring = fixed_count_ring(30, 11, 4).unwrap();
        let mut checked = 0;
        let (end, rec) = step_tasep_observed(ring, &ClockField::new(4), 500.0, 1, |_, s| {
            assert_eq!(s.particle_count(), 11);
            checked += 1;
        })
        .unwrap();
        assert!(checked > 1000);
        assert_eq!(end.particle_count(), 11);
        assert!(rec.jump_times.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn empty_environment_blocks_site_one() {
        let env = TasepState {
            topology: Topology::Ring(50),
            occupancy: vec![false; 50],
            particle_ids: None,
            density: 0.02,
        };
        let cfg = SystemConfig::new(0.3, Horizon::Infinite, 5, 300.0).unwrap();
        let run = bound_process(&cfg, &ArrivalProcessSpec::poisson(0.3), env, &[]).unwrap();
        assert!(run.service.jump_times.is_empty());
        assert_eq!(run.bounded.final_sample.state.get(1), run.bounded.arrivals());
        assert!(run.warning.is_some());
    }

    #[test]
    fn bound_dominance_small() {
        let env = ring_with_density(40, 0.5, 8).unwrap();
        let cfg = SystemConfig::new(0.2, Horizon::Infinite, 8, 400.0).unwrap();
        let mut events = 0;
        let run = run_bound(&cfg, &ArrivalProcessSpec::poisson(0.2), env, &[], |_, q, qp, y| {
            events += 1;
            assert!(compare(qp, q, OrderRelation::TailSum).unwrap());
            assert!(qp.get(1) >= q.get(1));
            assert!(within_environment(qp, y));
        })
        .unwrap();
        assert!(events > 1000);
        assert!(run.warning.is_none());
    }

    #[test]
    fn tagged_requires_line_and_particle() {
        let ring = fixed_count_ring(10, 3, 1).unwrap();
        assert_eq!(
            tagged_particle(&ring, 1.0, 1).unwrap_err(),
            TasepError::WrongTopology("line")
        );
        let empty = TasepState {
            topology: Topology::Line { first: 1, last: 4 },
            occupancy: vec![true, false, false, false],
            particle_ids: None,
            density: 0.25,
        };
        assert_eq!(tagged_particle(&empty, 1.0, 1).unwrap_err(), TasepError::NoParticle);
    }

    #[test]
    fn tagged_positions_move_right() {
        let state = bernoulli_init(tagged_window(0.5, 200.0), 0.5, 6).unwrap();
        let stats = tagged_particle(&state, 200.0, 6).unwrap();
        assert!(stats.positions.windows(2).all(|w| w[0].0 < w[1].0 && w[1].1 == w[0].1 + 1));
        assert!(stats.initial_site >= 2);
        assert_eq!(
            *stats.headcount_profile.last().unwrap() as usize,
            state.occupancy()[1..].iter().filter(|&&o| o).count()
        );
    }
}
