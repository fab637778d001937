//! Experiment specifications, orchestration and output files.
//!
//! An experiment is a TOML file parsed into [`ExperimentSpec`]. Every run is
//! a pure function of the spec: seeds are explicit, and replications are
//! merged in seed order whatever the worker count. Site indices start at 1 in
//! every output, as in the model.
//!
//! Outputs in `output.dir`:
//! - `<command>.csv` with columns `lambda,N,seed,metric,value,ci_lo,ci_hi`;
//!   empty cells mean "not applicable" (an aggregate over seeds has no seed).
//! - `<command>.json` with the spec echo and nested results.
//! - `provenance.json` with the spec echo, seeds, crate version and wall time.
//!
//! The first two are byte-identical across re-runs of one spec.

use crate::analysis::{
    batch_means, boundary_probabilities, fit_exponential_tail_with, flux_from_times, mean_ci,
    phase_scan, q1_samples, Estimate, ScanConfig,
};
use crate::engine::{couple_check, simulate, stationary_samples, ArrivalProcessSpec, CouplingReport};
use crate::model::{compare, Horizon, OrderRelation, SystemConfig};
use crate::oracle::{
    build_chain, exact_boundary_probabilities, expected_queue_profile, loynes_ring_replication,
    marginal, solve_stationary, DEFAULT_STATE_LIMIT, DEFAULT_TOLERANCE,
};
use crate::tasep::{
    bernoulli_init, ring_service_record, ring_with_density, run_bound, source_tasep, tagged_particle,
    tagged_window, within_environment,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    #[default]
    Simulate,
    Exact,
    Tasep,
    CoupleCheck,
    Scan,
    FitTail,
    Loynes,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Exact => "exact",
            Command::Tasep => "tasep",
            Command::CoupleCheck => "couple-check",
            Command::Scan => "scan",
            Command::FitTail => "fit-tail",
            Command::Loynes => "loynes",
        }
    }
}

/// Number of sites: a count, or `"inf"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sites {
    Count(usize),
    Named(String),
}

impl Sites {
    pub fn horizon(&self) -> Option<Horizon> {
        match self {
            Sites::Count(0) => None,
            Sites::Count(n) => Some(Horizon::Finite(*n)),
            Sites::Named(s) if s == "inf" => Some(Horizon::Infinite),
            Sites::Named(_) => None,
        }
    }

    pub fn parse(s: &str) -> Sites {
        s.parse().map(Sites::Count).unwrap_or_else(|_| Sites::Named(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub lambda: f64,
    #[serde(rename = "N")]
    pub sites: Sites,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            sites: Sites::Count(5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub time_horizon: f64,
    pub seeds: Vec<u64>,
    /// When set, seeds run from `seeds[0]` through `seeds[0] + replications - 1`.
    pub replications: Option<u64>,
    pub burn_in_fraction: f64,
    pub sample_count: usize,
    pub batches: usize,
    /// Sample the stationary regime of a finite tandem (`simulate` only).
    pub stationary: bool,
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            time_horizon: 1e4,
            seeds: vec![1],
            replications: None,
            burn_in_fraction: 0.5,
            sample_count: 10_000,
            batches: 20,
            stationary: true,
            workers: 1,
        }
    }
}

impl RunSection {
    pub fn seed_list(&self) -> Vec<u64> {
        match (self.replications, self.seeds.first()) {
            (Some(r), Some(&first)) => (0..r).map(|k| first + k).collect(),
            _ => self.seeds.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TasepMode {
    /// Bond flux of a stationary ring.
    #[default]
    Ring,
    /// Speed of a tagged particle in a Bernoulli line.
    Tagged,
    /// Flux out of a permanently occupied site 1.
    Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TasepSection {
    pub mode: TasepMode,
    pub rho: f64,
    #[serde(rename = "L")]
    pub ring: usize,
}

impl Default for TasepSection {
    fn default() -> Self {
        Self {
            mode: TasepMode::Ring,
            rho: 0.5,
            ring: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExactSection {
    pub cap: u64,
}

impl Default for ExactSection {
    fn default() -> Self {
        Self { cap: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanSection {
    pub lambdas: Vec<f64>,
    #[serde(rename = "Ns")]
    pub ns: Vec<usize>,
}

impl Default for ScanSection {
    fn default() -> Self {
        Self {
            lambdas: vec![0.15, 0.2, 0.3, 0.35],
            ns: vec![10, 20, 40, 80],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoupleSection {
    /// Finite horizons coupled with the infinite tandem.
    #[serde(rename = "Ns")]
    pub ns: Vec<usize>,
    /// Probability that a clock point survives the obstruction mask.
    pub mask_validity: f64,
}

impl Default for CoupleSection {
    fn default() -> Self {
        Self {
            ns: vec![1, 2, 4],
            mask_validity: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitTailSection {
    /// Whitespace-separated non-negative integers; when absent the samples
    /// are stationary `Q_1` values simulated from the model section.
    pub input: Option<PathBuf>,
    pub min_bin_count: u64,
}

impl Default for FitTailSection {
    fn default() -> Self {
        Self {
            input: None,
            min_bin_count: crate::analysis::MIN_BIN_COUNT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub command: Command,
    pub model: ModelSection,
    pub run: RunSection,
    pub tasep: TasepSection,
    pub exact: ExactSection,
    pub scan: ScanSection,
    pub couple: CoupleSection,
    pub fit_tail: FitTailSection,
    pub output: OutputSection,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(vec![format!("config: {e}")]))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    fn horizon(&self) -> Result<Horizon, CliError> {
        self.model
            .sites
            .horizon()
            .ok_or_else(|| CliError::Validation(vec!["model.N must be a positive integer or \"inf\"".into()]))
    }

    fn pool(&self) -> Result<rayon::ThreadPool, CliError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.run.workers.max(1))
            .build()
            .map_err(|e| CliError::Runtime(e.to_string()))
    }

    /// Maps `f` over the seeds on the worker pool, keeping seed order.
    fn per_seed<T, F>(&self, f: F) -> Result<Vec<(u64, T)>, CliError>
    where
        T: Send,
        F: Fn(u64) -> Result<T, CliError> + Sync,
    {
        let seeds = self.run.seed_list();
        self.pool()?.install(|| {
            seeds
                .par_iter()
                .map(|&s| f(s).map(|v| (s, v)))
                .collect()
        })
    }
}

/// Every violated constraint of `spec`, empty when the spec is runnable.
pub fn validate(spec: &ExperimentSpec) -> Vec<String> {
    let mut v = Vec::new();
    let cmd = spec.command;
    let lambda = spec.model.lambda;
    let horizon = spec.model.sites.horizon();
    let run = &spec.run;
    let uses_model = !matches!(cmd, Command::Tasep | Command::Scan)
        && !(cmd == Command::FitTail && spec.fit_tail.input.is_some());
    let stationary = cmd == Command::Scan
        || (cmd == Command::FitTail && spec.fit_tail.input.is_none())
        || (cmd == Command::Simulate && run.stationary);

    if uses_model {
        if !(lambda > 0.0 && lambda.is_finite()) {
            v.push(format!("model.lambda: must be positive and finite (got {lambda})"));
        } else if stationary && lambda >= 1.0 {
            v.push(format!("model.lambda: λ < 1 required for stationary estimation (got {lambda})"));
        }
        match horizon {
            None => v.push("model.N: must be a positive integer or \"inf\"".into()),
            Some(Horizon::Infinite) if stationary || cmd == Command::Exact => {
                v.push(format!("model.N: a finite N is required for {}", cmd.name()))
            }
            _ => {}
        }
    }
    if !(run.time_horizon > 0.0 && run.time_horizon.is_finite()) && cmd != Command::Exact {
        v.push(format!("run.time_horizon: must be positive and finite (got {})", run.time_horizon));
    }
    if run.seeds.is_empty() {
        v.push("run.seeds: at least one seed is required".into());
    }
    if run.replications == Some(0) {
        v.push("run.replications: must be at least 1 when set".into());
    }
    if run.workers == 0 {
        v.push("run.workers: must be at least 1".into());
    }
    if stationary {
        if !(run.burn_in_fraction > 0.0 && run.burn_in_fraction < 1.0) {
            v.push(format!("run.burn_in_fraction: must lie in (0, 1) (got {})", run.burn_in_fraction));
        }
        if run.sample_count == 0 {
            v.push("run.sample_count: must be positive".into());
        }
    }
    if cmd == Command::Simulate && run.stationary {
        if run.batches < crate::analysis::MIN_BATCHES {
            v.push(format!(
                "run.batches: at least {} batches required (got {})",
                crate::analysis::MIN_BATCHES,
                run.batches
            ));
        } else if run.sample_count < run.batches {
            v.push("run.sample_count: must be at least run.batches".into());
        }
    }
    if matches!(cmd, Command::Tasep | Command::Loynes | Command::CoupleCheck) {
        let rho = spec.tasep.rho;
        if !(rho > 0.0 && rho < 1.0) {
            v.push(format!("tasep.rho: must lie in (0, 1) (got {rho})"));
        }
        if spec.tasep.ring < 2 {
            v.push(format!("tasep.L: ring needs at least 2 sites (got {})", spec.tasep.ring));
        }
        if cmd == Command::Tasep && spec.tasep.mode == TasepMode::Ring && run.batches < crate::analysis::MIN_BATCHES {
            v.push(format!("run.batches: at least {} batches required", crate::analysis::MIN_BATCHES));
        }
    }
    if cmd == Command::Exact {
        let cap = spec.exact.cap;
        if cap == 0 {
            v.push("exact.cap: must be at least 1".into());
        } else if let Some(Horizon::Finite(n)) = horizon {
            let states = (cap as usize + 1).checked_pow(n as u32);
            if states.is_none_or(|s| s > DEFAULT_STATE_LIMIT) {
                v.push(format!(
                    "exact: (cap+1)^N states exceed {DEFAULT_STATE_LIMIT}; lower N or exact.cap"
                ));
            }
        }
    }
    if cmd == Command::Scan {
        let s = &spec.scan;
        if s.lambdas.is_empty() {
            v.push("scan.lambdas: must not be empty".into());
        }
        for l in &s.lambdas {
            if !(*l > 0.0 && *l < 1.0) {
                v.push(format!("scan.lambdas: λ < 1 required for stationary estimation (got {l})"));
            }
        }
        if s.ns.is_empty() || s.ns.contains(&0) || s.ns.windows(2).any(|w| w[0] >= w[1]) {
            v.push("scan.Ns: must be positive and strictly increasing".into());
        }
        if run.seed_list().len() < 2 {
            v.push("run.seeds: scan needs at least 2 seeds for intervals".into());
        }
    }
    if cmd == Command::CoupleCheck {
        let c = &spec.couple;
        if c.ns.contains(&0) || c.ns.windows(2).any(|w| w[0] >= w[1]) {
            v.push("couple.Ns: must be positive and strictly increasing".into());
        }
        if !(0.0..=1.0).contains(&c.mask_validity) {
            v.push(format!("couple.mask_validity: must lie in [0, 1] (got {})", c.mask_validity));
        }
    }
    v
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid experiment spec:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error("run failed: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    /// Machine-readable form printed on failure.
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            CliError::Validation(v) => json!({"error": "validation", "violations": v}),
            CliError::Runtime(m) => json!({"error": "runtime", "message": m}),
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub lambda: Option<f64>,
    #[serde(rename = "N")]
    pub n: Option<String>,
    pub seed: Option<u64>,
    pub metric: String,
    pub value: f64,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
}

impl Row {
    fn new(lambda: Option<f64>, n: Option<String>, seed: Option<u64>, metric: impl Into<String>, value: f64) -> Self {
        Self {
            lambda,
            n,
            seed,
            metric: metric.into(),
            value,
            ci_lo: None,
            ci_hi: None,
        }
    }

    fn with_ci(mut self, est: &Estimate) -> Self {
        self.ci_lo = Some(est.ci_lo());
        self.ci_hi = Some(est.ci_hi());
        self
    }
}

pub const CSV_HEADER: &str = "lambda,N,seed,metric,value,ci_lo,ci_hi";

pub fn rows_to_csv(rows: &[Row]) -> String {
    fn cell<T: std::fmt::Display>(x: &Option<T>) -> String {
        x.as_ref().map(|v| v.to_string()).unwrap_or_default()
    }
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            cell(&r.lambda),
            cell(&r.n),
            cell(&r.seed),
            r.metric,
            r.value,
            cell(&r.ci_lo),
            cell(&r.ci_hi)
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seeds: Vec<u64>,
    pub version: String,
    pub wall_time_secs: f64,
}

/// Everything one run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub spec: ExperimentSpec,
    pub rows: Vec<Row>,
    /// Nested results: fits, scan summaries, coupling reports.
    pub details: serde_json::Value,
    pub provenance: Provenance,
}

/// Validates and runs `spec`.
pub fn run(spec: &ExperimentSpec) -> Result<ResultRecord, CliError> {
    let violations = validate(spec);
    if !violations.is_empty() {
        return Err(CliError::Validation(violations));
    }
    let start = Instant::now();
    let (rows, details) = match spec.command {
        Command::Simulate => run_simulate(spec)?,
        Command::Exact => run_exact(spec)?,
        Command::Tasep => run_tasep(spec)?,
        Command::CoupleCheck => run_couple_check(spec)?,
        Command::Scan => run_scan(spec)?,
        Command::FitTail => run_fit_tail(spec)?,
        Command::Loynes => run_loynes(spec)?,
    };
    Ok(ResultRecord {
        spec: spec.clone(),
        rows,
        details,
        provenance: Provenance {
            seeds: spec.run.seed_list(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
    })
}

type Output = (Vec<Row>, serde_json::Value);

fn run_simulate(spec: &ExperimentSpec) -> Result<Output, CliError> {
    let horizon = spec.horizon()?;
    let lambda = spec.model.lambda;
    let n_label = Some(horizon.to_string());
    let arrivals = ArrivalProcessSpec::poisson(lambda);
    let run = &spec.run;
    let mut rows = Vec::new();
    if run.stationary {
        let results = spec.per_seed(|seed| {
            let cfg = SystemConfig::new(lambda, horizon, seed, run.time_horizon).map_err(runtime)?;
            let samples = stationary_samples(&cfg, &arrivals, run.burn_in_fraction, run.sample_count)
                .map_err(runtime)?;
            let sites = horizon.last_site().expect("finite");
            let means = (1..=sites)
                .map(|n| {
                    let series: Vec<f64> = samples.iter().map(|s| s.get(n) as f64).collect();
                    batch_means(&series, run.batches)
                })
                .collect::<Result<Vec<_>, _>>()
                .map_err(runtime)?;
            let boundary = boundary_probabilities(&samples, run.batches).map_err(runtime)?;
            Ok((means, boundary))
        })?;
        for (seed, (means, boundary)) in &results {
            for (n, est) in means.iter().enumerate() {
                rows.push(Row::new(Some(lambda), n_label.clone(), Some(*seed), format!("mean_q{}", n + 1), est.value).with_ci(est));
            }
            for (n, est) in boundary.iter().enumerate() {
                rows.push(
                    Row::new(Some(lambda), n_label.clone(), Some(*seed), format!("boundary_prob_{}", n + 1), est.value)
                        .with_ci(est),
                );
            }
        }
        let details = json!({
            "per_seed": results.iter().map(|(s, (m, b))| json!({"seed": s, "mean_q": m, "boundary_prob": b})).collect::<Vec<_>>()
        });
        return Ok((rows, details));
    }
    let results = spec.per_seed(|seed| {
        let cfg = SystemConfig::new(lambda, horizon, seed, run.time_horizon).map_err(runtime)?;
        simulate(&cfg, &arrivals, &[]).map_err(runtime)
    })?;
    for (seed, traj) in &results {
        let fin = &traj.final_sample;
        for n in 1..=fin.state.extent() {
            rows.push(Row::new(Some(lambda), n_label.clone(), Some(*seed), format!("q{n}"), fin.state.get(n) as f64));
        }
        rows.push(Row::new(Some(lambda), n_label.clone(), Some(*seed), "arrivals", fin.passes(1) as f64));
        let b = fin.state.busy_interval_b().site as f64;
        let bp = fin.state.busy_interval_bprime().site as f64;
        rows.push(Row::new(Some(lambda), n_label.clone(), Some(*seed), "busy_interval_b", b));
        rows.push(Row::new(Some(lambda), n_label.clone(), Some(*seed), "busy_interval_bprime", bp));
    }
    let details = json!({
        "final_states": results.iter().map(|(s, t)| json!({"seed": s, "lengths": t.final_sample.state.lengths()})).collect::<Vec<_>>()
    });
    Ok((rows, details))
}

fn run_exact(spec: &ExperimentSpec) -> Result<Output, CliError> {
    let Horizon::Finite(sites) = spec.horizon()? else {
        unreachable!("validated finite");
    };
    let lambda = spec.model.lambda;
    let chain = build_chain(sites, lambda, spec.exact.cap).map_err(runtime)?;
    let dist = solve_stationary(&chain, DEFAULT_TOLERANCE).map_err(runtime)?;
    let n_label = Some(sites.to_string());
    let row = |metric: String, value: f64| Row::new(Some(lambda), n_label.clone(), None, metric, value);
    let mut rows = Vec::new();
    let q1 = marginal(&chain, &dist, 1);
    for (k, p) in q1.iter().enumerate() {
        rows.push(row(format!("p_q1_eq_{k}"), *p));
    }
    let means = expected_queue_profile(&chain, &dist);
    for (n, m) in means.iter().enumerate() {
        rows.push(row(format!("mean_q{}", n + 1), *m));
    }
    let boundary = exact_boundary_probabilities(&chain, &dist);
    for (n, p) in boundary.iter().enumerate() {
        rows.push(row(format!("boundary_prob_{}", n + 1), *p));
    }
    rows.push(row("truncation_mass".into(), dist.truncation_mass));
    rows.push(row("residual".into(), dist.residual));
    let details = json!({
        "states": chain.states.len(),
        "q1_marginal": q1,
        "mean_q": means,
        "boundary_prob": boundary,
        "truncation_mass": dist.truncation_mass,
        "residual": dist.residual,
    });
    Ok((rows, details))
}

fn run_tasep(spec: &ExperimentSpec) -> Result<Output, CliError> {
    let t = &spec.tasep;
    let horizon = spec.run.time_horizon;
    let batches = spec.run.batches;
    let mut rows = Vec::new();
    let details = match t.mode {
        TasepMode::Ring => {
            let count = ring_with_density(t.ring, t.rho, 0).map_err(runtime)?.particle_count();
            let exact = crate::tasep::ring_flux(t.ring, count);
            let fluxes = spec.per_seed(|seed| {
                let rec = ring_service_record(t.ring, count, seed, horizon).map_err(runtime)?;
                flux_from_times(&rec.jump_times, (0.0, horizon), batches).map_err(runtime)
            })?;
            for (seed, est) in &fluxes {
                rows.push(Row::new(None, Some(t.ring.to_string()), Some(*seed), "bond_flux", est.value).with_ci(est));
            }
            rows.push(Row::new(None, Some(t.ring.to_string()), None, "exact_flux", exact));
            json!({"mode": "ring", "L": t.ring, "K": count, "exact_flux": exact,
                   "per_seed": fluxes.iter().map(|(s, e)| json!({"seed": s, "flux": e})).collect::<Vec<_>>()})
        }
        TasepMode::Tagged => {
            let stats = spec.per_seed(|seed| {
                let line = bernoulli_init(tagged_window(t.rho, horizon), t.rho, seed).map_err(runtime)?;
                tagged_particle(&line, horizon, seed).map_err(runtime)
            })?;
            for (seed, s) in &stats {
                rows.push(Row::new(None, None, Some(*seed), "tagged_speed", s.speed()));
                rows.push(Row::new(None, None, Some(*seed), "initial_gap", s.initial_gap() as f64));
            }
            let speeds: Vec<f64> = stats.iter().map(|(_, s)| s.speed()).collect();
            if let Ok(est) = mean_ci(&speeds) {
                rows.push(Row::new(None, None, None, "tagged_speed", est.value).with_ci(&est));
            }
            json!({"mode": "tagged", "rho": t.rho, "nominal_speed": 1.0 - t.rho, "speeds": speeds})
        }
        TasepMode::Source => {
            let fluxes = spec.per_seed(|seed| {
                let rec = source_tasep(horizon, seed).map_err(runtime)?;
                Ok(rec.rate())
            })?;
            for (seed, f) in &fluxes {
                rows.push(Row::new(None, None, Some(*seed), "source_flux", *f));
            }
            let values: Vec<f64> = fluxes.iter().map(|(_, f)| *f).collect();
            if let Ok(est) = mean_ci(&values) {
                rows.push(Row::new(None, None, None, "source_flux", est.value).with_ci(&est));
            }
            json!({"mode": "source", "fluxes": values})
        }
    };
    Ok((rows, details))
}

/// Violations of the bounding process orders in one run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundReport {
    pub events_checked: u64,
    pub tail_sum: u64,
    pub first_queue: u64,
    pub environment: u64,
}

impl BoundReport {
    pub fn total_violations(&self) -> u64 {
        self.tail_sum + self.first_queue + self.environment
    }
}

/// Checks `Q' ⪯ Q`, `Q'_1 >= Q_1` and `Q'_n <= Y_n` (`n >= 2`) at every
/// event of one bounding-process run.
pub fn check_bound(
    config: &SystemConfig,
    ring: usize,
    rho: f64,
) -> Result<BoundReport, CliError> {
    let env = ring_with_density(ring, rho, config.seed).map_err(runtime)?;
    let mut report = BoundReport::default();
    run_bound(config, &ArrivalProcessSpec::poisson(config.lambda), env, &[], |_, q, qb, y| {
        report.events_checked += 1;
        if !compare(qb, q, OrderRelation::TailSum).unwrap_or(false) {
            report.tail_sum += 1;
        }
        if qb.get(1) < q.get(1) {
            report.first_queue += 1;
        }
        if !within_environment(qb, y) {
            report.environment += 1;
        }
    })
    .map_err(runtime)?;
    Ok(report)
}

fn run_couple_check(spec: &ExperimentSpec) -> Result<Output, CliError> {
    let lambda = spec.model.lambda;
    let horizon = spec.horizon()?;
    let mut horizons: Vec<Horizon> = spec.couple.ns.iter().map(|&n| Horizon::Finite(n)).collect();
    horizons.push(Horizon::Infinite);
    let t = spec.run.time_horizon;
    let results = spec.per_seed(|seed| {
        let chain = couple_check(lambda, &horizons, t, seed, spec.couple.mask_validity).map_err(runtime)?;
        let cfg = SystemConfig::new(lambda, horizon, seed, t).map_err(runtime)?;
        let bound = check_bound(&cfg, spec.tasep.ring, spec.tasep.rho)?;
        Ok((chain, bound))
    })?;
    let mut rows = Vec::new();
    let mut total = CouplingReport::default();
    let mut bound_total = BoundReport::default();
    for (seed, (chain, bound)) in &results {
        total.merge(chain);
        bound_total.events_checked += bound.events_checked;
        bound_total.tail_sum += bound.tail_sum;
        bound_total.first_queue += bound.first_queue;
        bound_total.environment += bound.environment;
        let s = Some(*seed);
        rows.push(Row::new(Some(lambda), None, s, "coupling_violations", chain.total_violations() as f64));
        rows.push(Row::new(Some(lambda), None, s, "coupling_events", chain.events_checked as f64));
        rows.push(Row::new(Some(lambda), Some(horizon.to_string()), s, "bound_violations", bound.total_violations() as f64));
        rows.push(Row::new(Some(lambda), Some(horizon.to_string()), s, "bound_events", bound.events_checked as f64));
    }
    let details = json!({"coupling": total, "bound": bound_total});
    Ok((rows, details))
}

fn run_scan(spec: &ExperimentSpec) -> Result<Output, CliError> {
    let run = &spec.run;
    let cfg = ScanConfig {
        seeds: run.seed_list(),
        time_horizon: run.time_horizon,
        burn_in_fraction: run.burn_in_fraction,
        samples_per_seed: run.sample_count,
        workers: run.workers,
    };
    let result = phase_scan(&spec.scan.lambdas, &spec.scan.ns, &cfg).map_err(runtime)?;
    let mut rows = Vec::new();
    for p in &result.points {
        let n = Some(p.n.to_string());
        for ((seed, m), med) in cfg.seeds.iter().zip(&p.seed_means).zip(&p.seed_medians) {
            rows.push(Row::new(Some(p.lambda), n.clone(), Some(*seed), "q1_mean", *m));
            rows.push(Row::new(Some(p.lambda), n.clone(), Some(*seed), "q1_median", *med));
        }
        rows.push(Row::new(Some(p.lambda), n.clone(), None, "q1_mean", p.q1_mean.value).with_ci(&p.q1_mean));
        rows.push(Row::new(Some(p.lambda), n.clone(), None, "q1_median", p.q1_median.value).with_ci(&p.q1_median));
    }
    for s in &result.summaries {
        rows.push(Row::new(Some(s.lambda), None, None, "saturation_flag", s.saturation_flag as u8 as f64));
        rows.push(Row::new(Some(s.lambda), None, None, "growth_flag", s.growth_flag as u8 as f64));
    }
    Ok((rows, serde_json::to_value(&result).map_err(runtime)?))
}

fn read_integers(path: &Path) -> Result<Vec<u64>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    text.split_whitespace()
        .map(|w| w.parse::<u64>().map_err(|e| runtime(format!("{}: {w:?}: {e}", path.display()))))
        .collect()
}

fn run_fit_tail(spec: &ExperimentSpec) -> Result<Output, CliError> {
    let (lambda, n_label, samples) = match &spec.fit_tail.input {
        Some(path) => (None, None, read_integers(path)?),
        None => {
            let Horizon::Finite(n) = spec.horizon()? else {
                unreachable!("validated finite");
            };
            let run = &spec.run;
            let cfg = ScanConfig {
                seeds: run.seed_list(),
                time_horizon: run.time_horizon,
                burn_in_fraction: run.burn_in_fraction,
                samples_per_seed: run.sample_count,
                workers: run.workers,
            };
            let per = spec.per_seed(|seed| q1_samples(spec.model.lambda, n, seed, &cfg).map_err(runtime))?;
            let pooled = per.into_iter().flat_map(|(_, v)| v).collect();
            (Some(spec.model.lambda), Some(n.to_string()), pooled)
        }
    };
    let fit = fit_exponential_tail_with(&samples, spec.fit_tail.min_bin_count).map_err(runtime)?;
    let row = |metric: &str, value: f64| Row::new(lambda, n_label.clone(), None, metric, value);
    let rows = vec![
        row("empirical_decay_rate", -fit.slope),
        row("intercept", fit.intercept),
        row("r_squared", fit.r_squared),
        row("min_count", fit.min_count as f64),
        row("bins", fit.support.len() as f64),
        row("samples", samples.len() as f64),
    ];
    Ok((rows, json!({"fit": fit, "samples": samples.len()})))
}

fn run_loynes(spec: &ExperimentSpec) -> Result<Output, CliError> {
    let lambda = spec.model.lambda;
    let t = &spec.tasep;
    let count = ring_with_density(t.ring, t.rho, 0).map_err(runtime)?.particle_count();
    let horizon = spec.run.time_horizon;
    let estimates = spec.per_seed(|seed| {
        loynes_ring_replication(lambda, t.ring, count, seed, horizon).map_err(runtime)
    })?;
    let mut rows: Vec<Row> = estimates
        .iter()
        .map(|(seed, e)| Row::new(Some(lambda), None, Some(*seed), "loynes", e.value as f64))
        .collect();
    let values: Vec<u64> = estimates.iter().map(|(_, e)| e.value).collect();
    let fit = fit_exponential_tail_with(&values, spec.fit_tail.min_bin_count).ok();
    if let Some(f) = &fit {
        rows.push(Row::new(Some(lambda), None, None, "empirical_decay_rate", -f.slope));
        rows.push(Row::new(Some(lambda), None, None, "r_squared", f.r_squared));
    }
    Ok((rows, json!({"L": t.ring, "K": count, "values": values, "fit": fit})))
}

/// Writes the CSV, the JSON result and the provenance file into
/// `spec.output.dir`. On failure, files written so far are removed.
pub fn write_outputs(record: &ResultRecord) -> Result<Vec<PathBuf>, CliError> {
    let dir = &record.spec.output.dir;
    let name = record.spec.command.name();
    let files = [
        (dir.join(format!("{name}.csv")), rows_to_csv(&record.rows)),
        (
            dir.join(format!("{name}.json")),
            serde_json::to_string_pretty(&json!({"spec": record.spec, "results": record.details}))
                .map_err(runtime)?
                + "\n",
        ),
        (
            dir.join("provenance.json"),
            serde_json::to_string_pretty(&json!({"spec": record.spec, "provenance": record.provenance}))
                .map_err(runtime)?
                + "\n",
        ),
    ];
    let mut written = Vec::new();
    let result = std::fs::create_dir_all(dir).and_then(|_| {
        for (path, body) in &files {
            written.push(path.clone());
            std::fs::write(path, body)?;
        }
        Ok(())
    });
    match result {
        Ok(()) => Ok(written),
        Err(e) => {
            for p in &written {
                let _ = std::fs::remove_file(p);
            }
            Err(runtime(format!("writing outputs to {}: {e}", dir.display())))
        }
    }
}

/// Command-line entry.
#[derive(Debug, Parser)]
#[command(name = "bptandem", version, about = "Back-pressure tandem queue experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Simulate the tandem, by default sampling its stationary regime.
    Simulate(Overrides),
    /// Solve a small truncated tandem exactly.
    Exact(Overrides),
    /// Ring flux, tagged-particle speed or source flux of TASEP.
    Tasep(Overrides),
    /// Count order violations of the couplings on shared clocks.
    CoupleCheck(Overrides),
    /// Stationary Q_1 over a lambda by N grid.
    Scan(Overrides),
    /// Fit an exponential tail to integer samples.
    FitTail(Overrides),
    /// Loynes estimates against a ring-TASEP service process.
    Loynes(Overrides),
}

impl CliCommand {
    pub fn split(&self) -> (Command, &Overrides) {
        match self {
            CliCommand::Simulate(o) => (Command::Simulate, o),
            CliCommand::Exact(o) => (Command::Exact, o),
            CliCommand::Tasep(o) => (Command::Tasep, o),
            CliCommand::CoupleCheck(o) => (Command::CoupleCheck, o),
            CliCommand::Scan(o) => (Command::Scan, o),
            CliCommand::FitTail(o) => (Command::FitTail, o),
            CliCommand::Loynes(o) => (Command::Loynes, o),
        }
    }
}

/// Flags overriding fields of the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML experiment spec; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run with this single seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Number of sites, or "inf".
    #[arg(long = "sites")]
    pub sites: Option<String>,
    #[arg(long)]
    pub time_horizon: Option<f64>,
    #[arg(long)]
    pub replications: Option<u64>,
    #[arg(long)]
    pub burn_in_fraction: Option<f64>,
    #[arg(long)]
    pub sample_count: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    /// Ring length.
    #[arg(long = "ring")]
    pub ring: Option<usize>,
    #[arg(long)]
    pub cap: Option<u64>,
    /// Samples file for fit-tail.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

/// Loads the config named by `overrides` and applies the flags on top.
pub fn resolve_spec(command: Command, o: &Overrides) -> Result<ExperimentSpec, CliError> {
    let mut spec = match &o.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Validation(vec![format!("config {}: {e}", path.display())]))?;
            ExperimentSpec::from_toml(&text)?
        }
        None => ExperimentSpec::default(),
    };
    spec.command = command;
    if let Some(s) = o.seed {
        spec.run.seeds = vec![s];
        spec.run.replications = None;
    }
    macro_rules! set {
        ($src:expr, $dst:expr) => {
            if let Some(v) = $src.clone() {
                $dst = v;
            }
        };
    }
    set!(o.workers, spec.run.workers);
    set!(o.out, spec.output.dir);
    set!(o.lambda, spec.model.lambda);
    set!(o.sites.as_deref().map(Sites::parse), spec.model.sites);
    set!(o.time_horizon, spec.run.time_horizon);
    set!(o.burn_in_fraction, spec.run.burn_in_fraction);
    set!(o.sample_count, spec.run.sample_count);
    set!(o.rho, spec.tasep.rho);
    set!(o.ring, spec.tasep.ring);
    set!(o.cap, spec.exact.cap);
    if o.replications.is_some() {
        spec.run.replications = o.replications;
    }
    if o.input.is_some() {
        spec.fit_tail.input = o.input.clone();
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for cmd in [
            Command::Simulate,
            Command::Exact,
            Command::Tasep,
            Command::CoupleCheck,
            Command::FitTail,
            Command::Loynes,
        ] {
            let mut spec = ExperimentSpec {
                command: cmd,
                ..Default::default()
            };
            if cmd == Command::Exact {
                spec.model.sites = Sites::Count(2);
            }
            assert!(validate(&spec).is_empty(), "{cmd:?}: {:?}", validate(&spec));
        }
        let mut scan = ExperimentSpec {
            command: Command::Scan,
            ..Default::default()
        };
        assert_eq!(validate(&scan).len(), 1, "one seed is not enough");
        scan.run.seeds = vec![1, 2];
        assert!(validate(&scan).is_empty());
    }

    #[test]
    fn violations_are_listed() {
        let mut spec = ExperimentSpec::default();
        spec.model.lambda = 1.2;
        let v = validate(&spec);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("λ < 1 required for stationary estimation"), "{v:?}");

        spec.model.sites = Sites::Named("many".into());
        spec.run.seeds.clear();
        assert_eq!(validate(&spec).len(), 3);

        let mut tasep = ExperimentSpec {
            command: Command::Tasep,
            ..Default::default()
        };
        tasep.tasep.rho = 0.0;
        assert!(validate(&tasep)[0].starts_with("tasep.rho"));

        let mut exact = ExperimentSpec {
            command: Command::Exact,
            ..Default::default()
        };
        exact.model.sites = Sites::Count(8);
        assert!(validate(&exact)[0].contains("states exceed"));
        exact.model.sites = Sites::Named("inf".into());
        assert!(validate(&exact)[0].contains("finite N"));

        // the transient simulator takes any positive rate and the infinite tandem
        let mut transient = ExperimentSpec::default();
        transient.run.stationary = false;
        transient.model.lambda = 1.5;
        transient.model.sites = Sites::Named("inf".into());
        assert!(validate(&transient).is_empty());
    }

    #[test]
    fn toml_layout() {
        let text = r#"
            command = "exact"
            [model]
            lambda = 0.5
            N = 1
            [exact]
            cap = 30
        "#;
        let spec = ExperimentSpec::from_toml(text).unwrap();
        assert_eq!(spec.command, Command::Exact);
        assert_eq!(spec.model.sites, Sites::Count(1));
        assert_eq!(spec.run, RunSection::default());
        let inf = ExperimentSpec::from_toml("[model]\nN = \"inf\"").unwrap();
        assert_eq!(inf.model.sites.horizon(), Some(Horizon::Infinite));
        assert!(ExperimentSpec::from_toml("[model]\nlamda = 0.2").is_err());
    }

    #[test]
    fn exact_mm1_rows() {
        let spec = ExperimentSpec::from_toml("command = \"exact\"\n[model]\nlambda = 0.5\nN = 1").unwrap();
        let record = run(&spec).unwrap();
        let p0 = record.rows.iter().find(|r| r.metric == "p_q1_eq_0").unwrap();
        assert!((p0.value - 0.5).abs() < 1e-8);
        let csv = rows_to_csv(&record.rows);
        assert!(csv.starts_with("lambda,N,seed,metric,value,ci_lo,ci_hi\n0.5,1,,p_q1_eq_0,"));
    }

    #[test]
    fn seed_expansion() {
        let run = RunSection {
            seeds: vec![10],
            replications: Some(3),
            ..Default::default()
        };
        assert_eq!(run.seed_list(), vec![10, 11, 12]);
    }
}
