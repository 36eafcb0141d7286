//! Benchmark harness: Little's Law arithmetic, a single-server FIFO queue
//! simulator, per-stage pipeline profiling with CSV output, scaling-model
//! fits and a constant-power energy model.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::encode_frame;
use crate::device::{device_seed, packetize, synth_session, GloveConfig, SamplePacket, TapProtocol};
use crate::gateway::{analyze_series, apply_forward_policy, condition_samples, GatewayConfig, GatewayError};

/// Header of the benchmark CSV.
pub const BENCH_CSV_HEADER: &str = "n_datasets,stage,wall_ms,cpu_pct,mem_pct,seed";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("completion rate must be positive, got {0}")]
    Division(f64),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("need at least 3 points with distinct n, got {0}")]
    InsufficientData(usize),
    #[error("pipeline: {0}")]
    Pipeline(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl From<GatewayError> for BenchError {
    fn from(e: GatewayError) -> Self {
        BenchError::Pipeline(e.to_string())
    }
}

impl From<crate::device::DeviceError> for BenchError {
    fn from(e: crate::device::DeviceError) -> Self {
        BenchError::Pipeline(e.to_string())
    }
}

/// Lead time from work-in-process and average completion rate.
pub fn little_law(wip: f64, acr: f64) -> Result<f64, BenchError> {
    if !(acr > 0.0) {
        return Err(BenchError::Division(acr));
    }
    if !(wip >= 0.0) {
        return Err(BenchError::Domain(format!("wip must be >= 0, got {wip}")));
    }
    Ok(wip / acr)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeDist {
    Deterministic { value_s: f64 },
    Exponential { mean_s: f64 },
}

impl TimeDist {
    pub fn mean(&self) -> f64 {
        match *self {
            TimeDist::Deterministic { value_s } => value_s,
            TimeDist::Exponential { mean_s } => mean_s,
        }
    }

    fn sampler(&self) -> Result<Sampler, BenchError> {
        if !(self.mean() > 0.0) {
            return Err(BenchError::Domain(format!("times must be positive, got {}", self.mean())));
        }
        Ok(match *self {
            TimeDist::Deterministic { value_s } => Sampler::Fixed(value_s),
            TimeDist::Exponential { mean_s } => {
                Sampler::Exp(Exp::new(1.0 / mean_s).map_err(|e| BenchError::Domain(e.to_string()))?)
            }
        })
    }
}

enum Sampler {
    Fixed(f64),
    Exp(Exp<f64>),
}

impl Sampler {
    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Sampler::Fixed(v) => *v,
            Sampler::Exp(d) => d.sample(rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueueConfig {
    pub interarrival: TimeDist,
    pub service: TimeDist,
    pub n_jobs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueueStats {
    /// Time-averaged number of jobs in the system.
    pub wip: f64,
    /// Completions per second over the run.
    pub acr: f64,
    /// Mean sojourn time.
    pub lead_time_s: f64,
    pub utilization: f64,
    pub saturated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueRun {
    pub stats: QueueStats,
    pub sojourns: Vec<f64>,
    pub waits: Vec<f64>,
    /// Jobs already in the system when each job arrived.
    pub in_system_at_arrival: Vec<usize>,
}

impl QueueRun {
    /// Relative gap between `wip / acr` and the measured mean sojourn.
    pub fn little_residual(&self) -> f64 {
        let s = &self.stats;
        ((s.wip / s.acr) - s.lead_time_s).abs() / s.lead_time_s
    }
}

/// Single-server FIFO queue. The first job arrives at t = 0.
///
/// WIP is the integral of the number in system over the busy horizon
/// (first arrival to last departure), computed by sweeping arrival and
/// departure instants, independently of the sojourn bookkeeping.
pub fn simulate_queue(config: &QueueConfig) -> Result<QueueRun, BenchError> {
    if config.n_jobs == 0 {
        return Err(BenchError::Domain("n_jobs must be >= 1".into()));
    }
    let arrivals_dist = config.interarrival.sampler()?;
    let service_dist = config.service.sampler()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let n = config.n_jobs;
    let mut arrivals = Vec::with_capacity(n);
    let mut departures: Vec<f64> = Vec::with_capacity(n);
    let mut waits = Vec::with_capacity(n);
    let mut t = 0.0;
    for i in 0..n {
        if i > 0 {
            t += arrivals_dist.draw(&mut rng);
        }
        let service = service_dist.draw(&mut rng);
        let start = departures.last().map_or(t, |&d: &f64| d.max(t));
        arrivals.push(t);
        waits.push(start - t);
        departures.push(start + service);
    }
    let sojourns: Vec<f64> = departures.iter().zip(&arrivals).map(|(d, a)| d - a).collect();

    let mut in_system_at_arrival = Vec::with_capacity(n);
    let mut gone = 0;
    for (i, &a) in arrivals.iter().enumerate() {
        while gone < i && departures[gone] <= a {
            gone += 1;
        }
        in_system_at_arrival.push(i - gone);
    }

    // sweep: +1 at arrivals, -1 at departures
    let mut events: Vec<(f64, i64)> = arrivals.iter().map(|&a| (a, 1)).chain(departures.iter().map(|&d| (d, -1))).collect();
    events.sort_by(|x, y| x.0.total_cmp(&y.0).then(y.1.cmp(&x.1)));
    let (mut area, mut level, mut last_t) = (0.0, 0i64, events[0].0);
    for (t, delta) in events {
        area += level as f64 * (t - last_t);
        level += delta;
        last_t = t;
    }
    let horizon = departures[n - 1] - arrivals[0];
    let utilization = config.service.mean() / config.interarrival.mean();
    let stats = QueueStats {
        wip: area / horizon,
        acr: n as f64 / horizon,
        lead_time_s: sojourns.iter().sum::<f64>() / n as f64,
        utilization,
        saturated: utilization >= 1.0,
    };
    Ok(QueueRun { stats, sojourns, waits, in_system_at_arrival })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerModel {
    pub name: String,
    /// Active draw in milliwatts.
    pub active_mw: f64,
}

impl PowerModel {
    pub fn pi() -> Self {
        PowerModel { name: "pi".into(), active_mw: 198.0 }
    }

    pub fn edison() -> Self {
        PowerModel { name: "edison".into(), active_mw: 529.0 }
    }
}

/// Energy in millijoules for `active_s` seconds at constant draw.
pub fn energy_estimate(active_s: f64, model: &PowerModel) -> Result<f64, BenchError> {
    if !(active_s >= 0.0) {
        return Err(BenchError::Domain(format!("active time must be >= 0, got {active_s}")));
    }
    if !(model.active_mw > 0.0) {
        return Err(BenchError::Domain(format!("power must be > 0, got {}", model.active_mw)));
    }
    Ok(model.active_mw * active_s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalingModel {
    Constant,
    Linear,
    NLogN,
    Quadratic,
}

impl ScalingModel {
    pub const CANDIDATES: [ScalingModel; 4] =
        [ScalingModel::Constant, ScalingModel::Linear, ScalingModel::NLogN, ScalingModel::Quadratic];

    /// Basis function; `n log n` uses the natural log.
    pub fn basis(self, n: f64) -> f64 {
        match self {
            ScalingModel::Constant => 1.0,
            ScalingModel::Linear => n,
            ScalingModel::NLogN => n * n.ln(),
            ScalingModel::Quadratic => n * n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub model: ScalingModel,
    pub coefficient: f64,
    pub r_squared: f64,
}

/// Least-squares fit of `t = c * f(n)` for one basis, r² clamped to [0, 1].
pub fn fit_model(points: &[(f64, f64)], model: ScalingModel) -> ScalingFit {
    let (sft, sff) = points.iter().fold((0.0, 0.0), |(sft, sff), &(n, t)| {
        let f = model.basis(n);
        (sft + f * t, sff + f * f)
    });
    let coefficient = if sff > 0.0 { sft / sff } else { 0.0 };
    let mean = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
    let ss_res: f64 = points.iter().map(|&(n, t)| (t - coefficient * model.basis(n)).powi(2)).sum();
    let ss_tot: f64 = points.iter().map(|&(_, t)| (t - mean).powi(2)).sum();
    let scale: f64 = points.iter().map(|p| p.1 * p.1).sum::<f64>().max(f64::MIN_POSITIVE);
    let r_squared = if ss_tot <= 1e-24 * scale {
        if ss_res <= 1e-24 * scale { 1.0 } else { 0.0 }
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    ScalingFit { model, coefficient, r_squared }
}

/// Best of the candidate models by r²; near-ties go to the simpler model.
pub fn fit_scaling(points: &[(f64, f64)]) -> Result<ScalingFit, BenchError> {
    let mut ns: Vec<f64> = points.iter().map(|p| p.0).collect();
    ns.sort_by(f64::total_cmp);
    ns.dedup();
    if ns.len() < 3 {
        return Err(BenchError::InsufficientData(ns.len()));
    }
    if points.iter().any(|&(n, t)| !(n >= 1.0) || !t.is_finite()) {
        return Err(BenchError::Domain("n must be >= 1 and times finite".into()));
    }
    let mut best = fit_model(points, ScalingModel::Constant);
    for model in &ScalingModel::CANDIDATES[1..] {
        let fit = fit_model(points, *model);
        if fit.r_squared > best.r_squared + 1e-12 {
            best = fit;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Load,
    Condition,
    Analyze,
    Transmit,
    Total,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Load, Stage::Condition, Stage::Analyze, Stage::Transmit, Stage::Total];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Load => "Load",
            Stage::Condition => "Condition",
            Stage::Analyze => "Analyze",
            Stage::Transmit => "Transmit",
            Stage::Total => "Total",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub n_datasets: u64,
    pub stage: Stage,
    pub wall_ms: f64,
    pub cpu_pct: f64,
    pub mem_pct: f64,
    pub seed: u64,
}

/// Process CPU seconds (user + system).
fn cpu_seconds() -> f64 {
    // SAFETY: getrusage only writes into the struct we pass.
    unsafe {
        let mut usage: libc::rusage = std::mem::zeroed();
        if libc::getrusage(libc::RUSAGE_SELF, &mut usage) != 0 {
            return 0.0;
        }
        let tv = |t: libc::timeval| t.tv_sec as f64 + t.tv_usec as f64 * 1e-6;
        tv(usage.ru_utime) + tv(usage.ru_stime)
    }
}

/// Resident set size as a percentage of physical memory; 0 where /proc is
/// unavailable.
fn mem_percent() -> f64 {
    let rss_pages = std::fs::read_to_string("/proc/self/statm")
        .ok()
        .and_then(|s| s.split_whitespace().nth(1).and_then(|v| v.parse::<f64>().ok()));
    let total_kb = std::fs::read_to_string("/proc/meminfo").ok().and_then(|s| {
        s.lines()
            .find(|l| l.starts_with("MemTotal:"))
            .and_then(|l| l.split_whitespace().nth(1).and_then(|v| v.parse::<f64>().ok()))
    });
    // SAFETY: sysconf has no preconditions.
    let page = unsafe { libc::sysconf(libc::_SC_PAGESIZE) } as f64;
    match (rss_pages, total_kb) {
        (Some(p), Some(t)) if t > 0.0 && page > 0.0 => (p * page / (t * 1024.0) * 100.0).clamp(0.0, 100.0),
        _ => 0.0,
    }
}

struct Mark {
    wall: Instant,
    cpu: f64,
}

impl Mark {
    fn now() -> Self {
        Mark { wall: Instant::now(), cpu: cpu_seconds() }
    }

    fn timing(&self, end: &Mark, n: u64, stage: Stage, seed: u64) -> StageTiming {
        let wall_s = end.wall.duration_since(self.wall).as_secs_f64();
        let cpu_pct = if wall_s > 0.0 { ((end.cpu - self.cpu) / wall_s * 100.0).clamp(0.0, 100.0) } else { 0.0 };
        StageTiming { n_datasets: n, stage, wall_ms: wall_s * 1e3, cpu_pct, mem_pct: mem_percent(), seed }
    }
}

/// Profiles the gateway pipeline on `n` synthetic five-round sessions for
/// each `n`. Rows come out per `n` in stage order with `Total` last.
///
/// Load covers synthesis, packetization and the packet wire round trip;
/// Condition, Analyze and Transmit are the gateway's own stage functions,
/// Transmit ending at encoded frame bytes.
pub fn profile_pipeline(n_datasets_list: &[u64], seed: u64) -> Result<Vec<StageTiming>, BenchError> {
    if let Some(&n) = n_datasets_list.iter().find(|&&n| n == 0) {
        return Err(BenchError::Domain(format!("n_datasets must be >= 1, got {n}")));
    }
    let protocol = TapProtocol::default();
    let gateway = GatewayConfig::default();
    let signal = &gateway.signal;
    let mut rows = Vec::with_capacity(n_datasets_list.len() * Stage::ALL.len());

    for &n in n_datasets_list {
        let start = Mark::now();

        let mut sessions = Vec::with_capacity(n as usize);
        for i in 0..n {
            let glove = GloveConfig { seed: device_seed(seed, i), ..GloveConfig::default() };
            let device_id = format!("bench{i:03}");
            let packets = packetize(&synth_session(&protocol, &glove)?, &device_id, 25)?;
            let mut samples = Vec::new();
            for p in packets {
                samples.extend(SamplePacket::decode(&p.encode())?.samples);
            }
            sessions.push((device_id, samples));
        }
        let loaded = Mark::now();

        let mut conditioned = Vec::with_capacity(sessions.len());
        for (device_id, samples) in &sessions {
            let (series, _) = condition_samples(samples, &gateway.sensor, signal)?;
            conditioned.push((device_id, series));
        }
        let cond = Mark::now();

        let mut summaries = Vec::with_capacity(conditioned.len());
        for (device_id, series) in &conditioned {
            let session_id = format!("{device_id}-0000");
            let a = analyze_series(&session_id, device_id, &series[&signal.analysis_channel], &protocol, signal)?;
            summaries.push(a.summary);
        }
        let analyzed = Mark::now();

        let mut wire_bytes = 0usize;
        for summary in &summaries {
            for frame in apply_forward_policy(summary, &gateway.policy, &[]) {
                wire_bytes += encode_frame(&frame).map_err(|e| BenchError::Pipeline(e.to_string()))?.len();
            }
        }
        std::hint::black_box(wire_bytes);
        let sent = Mark::now();

        rows.push(start.timing(&loaded, n, Stage::Load, seed));
        rows.push(loaded.timing(&cond, n, Stage::Condition, seed));
        rows.push(cond.timing(&analyzed, n, Stage::Analyze, seed));
        rows.push(analyzed.timing(&sent, n, Stage::Transmit, seed));
        rows.push(start.timing(&sent, n, Stage::Total, seed));
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(mut w: W, rows: &[StageTiming]) -> std::io::Result<()> {
    writeln!(w, "{BENCH_CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{:.3},{:.1},{:.2},{}", r.n_datasets, r.stage, r.wall_ms, r.cpu_pct, r.mem_pct, r.seed)?;
    }
    w.flush()
}

/// `(n, Total wall_ms)` points for scaling fits.
pub fn total_points(rows: &[StageTiming]) -> Vec<(f64, f64)> {
    rows.iter().filter(|r| r.stage == Stage::Total).map(|r| (r.n_datasets as f64, r.wall_ms)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchScenario {
    pub name: String,
    pub interarrival: TimeDist,
    pub service: TimeDist,
    pub power: PowerModel,
    pub n_jobs: usize,
}

impl BenchScenario {
    /// One dataset per minute into a board that needs `service_s` per dataset.
    pub fn per_minute(name: &str, service_s: f64, power: PowerModel, n_jobs: usize) -> Self {
        BenchScenario {
            name: name.into(),
            interarrival: TimeDist::Deterministic { value_s: 60.0 },
            service: TimeDist::Deterministic { value_s: service_s },
            power,
            n_jobs,
        }
    }

    pub fn edison() -> Self {
        Self::per_minute("edison", 64.65, PowerModel::edison(), 200)
    }

    pub fn pi() -> Self {
        Self::per_minute("pi", 12.39, PowerModel::pi(), 200)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    /// Lead time processing one set at a time (WIP = 1).
    pub lead_time_s: f64,
    /// The simulated arrival stream.
    pub queue_stats: QueueStats,
    pub first_sojourn_s: f64,
    pub final_sojourn_s: f64,
    /// Energy to process one dataset.
    pub energy_mj: f64,
}

pub fn run_scenario(scenario: &BenchScenario, seed: u64) -> Result<ScenarioReport, BenchError> {
    let service = scenario.service.mean();
    let run = simulate_queue(&QueueConfig {
        interarrival: scenario.interarrival,
        service: scenario.service,
        n_jobs: scenario.n_jobs,
        seed,
    })?;
    Ok(ScenarioReport {
        name: scenario.name.clone(),
        lead_time_s: little_law(1.0, 1.0 / service)?,
        queue_stats: run.stats,
        first_sojourn_s: run.sojourns[0],
        final_sojourn_s: *run.sojourns.last().expect("n_jobs >= 1"),
        energy_mj: energy_estimate(service, &scenario.power)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub scenarios: Vec<ScenarioReport>,
    pub scaling_fit: Option<ScalingFit>,
}
