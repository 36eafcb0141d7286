//! `simulate`, `bench` and `replay`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fogwear::bench::{fit_scaling, profile_pipeline, run_scenario, total_points, write_bench_csv, BenchError, BenchReport};
use fogwear::cloud::{encode_frame, serve, CloudFrame, LongTermLog, SinkClient};
use fogwear::device::{device_rng, packetize, replay_csv, synth_session, GloveConfig};
use fogwear::gateway::{profile_within, FogGateway, SessionSummary};
use fogwear::mesh::{deliver_data, simulate_dissemination, NodeId, TopologyGraph};
use fogwear::signal::{FlexSample, FrequencyPoint};
use serde::Serialize;

use crate::config::{module_seed, RunConfig, TopologySpec};
use crate::RunError;

pub const LONGTERM_LOG: &str = "longterm.jsonl";
pub const RUN_REPORT: &str = "run_report.json";
pub const ROUND_CSV: &str = "round_frequencies.csv";
pub const BENCH_CSV: &str = "bench.csv";
pub const BENCH_REPORT: &str = "bench_report.json";
pub const REPLAY_REPORT: &str = "replay_report.json";
pub const REPLAY_LOG: &str = "replay_longterm.jsonl";

pub const MODULES: [&str; 4] = ["device_sim", "mesh_net", "fog_gateway", "bench_harness"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkStats {
    pub packets: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub attempts: u64,
    /// Simulated time spent on the air, failed attempts included.
    pub link_time_s: f64,
    pub hops: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceOutcome {
    pub device_id: String,
    pub summary: SessionSummary,
    /// Profile windows lying wholly inside the final round.
    pub final_round_profile: Vec<FrequencyPoint>,
    pub link: LinkStats,
    pub raw_bytes: u64,
    pub forwarded_bytes: u64,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DisseminationDigest {
    pub originator: NodeId,
    pub coverage: f64,
    pub tx_total: u64,
    pub convergence_time_s: Option<f64>,
    pub tx_per_node: BTreeMap<NodeId, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Totals {
    pub raw_bytes: u64,
    pub forwarded_bytes: u64,
    pub forwarded_ratio: f64,
    pub sink_records: u64,
}

/// Everything in it is a function of the configuration and seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub module_seeds: BTreeMap<String, u64>,
    pub dissemination: DisseminationDigest,
    pub devices: Vec<DeviceOutcome>,
    pub totals: Totals,
    pub gateway_errors: Vec<String>,
}

#[derive(Debug, Serialize)]
struct RoundRow<'a> {
    device_id: &'a str,
    session_id: &'a str,
    round: &'a str,
    mean_freq_hz: f64,
    max_freq_hz: f64,
    tap_count: u64,
}

fn prepare_output(dir: &Path) -> Result<(), RunError> {
    fs::create_dir_all(dir).map_err(RunError::io(dir.display()))
}

fn remove_if_present(path: &Path) -> Result<(), RunError> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(RunError::io(path.display())(e)),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(RunError::io(path.display()))
}

pub fn build_topology(config: &RunConfig) -> Result<TopologyGraph, RunError> {
    let mesh = &config.mesh;
    Ok(match &mesh.topology {
        TopologySpec::Star => TopologyGraph::star(&mesh.gateway_node, &config.devices.device_ids(), mesh.link)?,
        TopologySpec::File { path } => TopologyGraph::load(path)?,
    })
}

/// Sends every session's frames over one connection to a fresh sink whose
/// long-term log lives at `log_path`. Returns wire bytes per session, in
/// input order, and the number of persisted records.
fn forward_to_sink(log_path: &Path, batches: &[Vec<CloudFrame>]) -> Result<(Vec<u64>, u64), RunError> {
    remove_if_present(log_path)?;
    let server = serve("127.0.0.1:0", LongTermLog::open(log_path)?)?;
    let sent = (|| -> Result<Vec<u64>, RunError> {
        let mut client = SinkClient::connect(server.local_addr())?;
        let mut bytes = Vec::with_capacity(batches.len());
        for frames in batches {
            let mut total = 0u64;
            for frame in frames {
                let mut frame = frame.clone();
                frame.seq = client.send(frame.clone())?;
                total += encode_frame(&frame)?.len() as u64;
            }
            bytes.push(total);
        }
        Ok(bytes)
    })();
    let records = server.shutdown().len();
    Ok((sent?, records))
}

fn final_round_profile(gateway: &FogGateway, config: &RunConfig, session_id: &str) -> Vec<FrequencyPoint> {
    let Some((start, end)) = config.devices.protocol.boundaries().last().copied() else { return Vec::new() };
    gateway
        .record(session_id)
        .and_then(|r| r.profile().map(|p| profile_within(p, start, end)))
        .unwrap_or_default()
}

/// Sends one device's session across the mesh into the gateway and closes it.
fn run_device(
    ordinal: usize,
    config: &RunConfig,
    topology: &TopologyGraph,
    gateway: &FogGateway,
    device_base_seed: u64,
    mesh_seed: u64,
) -> Result<(SessionSummary, LinkStats, Vec<String>), RunError> {
    let devices = &config.devices;
    let device_id = devices.device_id(ordinal);
    let glove = GloveConfig { seed: fogwear::device::device_seed(device_base_seed, ordinal as u64), ..devices.glove.clone() };
    let samples = synth_session(&devices.protocol, &glove)?;
    let packets = packetize(&samples, &device_id, devices.batch_samples)?;

    let route = topology
        .shortest_path(&device_id, &config.mesh.gateway_node)?
        .ok_or_else(|| fogwear::mesh::MeshError::Route(format!("{device_id} cannot reach {}", config.mesh.gateway_node)))?;
    let mut rng = device_rng(mesh_seed, ordinal as u64);
    let mut link = LinkStats { packets: 0, delivered: 0, dropped: 0, attempts: 0, link_time_s: 0.0, hops: route.len() - 1 };
    let mut errors = Vec::new();
    for packet in packets {
        link.packets += 1;
        let bits = packet.encoded_len() as u64 * 8;
        let mut delivered = false;
        for _ in 0..config.mesh.max_attempts {
            let outcome = deliver_data(topology, &route, bits, &mut rng)?;
            link.attempts += 1;
            link.link_time_s += outcome.latency_s;
            if outcome.delivered {
                delivered = true;
                break;
            }
        }
        if !delivered {
            link.dropped += 1;
            continue;
        }
        link.delivered += 1;
        if let Err(e) = gateway.ingest_packet(packet) {
            errors.push(e.to_string());
        }
    }
    let summary = gateway.close_device(&device_id, &devices.protocol)?;
    Ok((summary, link, errors))
}

/// Devices → mesh → gateway → sink, all in-process. Writes the long-term
/// log, the run report and the per-round frequency table.
pub fn simulate(config: &RunConfig) -> Result<RunReport, RunError> {
    let out = &config.output_dir;
    prepare_output(out)?;
    let module_seeds: BTreeMap<String, u64> = MODULES.iter().map(|m| (m.to_string(), module_seed(config.seed, m))).collect();
    let device_base_seed = module_seeds["device_sim"];
    let mesh_seed = module_seeds["mesh_net"];

    let topology = build_topology(config)?;
    let stats = simulate_dissemination(
        &topology,
        &config.mesh.trickle,
        &config.mesh.gateway_node,
        config.mesh.dissemination_s,
        mesh_seed,
    )?;
    let dissemination = DisseminationDigest {
        originator: config.mesh.gateway_node.clone(),
        coverage: stats.coverage,
        tx_total: stats.tx_total,
        convergence_time_s: stats.convergence_time_s,
        tx_per_node: stats.tx_per_node,
    };

    let gateway = FogGateway::new(config.gateway.clone())?;
    // The store must hold every session of this run for forwarding.
    if config.devices.count > config.gateway.capacity {
        return Err(fogwear::gateway::GatewayError::Config(format!(
            "{} devices exceed gateway capacity {}",
            config.devices.count, config.gateway.capacity
        ))
        .into());
    }
    let results: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..config.devices.count)
            .map(|i| {
                let (topology, gateway) = (&topology, &gateway);
                scope.spawn(move || run_device(i, config, topology, gateway, device_base_seed, mesh_seed))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("device thread panicked")).collect()
    });

    let mut devices = Vec::with_capacity(results.len());
    let mut gateway_errors = Vec::new();
    let mut batches = Vec::with_capacity(results.len());
    for (i, result) in results.into_iter().enumerate() {
        let (summary, link, errors) = result?;
        gateway_errors.extend(errors);
        let frames = gateway.forward_frames(&summary)?;
        let raw_bytes = gateway.record(&summary.session_id).map_or(0, |r| r.raw_bytes_received());
        devices.push(DeviceOutcome {
            device_id: config.devices.device_id(i),
            final_round_profile: final_round_profile(&gateway, config, &summary.session_id),
            summary,
            link,
            raw_bytes,
            forwarded_bytes: 0,
            frames: frames.len(),
        });
        batches.push(frames);
    }

    let (sent, sink_records) = forward_to_sink(&out.join(LONGTERM_LOG), &batches)?;
    for (d, bytes) in devices.iter_mut().zip(sent) {
        d.forwarded_bytes = bytes;
    }
    let raw_bytes: u64 = devices.iter().map(|d| d.raw_bytes).sum();
    let forwarded_bytes: u64 = devices.iter().map(|d| d.forwarded_bytes).sum();
    let report = RunReport {
        seed: config.seed,
        module_seeds,
        dissemination,
        devices,
        totals: Totals {
            raw_bytes,
            forwarded_bytes,
            forwarded_ratio: if raw_bytes > 0 { forwarded_bytes as f64 / raw_bytes as f64 } else { 0.0 },
            sink_records,
        },
        gateway_errors,
    };

    write_json(&out.join(RUN_REPORT), &report)?;
    write_round_csv(&out.join(ROUND_CSV), report.devices.iter().map(|d| &d.summary))?;
    Ok(report)
}

fn write_round_csv<'a>(path: &Path, summaries: impl Iterator<Item = &'a SessionSummary>) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path)?;
    for s in summaries {
        for r in &s.rounds {
            w.serialize(RoundRow {
                device_id: &s.device_id,
                session_id: &s.session_id,
                round: &r.label,
                mean_freq_hz: r.mean_freq_hz,
                max_freq_hz: r.max_freq_hz,
                tap_count: r.tap_count,
            })?;
        }
    }
    w.flush().map_err(RunError::io(path.display()))
}

/// Queueing scenarios plus pipeline profiling; writes the stage CSV and a
/// JSON report. The scaling fit is omitted when fewer than three distinct
/// dataset counts were profiled.
pub fn bench(config: &RunConfig) -> Result<BenchReport, RunError> {
    let out = &config.output_dir;
    prepare_output(out)?;
    let seed = module_seed(config.seed, "bench_harness");
    let scenarios = config.bench.scenarios.iter().map(|s| run_scenario(s, seed)).collect::<Result<Vec<_>, _>>()?;
    let rows = profile_pipeline(&config.bench.n_datasets, seed)?;
    let csv_path = out.join(BENCH_CSV);
    let file = fs::File::create(&csv_path).map_err(RunError::io(csv_path.display()))?;
    write_bench_csv(std::io::BufWriter::new(file), &rows).map_err(RunError::io(csv_path.display()))?;
    let scaling_fit = match fit_scaling(&total_points(&rows)) {
        Ok(fit) => Some(fit),
        Err(BenchError::InsufficientData(_)) => None,
        Err(e) => return Err(e.into()),
    };
    let report = BenchReport { scenarios, scaling_fit };
    write_json(&out.join(BENCH_REPORT), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub trace: PathBuf,
    pub samples: usize,
    pub summary: SessionSummary,
    pub final_round_profile: Vec<FrequencyPoint>,
    pub raw_bytes: u64,
    pub forwarded_bytes: u64,
    pub sink_records: u64,
}

/// Feeds a recorded CSV trace through the gateway and a fresh sink.
pub fn replay(config: &RunConfig) -> Result<ReplayReport, RunError> {
    let trace = config
        .replay
        .trace
        .clone()
        .ok_or_else(|| crate::ConfigError::Missing { key: "replay.trace".into() })?;
    let out = &config.output_dir;
    prepare_output(out)?;
    let samples: Vec<FlexSample> = replay_csv(&trace)?;
    let device_id = &config.replay.device_id;
    let gateway = FogGateway::new(config.gateway.clone())?;
    for packet in packetize(&samples, device_id, config.devices.batch_samples)? {
        gateway.ingest_packet(packet)?;
    }
    let summary = gateway.close_device(device_id, &config.devices.protocol)?;
    let frames = gateway.forward_frames(&summary)?;
    let (sent, sink_records) = forward_to_sink(&out.join(REPLAY_LOG), &[frames])?;
    let report = ReplayReport {
        trace,
        samples: samples.len(),
        final_round_profile: final_round_profile(&gateway, config, &summary.session_id),
        raw_bytes: gateway.record(&summary.session_id).map_or(0, |r| r.raw_bytes_received()),
        summary,
        forwarded_bytes: sent[0],
        sink_records,
    };
    write_json(&out.join(REPLAY_REPORT), &report)?;
    Ok(report)
}
