//! Acceptance suite. One line per criterion; exits nonzero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use fogwear::bench::{fit_scaling, profile_pipeline, simulate_queue, write_bench_csv, QueueConfig, ScalingModel, TimeDist};
use fogwear::cloud::{decode_frame, encode_frame, serve, CloudFrame, EventKind, LongTermLog, SinkClient};
use fogwear::device::TapProtocol;
use fogwear::mesh::{simulate_dissemination, LinkModel, TopologyGraph, TrickleParams};
use fogwear_cli::config::{from_value, module_seed, RunConfig};
use fogwear_cli::run;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn config(dir: &Path, extra: Value) -> Result<RunConfig, String> {
    let mut doc = json!({"seed": 2024, "output_dir": dir});
    for (k, v) in extra.as_object().cloned().unwrap_or_default() {
        doc[k] = v;
    }
    from_value(doc, dir).map(|p| p.config).map_err(|e| e.to_string())
}

fn within(limit_s: f64, started: Instant) -> Result<f64, String> {
    let took = started.elapsed().as_secs_f64();
    ensure!(took < limit_s, "took {took:.2}s, limit {limit_s}s");
    Ok(took)
}

fn c1_five_round_ordering() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let started = Instant::now();
    let report = run::simulate(&config(dir.path(), json!({}))?).map_err(|e| e.to_string())?;
    let took = within(10.0, started)?;
    let device = &report.devices[0];
    let f: Vec<f64> = device.summary.rounds.iter().map(|r| r.mean_freq_hz).collect();
    ensure!(f.len() == 5, "expected 5 rounds, got {}", f.len());
    ensure!((f[0] - f[1]).abs() <= 0.2, "|f1 - f2| = {}", (f[0] - f[1]).abs());
    ensure!(f[1] < f[2] && f[2] < f[3], "f2 < f3 < f4 fails: {f:?}");
    let profile: Vec<f64> = device.final_round_profile.iter().map(|p| p.freq).collect();
    ensure!(profile.len() >= 2, "round-5 profile has {} windows", profile.len());
    let drops: Vec<f64> = profile.windows(2).map(|w| w[0] - w[1]).filter(|d| *d > 0.0).collect();
    ensure!(drops.len() <= 1 && drops.iter().all(|d| *d <= 0.25), "round-5 profile {profile:?} not nondecreasing");
    Ok(format!("f = {:.3?}, round-5 profile {profile:?}, {took:.2}s", f))
}

fn c2_little_scenarios() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let started = Instant::now();
    let report = run::bench(&config(dir.path(), json!({}))?).map_err(|e| e.to_string())?;
    let took = within(5.0, started)?;
    let by_name: BTreeMap<&str, _> = report.scenarios.iter().map(|s| (s.name.as_str(), s)).collect();
    let pi = by_name.get("pi").ok_or("no pi scenario")?;
    let edison = by_name.get("edison").ok_or("no edison scenario")?;
    let pi_lead = pi.queue_stats.lead_time_s;
    ensure!((pi_lead - 12.39).abs() <= 0.01 * 12.39, "pi lead time {pi_lead}");
    ensure!(!pi.queue_stats.saturated, "pi saturated");
    ensure!(edison.queue_stats.saturated, "edison not saturated");
    ensure!((edison.lead_time_s - 64.65).abs() < 1e-9, "edison single-set lead time {}", edison.lead_time_s);
    ensure!(
        edison.final_sojourn_s > 5.0 * edison.first_sojourn_s,
        "edison sojourn {} -> {}",
        edison.first_sojourn_s,
        edison.final_sojourn_s
    );
    let run = simulate_queue(&QueueConfig {
        interarrival: TimeDist::Deterministic { value_s: 60.0 },
        service: TimeDist::Deterministic { value_s: 64.65 },
        n_jobs: 200,
        seed: 0,
    })
    .map_err(|e| e.to_string())?;
    let steps: Vec<f64> = run.sojourns.windows(2).map(|w| w[1] - w[0]).collect();
    ensure!(steps.iter().all(|s| (s - 4.65).abs() < 1e-6), "edison sojourn growth not linear");
    Ok(format!(
        "pi lead {pi_lead:.2}s; edison lead {:.2}s, sojourn {:.1}s -> {:.1}s over 200 jobs, {took:.2}s",
        edison.lead_time_s, edison.first_sojourn_s, edison.final_sojourn_s
    ))
}

fn c3_little_consistency() -> Check {
    let run = simulate_queue(&QueueConfig {
        interarrival: TimeDist::Exponential { mean_s: 2.0 },
        service: TimeDist::Exponential { mean_s: 1.0 },
        n_jobs: 10_000,
        seed: module_seed(2024, "bench_harness"),
    })
    .map_err(|e| e.to_string())?;
    let s = run.stats;
    let rel = (s.wip - s.acr * s.lead_time_s).abs() / s.wip;
    ensure!(rel <= 0.01, "WIP {} vs ACR x W {} (rel {rel})", s.wip, s.acr * s.lead_time_s);
    Ok(format!("WIP {:.4} vs ACR x W {:.4}, rel err {rel:.2e}", s.wip, s.acr * s.lead_time_s))
}

fn c4_bandwidth() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let protocol = serde_json::to_value(TapProtocol::default().cycled(12)).map_err(|e| e.to_string())?;
    let cfg = config(dir.path(), json!({"devices": {"count": 1, "protocol": protocol}, "gateway": {"policy": {"mode": "summary_only"}}}))?;
    let report = run::simulate(&cfg).map_err(|e| e.to_string())?;
    let d = &report.devices[0];
    ensure!(d.summary.duration_s == 600.0, "session length {}", d.summary.duration_s);
    ensure!(d.link.dropped == 0, "dropped packets");
    // 30,000 instants x two channels x 17 bytes, plus a 29-byte header per packet
    let packets = 60_000u64.div_ceil(25);
    let expected_raw = 60_000 * 17 + packets * (2 + 7 + 8 + 8 + 4);
    ensure!(d.raw_bytes == expected_raw, "raw bytes {} != {expected_raw}", d.raw_bytes);
    let ratio = d.forwarded_bytes as f64 / d.raw_bytes as f64;
    ensure!(ratio <= 0.05, "forwarded {} of {} raw bytes ({ratio:.4})", d.forwarded_bytes, d.raw_bytes);
    Ok(format!("{} forwarded / {} raw bytes = {:.3}%", d.forwarded_bytes, d.raw_bytes, ratio * 100.0))
}

fn c5_trickle() -> Check {
    let started = Instant::now();
    let params = TrickleParams::default();
    let i_max = params.i_max_s();
    let link = LinkModel { loss_prob: 0.0, ..LinkModel::default() };
    let seed = module_seed(2024, "mesh_net");

    let graph = TopologyGraph::random_connected(20, 0.1, seed, link).map_err(|e| e.to_string())?;
    ensure!(graph.is_connected(), "generated graph is disconnected");
    let stats = simulate_dissemination(&graph, &params, "n00", 10.0 * i_max, seed).map_err(|e| e.to_string())?;
    ensure!(stats.coverage == 1.0, "coverage {}", stats.coverage);
    let converged = stats.convergence_time_s.ok_or("never converged")?;
    ensure!(converged <= 10.0 * i_max, "converged at {converged}");
    let mut per_interval: BTreeMap<(usize, u64), u32> = BTreeMap::new();
    for tx in &stats.transmissions {
        *per_interval.entry((tx.node, tx.interval)).or_default() += 1;
    }
    let worst = per_interval.values().copied().max().unwrap_or(0);
    ensure!(worst <= 1, "a node sent {worst} times in one interval");

    let clique = TopologyGraph::clique(10, link).map_err(|e| e.to_string())?;
    let warmup = 10.0 * i_max;
    let stats = simulate_dissemination(&clique, &params, "n00", warmup + 50.0 * i_max, seed).map_err(|e| e.to_string())?;
    ensure!(stats.convergence_time_s.is_some_and(|t| t < warmup), "clique did not converge before warm-up end");
    let steady = stats.transmissions.iter().filter(|t| t.t >= warmup).count();
    let per_interval = steady as f64 / 50.0;
    ensure!(per_interval < 10.0, "{per_interval} transmissions per interval");
    let took = within(5.0, started)?;
    Ok(format!(
        "20-node coverage 1.0 at {converged:.2}s (limit {:.0}s); clique {per_interval:.2} tx/interval; {took:.2}s",
        10.0 * i_max
    ))
}

fn skeleton(csv: &str, seed: u64) -> Result<String, String> {
    let mut out = String::new();
    for (i, line) in csv.lines().enumerate() {
        if i == 0 {
            out.push_str(line);
            out.push('\n');
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        ensure!(f.len() == 6, "row {i} has {} fields", f.len());
        let decimals = |s: &str, d: usize| s.split_once('.').is_some_and(|(a, b)| !a.is_empty() && b.len() == d && s.parse::<f64>().is_ok());
        ensure!(decimals(f[2], 3) && decimals(f[3], 1) && decimals(f[4], 2), "row {i} number format: {line}");
        ensure!(f[5] == seed.to_string(), "row {i} seed {}", f[5]);
        out.push_str(&format!("{},{},<ms:3>,<pct:1>,<pct:2>,<seed>\n", f[0], f[1]));
    }
    Ok(out)
}

fn c6_scaling() -> Check {
    let points: Vec<(f64, f64)> = [2.0f64, 4.0, 8.0, 16.0, 32.0].iter().map(|&n| (n, 0.75 * n * n.ln())).collect();
    let fit = fit_scaling(&points).map_err(|e| e.to_string())?;
    ensure!(fit.model == ScalingModel::NLogN && fit.r_squared >= 0.99, "fit {fit:?}");

    let seed = 99;
    let rows = profile_pipeline(&[1, 2, 4, 8, 16], seed).map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    write_bench_csv(&mut buf, &rows).map_err(|e| e.to_string())?;
    let csv = String::from_utf8(buf).map_err(|e| e.to_string())?;
    let golden = include_str!("golden/bench_schema.csv");
    let got = skeleton(&csv, seed)?;
    ensure!(got == golden, "CSV structure differs from golden:\n{got}");
    Ok(format!("NLogN r2 = {:.6}; {} CSV rows match golden schema", fit.r_squared, rows.len()))
}

fn random_value(rng: &mut ChaCha8Rng, depth: u32) -> Value {
    match rng.random_range(0..if depth > 2 { 5 } else { 7 }) {
        0 => Value::Null,
        1 => Value::Bool(rng.random()),
        2 => json!(rng.random::<u64>()),
        3 => {
            let x = f64::from_bits(rng.random::<u64>());
            if x.is_finite() { json!(x) } else { json!(rng.random::<f64>() * 1e6) }
        }
        4 => {
            let s: String = (0..rng.random_range(0..12)).map(|_| rng.random::<char>()).collect();
            Value::String(s)
        }
        5 => Value::Array((0..rng.random_range(0..4)).map(|_| random_value(rng, depth + 1)).collect()),
        _ => Value::Object(
            (0..rng.random_range(0..4)).map(|i| (format!("k{i}{}", rng.random::<u16>()), random_value(rng, depth + 1))).collect(),
        ),
    }
}

fn random_frame(rng: &mut ChaCha8Rng) -> CloudFrame {
    let event = EventKind::ALL[rng.random_range(0..EventKind::ALL.len())];
    let session: String = (0..rng.random_range(0..20)).map(|_| rng.random::<char>()).collect();
    let payload = Value::Object((0..rng.random_range(0..5)).map(|i| (format!("f{i}"), random_value(rng, 0))).collect());
    CloudFrame::new(event, session, rng.random(), payload)
}

fn c7_codec_and_persistence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..1000 {
        let frame = random_frame(&mut rng);
        let bytes = encode_frame(&frame).map_err(|e| format!("frame {i}: {e}"))?;
        let back = decode_frame(&bytes).map_err(|e| format!("frame {i}: {e}"))?;
        ensure!(back == frame, "frame {i} changed in round trip");
        ensure!(encode_frame(&back).map_err(|e| e.to_string())? == bytes, "frame {i} re-encodes differently");
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let log_path = dir.path().join("longterm.jsonl");
    let mut acked = Vec::new();
    for run in 0..2 {
        let server = serve("127.0.0.1:0", LongTermLog::open(&log_path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let mut client = SinkClient::connect(server.local_addr()).map_err(|e| e.to_string())?;
        for _ in 0..25 {
            let mut f = random_frame(&mut rng);
            f.seq = client.send(f.clone()).map_err(|e| e.to_string())?;
            acked.push(f);
        }
        drop(client);
        server.shutdown();
        if run == 0 {
            // crash mid-append: a torn record after the last acked one
            use std::io::Write;
            let mut file = std::fs::OpenOptions::new().append(true).open(&log_path).map_err(|e| e.to_string())?;
            file.write_all(br#"{"event":"summary","sess"#).map_err(|e| e.to_string())?;
        }
    }
    let replayed = LongTermLog::read_all(&log_path).map_err(|e| e.to_string())?;
    ensure!(replayed == acked, "replayed {} records, acked {}", replayed.len(), acked.len());

    let ack = encode_frame(&CloudFrame::ack("s1", 0)).map_err(|e| e.to_string())?;
    let mut expected = vec![0x00, 0x00, 0x00, 0x33];
    expected.extend_from_slice(br#"{"event":"ack","session":"s1","seq":0,"payload":{}}"#);
    ensure!(ack == expected, "ack bytes {ack:02x?}");
    Ok(format!("1000 frames bit-exact; {} acked frames survive restart; ack frame = 4 + 51 bytes", acked.len()))
}

fn c8_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("fogwear.json");
    std::fs::write(&cfg, r#"{"seed": 77, "devices": {"count": 3}}"#).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for name in ["first", "second"] {
        let status = Command::new(env!("CARGO_BIN_EXE_fogwear"))
            .args(["simulate", "--config", cfg.to_str().unwrap(), &format!("--output_dir={name}")])
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(status.status.success(), "simulate failed: {}", String::from_utf8_lossy(&status.stderr));
        let read = |f: &str| std::fs::read(dir.path().join(name).join(f)).map_err(|e| e.to_string());
        outputs.push((read(run::LONGTERM_LOG)?, read(run::RUN_REPORT)?));
    }
    ensure!(outputs[0].0 == outputs[1].0, "long-term logs differ");
    ensure!(outputs[0].1 == outputs[1].1, "run reports differ");
    Ok(format!("log {} bytes and report {} bytes identical across runs", outputs[0].0.len(), outputs[0].1.len()))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("five-round ordinal reproduction", c1_five_round_ordering),
        ("Little's Law scenarios", c2_little_scenarios),
        ("internal Little's Law consistency", c3_little_consistency),
        ("bandwidth conservation", c4_bandwidth),
        ("Trickle dissemination", c5_trickle),
        ("scaling fit and CSV schema", c6_scaling),
        ("codec and persistence", c7_codec_and_persistence),
        ("determinism", c8_determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let took = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} [PRIMARY] {name}: PASS ({detail}) [{took:.2}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} [PRIMARY] {name}: FAIL ({why}) [{took:.2}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
