use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use fogwear_cli::config::{parse_config_with, Parsed, ServiceConfig};
use fogwear_cli::services::{log_event, run_gateway, run_sink};
use fogwear_cli::{run, RunError};
use serde_json::json;

/// End-to-end wearable flex-sensor analytics: devices, mesh, fog gateway, cloud sink.
///
/// Any config key can be overridden with `--key.path=value` after the
/// subcommand, e.g. `--gateway.capacity=4` or `--seed=7`.
#[derive(Parser)]
#[command(name = "fogwear", version)]
struct Cli {
    /// JSON run configuration.
    #[arg(short, long, global = true, default_value = "fogwear.json")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Run devices, mesh, gateway and sink in-process.
    Simulate,
    /// Start the fog gateway service.
    Gateway,
    /// Start the cloud sink service.
    Sink,
    /// Push a recorded CSV trace through the gateway.
    Replay,
    /// Run the queueing scenarios and pipeline profiling.
    Bench,
}

/// Splits `--key=value` overrides from the arguments clap understands.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut keep = Vec::new();
    let mut overrides = Vec::new();
    for (i, a) in args.into_iter().enumerate() {
        let is_override = i > 0
            && a.starts_with("--")
            && a.contains('=')
            && !a.starts_with("--config=");
        if is_override {
            overrides.push(a);
        } else {
            keep.push(a);
        }
    }
    (keep, overrides)
}

fn stop_flag(service: &ServiceConfig) -> Arc<AtomicBool> {
    let stop = Arc::new(AtomicBool::new(false));
    if let Some(secs) = service.run_for_s {
        let stop = stop.clone();
        std::thread::spawn(move || {
            std::thread::sleep(Duration::from_secs_f64(secs));
            stop.store(true, Ordering::SeqCst);
        });
    }
    stop
}

fn announce(service: &str) -> impl FnOnce(std::net::SocketAddr) + '_ {
    move |addr| println!("{}", json!({"event": "listening", "service": service, "addr": addr.to_string()}))
}

fn execute(command: Command, parsed: Parsed) -> Result<serde_json::Value, RunError> {
    let config = &parsed.config;
    Ok(match command {
        Command::Simulate => {
            let r = run::simulate(config)?;
            json!({"event": "done", "command": "simulate", "sessions": r.devices.len(),
                   "forwarded_ratio": r.totals.forwarded_ratio, "output_dir": config.output_dir})
        }
        Command::Bench => {
            let r = run::bench(config)?;
            json!({"event": "done", "command": "bench", "scenarios": r.scenarios.len(),
                   "scaling_model": r.scaling_fit.map(|f| f.model), "output_dir": config.output_dir})
        }
        Command::Replay => {
            let r = run::replay(config)?;
            json!({"event": "done", "command": "replay", "session": r.summary.session_id, "total_taps": r.summary.total_taps})
        }
        Command::Gateway => {
            let stop = stop_flag(&config.gateway_service);
            let n = run_gateway(config, &stop, announce("gateway"))?;
            json!({"event": "done", "command": "gateway", "sessions_closed": n})
        }
        Command::Sink => {
            let stop = stop_flag(&config.sink);
            let n = run_sink(config, &stop, announce("sink"))?;
            json!({"event": "done", "command": "sink", "records": n})
        }
    })
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    let parsed = match parse_config_with(&cli.config, &overrides) {
        Ok(p) => p,
        Err(e) => {
            let err = RunError::from(e);
            eprintln!("{}", json!({"error": err.kind(), "message": err.to_string()}));
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    for w in &parsed.warnings {
        log_event(json!({"warning": "unknown config key", "key": w}));
    }
    match execute(cli.command, parsed) {
        Ok(done) => {
            println!("{done}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", json!({"error": err.kind(), "message": err.to_string()}));
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
