//! Orchestration behind the `fogwear` binary: configuration, the in-process
//! end-to-end run, benchmarks, trace replay and the standalone services.

pub mod config;
pub mod run;
pub mod services;

use thiserror::Error;

pub use config::{parse_config, parse_config_with, ConfigError, RunConfig};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("device: {0}")]
    Device(#[from] fogwear::device::DeviceError),
    #[error("mesh: {0}")]
    Mesh(#[from] fogwear::mesh::MeshError),
    #[error("gateway: {0}")]
    Gateway(#[from] fogwear::gateway::GatewayError),
    #[error("cloud: {0}")]
    Cloud(#[from] fogwear::cloud::CloudError),
    #[error("bench: {0}")]
    Bench(#[from] fogwear::bench::BenchError),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl RunError {
    pub fn io(context: impl std::fmt::Display) -> impl FnOnce(std::io::Error) -> RunError {
        let context = context.to_string();
        move |source| RunError::Io { context, source }
    }

    /// 2 for configuration problems, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            _ => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            RunError::Config(_) => "config",
            RunError::Device(_) => "device",
            RunError::Mesh(_) => "mesh",
            RunError::Gateway(_) => "gateway",
            RunError::Cloud(_) => "cloud",
            RunError::Bench(_) => "bench",
            RunError::Io { .. } => "io",
            RunError::Json(_) | RunError::Csv(_) => "output",
        }
    }
}
