//! Run configuration: JSON document, dotted overrides, validation.

use std::path::{Path, PathBuf};

use fogwear::bench::BenchScenario;
use fogwear::device::{GloveConfig, TapProtocol};
use fogwear::gateway::GatewayConfig;
use fogwear::mesh::{LinkModel, TopologyGraph, TrickleParams};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("missing required key `{key}`")]
    Missing { key: String },
    #[error("at `{path}`: {msg}")]
    Type { path: String, msg: String },
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("bad override `{0}`: expected --key.path=value")]
    Override(String),
    #[error("invalid `{key}`: {msg}")]
    Invalid { key: String, msg: String },
}

impl ConfigError {
    /// Key path the error refers to, where there is one.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Missing { key } | ConfigError::Invalid { key, .. } => Some(key),
            ConfigError::Type { path, .. } => Some(path),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DevicesConfig {
    pub count: usize,
    pub id_prefix: String,
    /// Samples per packet.
    pub batch_samples: usize,
    /// The glove's own `seed` is replaced by one derived from the global seed.
    pub glove: GloveConfig,
    pub protocol: TapProtocol,
}

impl Default for DevicesConfig {
    fn default() -> Self {
        DevicesConfig {
            count: 1,
            id_prefix: "glove".into(),
            batch_samples: 25,
            glove: GloveConfig::default(),
            protocol: TapProtocol::default(),
        }
    }
}

impl DevicesConfig {
    pub fn device_id(&self, ordinal: usize) -> String {
        format!("{}{ordinal:02}", self.id_prefix)
    }

    pub fn device_ids(&self) -> Vec<String> {
        (0..self.count).map(|i| self.device_id(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TopologySpec {
    /// Every device one hop from the gateway node.
    Star,
    /// Topology file; must contain the gateway node and every device id.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeshConfig {
    pub topology: TopologySpec,
    pub gateway_node: String,
    /// Link model used by generated topologies.
    pub link: LinkModel,
    pub trickle: TrickleParams,
    pub dissemination_s: f64,
    /// Per-hop-path delivery attempts before a packet is given up.
    pub max_attempts: u32,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig {
            topology: TopologySpec::Star,
            gateway_node: "fog".into(),
            link: LinkModel::default(),
            trickle: TrickleParams::default(),
            dissemination_s: 120.0,
            max_attempts: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub endpoint: String,
    /// Stop after this many seconds; run until killed when absent.
    pub run_for_s: Option<f64>,
}

impl ServiceConfig {
    fn with_endpoint(endpoint: &str) -> Self {
        ServiceConfig { endpoint: endpoint.into(), run_for_s: None }
    }
}

fn default_sink() -> ServiceConfig {
    ServiceConfig::with_endpoint("127.0.0.1:7171")
}

fn default_gateway_service() -> ServiceConfig {
    ServiceConfig::with_endpoint("127.0.0.1:7170")
}

impl Default for ServiceConfig {
    fn default() -> Self {
        default_sink()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub scenarios: Vec<BenchScenario>,
    pub n_datasets: Vec<u64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { scenarios: vec![BenchScenario::edison(), BenchScenario::pi()], n_datasets: vec![1, 2, 4, 8, 16] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayConfig {
    pub trace: Option<PathBuf>,
    pub device_id: String,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig { trace: None, device_id: "replay00".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub devices: DevicesConfig,
    #[serde(default)]
    pub mesh: MeshConfig,
    #[serde(default)]
    pub gateway: GatewayConfig,
    #[serde(default = "default_gateway_service")]
    pub gateway_service: ServiceConfig,
    #[serde(default = "default_sink")]
    pub sink: ServiceConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub replay: ReplayConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// A validated configuration plus the non-fatal findings made on the way.
#[derive(Debug, Clone)]
pub struct Parsed {
    pub config: RunConfig,
    /// Dotted paths of keys that were ignored.
    pub warnings: Vec<String>,
}

/// Per-module seed: the first eight bytes (little-endian) of
/// `SHA-256(seed as u64 LE || module name)`.
pub fn module_seed(seed: u64, module: &str) -> u64 {
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(module.as_bytes()).finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

pub fn parse_config(path: &Path) -> Result<Parsed, ConfigError> {
    parse_config_with(path, &[])
}

/// Reads `path`, applies `--key.path=value` overrides, then parses and
/// validates. Relative paths inside the file resolve against its directory.
pub fn parse_config_with(path: &Path, overrides: &[String]) -> Result<Parsed, ConfigError> {
    let io = |e: std::io::Error| ConfigError::Io { path: path.display().to_string(), msg: e.to_string() };
    let text = std::fs::read_to_string(path).map_err(io)?;
    let mut value: Value = serde_json::from_str(&text).map_err(|e| ConfigError::Type {
        path: format!("line {} column {}", e.line(), e.column()),
        msg: e.to_string(),
    })?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    from_value(value, &base)
}

/// Parses an already-loaded document; `base` anchors relative paths.
pub fn from_value(value: Value, base: &Path) -> Result<Parsed, ConfigError> {
    let mut warnings = Vec::new();
    let mut track = |p: serde_ignored::Path| warnings.push(p.to_string());
    let parsed: Result<RunConfig, _> = serde_path_to_error::deserialize(serde_ignored::Deserializer::new(value, &mut track));
    let mut config = parsed.map_err(|e| {
        let at = e.path().to_string();
        let msg = e.inner().to_string();
        match missing_field(&msg) {
            Some(field) if at == "." => ConfigError::Missing { key: field.to_string() },
            Some(field) => ConfigError::Missing { key: format!("{at}.{field}") },
            None => ConfigError::Type { path: at, msg },
        }
    })?;
    config.resolve_paths(base);
    config.validate()?;
    Ok(Parsed { config, warnings })
}

fn missing_field(msg: &str) -> Option<&str> {
    msg.strip_prefix("missing field `")?.split('`').next()
}

/// Sets `key.path` to `value` (JSON if it parses, a string otherwise),
/// creating intermediate objects.
pub fn apply_override(doc: &mut Value, arg: &str) -> Result<(), ConfigError> {
    let bad = || ConfigError::Override(arg.to_string());
    let body = arg.strip_prefix("--").ok_or_else(bad)?;
    let (key, raw) = body.split_once('=').ok_or_else(bad)?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(bad());
    }
    let new = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = doc;
    for part in key.split('.') {
        if !slot.is_object() {
            *slot = Value::Object(Default::default());
        }
        slot = slot.as_object_mut().expect("just made an object").entry(part).or_insert(Value::Null);
    }
    *slot = new;
    Ok(())
}

impl RunConfig {
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let TopologySpec::File { path } = &mut self.mesh.topology {
            fix(path);
        }
        if let Some(trace) = &mut self.replay.trace {
            fix(trace);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, msg: String| ConfigError::Invalid { key: key.into(), msg };
        let d = &self.devices;
        if d.count == 0 {
            return Err(invalid("devices.count", "need at least one device".into()));
        }
        if d.batch_samples == 0 {
            return Err(invalid("devices.batch_samples", "must be >= 1".into()));
        }
        d.glove.validate(&d.protocol).map_err(|e| invalid("devices", e.to_string()))?;
        self.gateway.validate().map_err(|e| invalid("gateway", e.to_string()))?;

        let m = &self.mesh;
        m.link.validate().map_err(|e| invalid("mesh.link", e.to_string()))?;
        m.trickle.validate().map_err(|e| invalid("mesh.trickle", e.to_string()))?;
        if !(m.dissemination_s > 0.0) {
            return Err(invalid("mesh.dissemination_s", "must be > 0".into()));
        }
        if m.max_attempts == 0 {
            return Err(invalid("mesh.max_attempts", "must be >= 1".into()));
        }
        if d.device_ids().contains(&m.gateway_node) {
            return Err(invalid("mesh.gateway_node", "collides with a device id".into()));
        }
        if let TopologySpec::File { path } = &m.topology {
            let topo = TopologyGraph::load(path).map_err(|e| ConfigError::Io { path: path.display().to_string(), msg: e.to_string() })?;
            for node in std::iter::once(m.gateway_node.clone()).chain(d.device_ids()) {
                if !topo.contains(&node) {
                    return Err(invalid("mesh.topology.path", format!("topology lacks node {node:?}")));
                }
            }
        }

        for (i, s) in self.bench.scenarios.iter().enumerate() {
            if s.n_jobs == 0 || !(s.service.mean() > 0.0) || !(s.interarrival.mean() > 0.0) || !(s.power.active_mw > 0.0) {
                return Err(invalid(&format!("bench.scenarios.{i}"), "times, power and n_jobs must be positive".into()));
            }
        }
        if self.bench.n_datasets.contains(&0) {
            return Err(invalid("bench.n_datasets", "entries must be >= 1".into()));
        }
        if let Some(trace) = &self.replay.trace {
            if !trace.is_file() {
                return Err(ConfigError::Io { path: trace.display().to_string(), msg: "trace not found".into() });
            }
        }
        for (key, svc) in [("sink", &self.sink), ("gateway_service", &self.gateway_service)] {
            if let Some(t) = svc.run_for_s {
                if !(t >= 0.0) {
                    return Err(invalid(&format!("{key}.run_for_s"), "must be >= 0".into()));
                }
            }
        }
        Ok(())
    }
}
