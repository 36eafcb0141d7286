//! The fog node.
//!
//! Packets from devices are sequenced per device and appended to that
//! device's open session. Closing a session runs the signal chain
//! (condition, detect, rate profile), slices the result into protocol
//! rounds, stores the record in a bounded FIFO store and produces a
//! [`SessionSummary`]. The forward policy then decides which frames leave
//! for the cloud.
//!
//! Locking: one mutex per device serializes that device's packets and its
//! session close; devices proceed in parallel. The store has its own mutex.

use std::collections::{BTreeMap, HashMap};
use std::sync::mpsc::Receiver;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{encode_frame, AlertPayload, CloudFrame, EventKind, RawPayload};
use crate::device::{SamplePacket, TapProtocol};
use crate::signal::{
    condition_series, detect_taps, resistance_to_angle, tap_frequency_profile, voltage_to_resistance, AnglePoint,
    AngleSeries, Channel, ConditionParams, FlexSample, FlexSensorSpec, FrequencyPoint, FrequencyProfile, SignalError,
    TapEvent,
};

/// Conditioned samples per raw frame in passthrough mode.
pub const RAW_FRAME_SAMPLES: usize = 4096;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("device {device_id}: seq {got} is beyond the reorder window (expected {expected}, window {window})")]
    Gap { device_id: String, expected: u64, got: u64, window: u64 },
    #[error("session {0} has no samples")]
    EmptySession(String),
    #[error("session {0} not found")]
    NotFound(String),
    #[error("session {0} already stored")]
    Duplicate(String),
    #[error("session {0} is still open")]
    NotClosed(String),
    #[error("invalid gateway configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignalParams {
    pub threshold_deg: f64,
    pub min_gap_s: f64,
    pub window_s: f64,
    pub hop_s: f64,
    pub smooth_window_n: usize,
    pub clip_max_deg: f64,
    /// Finger whose taps drive the analytics.
    pub analysis_channel: Channel,
}

impl Default for SignalParams {
    fn default() -> Self {
        SignalParams {
            threshold_deg: 15.0,
            min_gap_s: 0.1,
            window_s: 2.0,
            hop_s: 1.0,
            smooth_window_n: 5,
            clip_max_deg: 90.0,
            analysis_channel: Channel::Index,
        }
    }
}

impl SignalParams {
    pub fn condition(&self) -> ConditionParams {
        ConditionParams { clip_max_deg: self.clip_max_deg, smooth_window_n: self.smooth_window_n }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    SummaryOnly,
    SummaryPlusAlerts,
    RawPassthrough,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForwardPolicy {
    pub mode: ForwardMode,
    pub alert_freq_floor_hz: f64,
}

impl Default for ForwardPolicy {
    fn default() -> Self {
        ForwardPolicy { mode: ForwardMode::SummaryOnly, alert_freq_floor_hz: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub capacity: usize,
    pub policy: ForwardPolicy,
    pub reorder_window: u64,
    pub signal: SignalParams,
    pub sensor: FlexSensorSpec,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            capacity: 16,
            policy: ForwardPolicy::default(),
            reorder_window: 8,
            signal: SignalParams::default(),
            sensor: FlexSensorSpec::default(),
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::Config(m.to_string()));
        if self.capacity == 0 {
            return bad("capacity must be >= 1");
        }
        if self.reorder_window == 0 {
            return bad("reorder_window must be >= 1");
        }
        if !(self.policy.alert_freq_floor_hz >= 0.0) {
            return bad("alert_freq_floor_hz must be >= 0");
        }
        let s = &self.signal;
        if !(s.threshold_deg > 0.0) || !(s.min_gap_s >= 0.0) || !(s.window_s > 0.0) || !(s.hop_s > 0.0) {
            return bad("signal thresholds and windows must be positive");
        }
        if s.smooth_window_n.is_multiple_of(2) {
            return bad("smooth_window_n must be odd");
        }
        self.sensor.validate().map_err(|e| GatewayError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Open,
    Closed,
}

/// One device session held by the gateway.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionRecord {
    session_id: String,
    device_id: String,
    started_at_s: f64,
    raw_bytes_received: u64,
    samples: Vec<FlexSample>,
    series: BTreeMap<Channel, AngleSeries>,
    taps: Vec<TapEvent>,
    profile: Option<FrequencyProfile>,
    status: SessionStatus,
    flagged: bool,
    dropped_samples: u64,
}

impl SessionRecord {
    fn open(session_id: String, device_id: String, started_at_s: f64) -> Self {
        SessionRecord {
            session_id,
            device_id,
            started_at_s,
            raw_bytes_received: 0,
            samples: Vec::new(),
            series: BTreeMap::new(),
            taps: Vec::new(),
            profile: None,
            status: SessionStatus::Open,
            flagged: false,
            dropped_samples: 0,
        }
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    pub fn started_at_s(&self) -> f64 {
        self.started_at_s
    }

    pub fn raw_bytes_received(&self) -> u64 {
        self.raw_bytes_received
    }

    /// Raw samples in arrival order.
    pub fn samples(&self) -> &[FlexSample] {
        &self.samples
    }

    /// Conditioned per-channel series, filled when the session closes.
    pub fn series(&self) -> &BTreeMap<Channel, AngleSeries> {
        &self.series
    }

    pub fn taps(&self) -> &[TapEvent] {
        &self.taps
    }

    pub fn profile(&self) -> Option<&FrequencyProfile> {
        self.profile.as_ref()
    }

    pub fn status(&self) -> SessionStatus {
        self.status
    }

    /// Set when a sequence gap was reported while the session was open.
    pub fn flagged(&self) -> bool {
        self.flagged
    }

    /// Samples discarded during conditioning (bad voltage or time order).
    pub fn dropped_samples(&self) -> u64 {
        self.dropped_samples
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub label: String,
    pub mean_freq_hz: f64,
    pub max_freq_hz: f64,
    pub tap_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub device_id: String,
    pub rounds: Vec<RoundSummary>,
    pub total_taps: u64,
    pub duration_s: f64,
    /// Size of this summary's own summary frame on the wire.
    pub summary_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub accepted: bool,
    pub next_seq: u64,
}

/// Session store holding at most `capacity` closed sessions; the session
/// with the earliest start (then earliest insertion) is evicted first.
#[derive(Debug, Clone)]
pub struct BoundedStore {
    capacity: usize,
    entries: Vec<SessionRecord>,
}

impl BoundedStore {
    pub fn new(capacity: usize) -> Result<Self, GatewayError> {
        if capacity == 0 {
            return Err(GatewayError::Config("store capacity must be >= 1".into()));
        }
        Ok(BoundedStore { capacity, entries: Vec::new() })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, session_id: &str) -> Option<&SessionRecord> {
        self.entries.iter().find(|r| r.session_id == session_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|r| r.session_id.as_str())
    }

    /// Inserts a closed record, returning the id evicted to make room.
    pub fn store_and_evict(&mut self, record: SessionRecord) -> Result<Option<String>, GatewayError> {
        if record.status != SessionStatus::Closed {
            return Err(GatewayError::NotClosed(record.session_id));
        }
        if self.get(&record.session_id).is_some() {
            return Err(GatewayError::Duplicate(record.session_id));
        }
        self.entries.push(record);
        if self.entries.len() <= self.capacity {
            return Ok(None);
        }
        let oldest = self
            .entries
            .iter()
            .enumerate()
            .min_by(|(i, a), (j, b)| a.started_at_s.total_cmp(&b.started_at_s).then(i.cmp(j)))
            .map(|(i, _)| i)
            .expect("store is non-empty");
        Ok(Some(self.entries.remove(oldest).session_id))
    }
}

/// Splits raw samples by channel, converts to angles and conditions them.
///
/// Samples with an impossible divider voltage, or whose timestamp does not
/// advance on their channel, are dropped and counted.
pub fn condition_samples(
    samples: &[FlexSample],
    sensor: &FlexSensorSpec,
    params: &SignalParams,
) -> Result<(BTreeMap<Channel, AngleSeries>, u64), GatewayError> {
    let mut raw: BTreeMap<Channel, Vec<AnglePoint>> = Channel::ALL.iter().map(|&c| (c, Vec::new())).collect();
    let mut dropped = 0u64;
    for s in samples {
        let points = raw.get_mut(&s.channel).expect("all channels present");
        let Ok(r) = voltage_to_resistance(s, sensor) else {
            dropped += 1;
            continue;
        };
        if points.last().is_some_and(|p| !(s.t > p.t)) {
            dropped += 1;
            continue;
        }
        points.push(AnglePoint { t: s.t, angle: resistance_to_angle(r, sensor) });
    }
    let mut out = BTreeMap::new();
    for (channel, points) in raw {
        let series = AngleSeries::new(channel, points)?;
        out.insert(channel, condition_series(&series, &params.condition())?);
    }
    Ok((out, dropped))
}

/// Profile points whose whole window lies inside `[start, end)`.
pub fn profile_within(profile: &FrequencyProfile, start: f64, end: f64) -> Vec<FrequencyPoint> {
    let half = profile.window_s / 2.0;
    let eps = 1e-9 * end.abs().max(1.0);
    profile
        .points
        .iter()
        .filter(|p| p.t_center - half >= start - eps && p.t_center + half <= end + eps)
        .copied()
        .collect()
}

/// Result of running the analytics on one conditioned series.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionAnalysis {
    pub summary: SessionSummary,
    pub taps: Vec<TapEvent>,
    pub profile: FrequencyProfile,
}

/// Detects taps, builds the rate profile over the protocol's length and
/// slices both into rounds.
///
/// A round's mean and max rate come from the profile windows lying wholly
/// inside it; a round shorter than one window falls back to taps divided
/// by round length. Taps past the protocol end count toward the last round.
pub fn analyze_series(
    session_id: &str,
    device_id: &str,
    series: &AngleSeries,
    protocol: &TapProtocol,
    params: &SignalParams,
) -> Result<SessionAnalysis, GatewayError> {
    let taps = detect_taps(series, params.threshold_deg, params.min_gap_s)?;
    let duration_s = protocol.total_duration();
    let profile = tap_frequency_profile(&taps, duration_s, params.window_s, params.hop_s)?;
    let bounds = protocol.boundaries();
    let rounds = protocol
        .rounds
        .iter()
        .zip(&bounds)
        .enumerate()
        .map(|(i, (round, &(start, end)))| {
            let upper = if i + 1 == bounds.len() { f64::INFINITY } else { end };
            let tap_count = taps.iter().filter(|e| e.t_peak >= start && e.t_peak < upper).count() as u64;
            let inside = profile_within(&profile, start, end);
            let (mean, max) = if inside.is_empty() {
                let rate = tap_count as f64 / round.duration_s;
                (rate, rate)
            } else {
                let mean = inside.iter().map(|p| p.freq).sum::<f64>() / inside.len() as f64;
                (mean, inside.iter().map(|p| p.freq).fold(0.0, f64::max))
            };
            RoundSummary { label: round.label.clone(), mean_freq_hz: mean, max_freq_hz: max, tap_count }
        })
        .collect();
    let mut summary = SessionSummary {
        session_id: session_id.to_string(),
        device_id: device_id.to_string(),
        rounds,
        total_taps: taps.len() as u64,
        duration_s,
        summary_bytes: 0,
    };
    summary.summary_bytes = self_sized(&summary);
    Ok(SessionAnalysis { summary, taps, profile })
}

/// Encoded size of the summary frame once `summary_bytes` holds that size.
fn self_sized(summary: &SessionSummary) -> u64 {
    let mut probe = summary.clone();
    loop {
        let len = encode_frame(&CloudFrame::summary(&probe, 0)).map(|b| b.len() as u64).unwrap_or(0);
        if len == probe.summary_bytes {
            return len;
        }
        probe.summary_bytes = len;
    }
}

/// Frames to send upstream for one closed session, numbered from 0.
///
/// `raw_series` is only read in passthrough mode.
pub fn apply_forward_policy(summary: &SessionSummary, policy: &ForwardPolicy, raw_series: &[AngleSeries]) -> Vec<CloudFrame> {
    let mut frames = vec![CloudFrame::summary(summary, 0)];
    match policy.mode {
        ForwardMode::SummaryOnly => {}
        ForwardMode::SummaryPlusAlerts => {
            for r in summary.rounds.iter().filter(|r| r.mean_freq_hz < policy.alert_freq_floor_hz) {
                let alert = AlertPayload {
                    session: summary.session_id.clone(),
                    round_label: r.label.clone(),
                    mean_freq_hz: r.mean_freq_hz,
                    floor_hz: policy.alert_freq_floor_hz,
                };
                let payload = serde_json::to_value(alert).expect("alert serializes");
                frames.push(CloudFrame::new(EventKind::Alert, summary.session_id.clone(), 0, payload));
            }
        }
        ForwardMode::RawPassthrough => {
            for series in raw_series {
                for chunk in series.samples().chunks(RAW_FRAME_SAMPLES) {
                    let raw = RawPayload { channel: series.channel, samples: chunk.iter().map(|p| [p.t, p.angle]).collect() };
                    let payload = serde_json::to_value(raw).expect("raw serializes");
                    frames.push(CloudFrame::new(EventKind::Raw, summary.session_id.clone(), 0, payload));
                }
            }
        }
    }
    for (i, f) in frames.iter_mut().enumerate() {
        f.seq = i as u64;
    }
    frames
}

#[derive(Debug, Default)]
struct DeviceState {
    next_seq: u64,
    pending: BTreeMap<u64, SamplePacket>,
    open: Option<SessionRecord>,
    sessions_opened: u64,
}

/// Input on the gateway's in-process channel.
#[derive(Debug, Clone, PartialEq)]
pub enum GatewayInput {
    Packet(SamplePacket),
    /// The device finished its session.
    EndOfStream { device_id: String },
}

#[derive(Debug, Default)]
pub struct DrainReport {
    pub summaries: Vec<SessionSummary>,
    pub packets: u64,
    pub errors: Vec<GatewayError>,
}

pub struct FogGateway {
    config: GatewayConfig,
    devices: Mutex<HashMap<String, Arc<Mutex<DeviceState>>>>,
    open_sessions: Mutex<HashMap<String, String>>,
    store: Mutex<BoundedStore>,
}

impl FogGateway {
    pub fn new(config: GatewayConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let store = BoundedStore::new(config.capacity)?;
        Ok(FogGateway {
            config,
            devices: Mutex::new(HashMap::new()),
            open_sessions: Mutex::new(HashMap::new()),
            store: Mutex::new(store),
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    fn device(&self, device_id: &str) -> Arc<Mutex<DeviceState>> {
        self.devices.lock().unwrap().entry(device_id.to_string()).or_default().clone()
    }

    /// Accepts one packet.
    ///
    /// In-order packets are appended (opening a session if needed), packets
    /// ahead by less than the reorder window are buffered, and anything
    /// already seen is acknowledged again without being re-appended.
    pub fn ingest_packet(&self, packet: SamplePacket) -> Result<Ack, GatewayError> {
        let dev = self.device(&packet.device_id);
        let mut d = dev.lock().unwrap();
        let seq = packet.seq;
        if seq < d.next_seq || d.pending.contains_key(&seq) {
            return Ok(Ack { accepted: true, next_seq: d.next_seq });
        }
        if seq - d.next_seq >= self.config.reorder_window {
            if let Some(open) = d.open.as_mut() {
                open.flagged = true;
            }
            return Err(GatewayError::Gap {
                device_id: packet.device_id,
                expected: d.next_seq,
                got: seq,
                window: self.config.reorder_window,
            });
        }
        if seq > d.next_seq {
            d.pending.insert(seq, packet);
            return Ok(Ack { accepted: true, next_seq: d.next_seq });
        }
        self.append(&mut d, packet);
        loop {
            let next = d.next_seq;
            let Some(p) = d.pending.remove(&next) else { break };
            self.append(&mut d, p);
        }
        Ok(Ack { accepted: true, next_seq: d.next_seq })
    }

    fn append(&self, d: &mut DeviceState, packet: SamplePacket) {
        d.next_seq = packet.seq + 1;
        if d.open.is_none() {
            let id = format!("{}-{:04}", packet.device_id, d.sessions_opened);
            d.sessions_opened += 1;
            let started = packet.samples.first().map_or(packet.sent_at_s, |s| s.t);
            self.open_sessions.lock().unwrap().insert(id.clone(), packet.device_id.clone());
            d.open = Some(SessionRecord::open(id, packet.device_id.clone(), started));
        }
        let rec = d.open.as_mut().expect("opened above");
        rec.raw_bytes_received += packet.encoded_len() as u64;
        rec.samples.extend_from_slice(&packet.samples);
    }

    /// Id of the device's open session, if any.
    pub fn open_session_id(&self, device_id: &str) -> Option<String> {
        let dev = self.devices.lock().unwrap().get(device_id).cloned()?;
        let d = dev.lock().unwrap();
        d.open.as_ref().map(|r| r.session_id.clone())
    }

    /// Runs the analytics on an open session, stores it and returns its
    /// summary. The device's sequence space restarts at 0 afterwards.
    pub fn close_session(&self, session_id: &str, protocol: &TapProtocol) -> Result<SessionSummary, GatewayError> {
        let device_id = self
            .open_sessions
            .lock()
            .unwrap()
            .get(session_id)
            .cloned()
            .ok_or_else(|| GatewayError::NotFound(session_id.to_string()))?;
        let dev = self.device(&device_id);
        let mut d = dev.lock().unwrap();
        let open = d.open.as_ref().filter(|r| r.session_id == session_id);
        let Some(open) = open else {
            return Err(GatewayError::NotFound(session_id.to_string()));
        };
        if open.samples.is_empty() {
            return Err(GatewayError::EmptySession(session_id.to_string()));
        }

        let signal = &self.config.signal;
        let (series, dropped) = condition_samples(&open.samples, &self.config.sensor, signal)?;
        let analysis = analyze_series(session_id, &device_id, &series[&signal.analysis_channel], protocol, signal)?;

        let mut record = d.open.take().expect("checked above");
        record.series = series;
        record.taps = analysis.taps;
        record.profile = Some(analysis.profile);
        record.dropped_samples = dropped;
        record.status = SessionStatus::Closed;
        d.next_seq = 0;
        d.pending.clear();
        drop(d);

        self.open_sessions.lock().unwrap().remove(session_id);
        self.store.lock().unwrap().store_and_evict(record)?;
        Ok(analysis.summary)
    }

    /// Closes whatever session `device_id` has open.
    pub fn close_device(&self, device_id: &str, protocol: &TapProtocol) -> Result<SessionSummary, GatewayError> {
        let id = self.open_session_id(device_id).ok_or_else(|| GatewayError::NotFound(format!("open session of {device_id}")))?;
        self.close_session(&id, protocol)
    }

    /// Copy of a stored (closed) session.
    pub fn record(&self, session_id: &str) -> Option<SessionRecord> {
        self.store.lock().unwrap().get(session_id).cloned()
    }

    pub fn stored_ids(&self) -> Vec<String> {
        self.store.lock().unwrap().ids().map(str::to_string).collect()
    }

    /// Frames for a stored session under the configured policy.
    pub fn forward_frames(&self, summary: &SessionSummary) -> Result<Vec<CloudFrame>, GatewayError> {
        let store = self.store.lock().unwrap();
        let record = store.get(&summary.session_id).ok_or_else(|| GatewayError::NotFound(summary.session_id.clone()))?;
        let series: Vec<AngleSeries> = record.series.values().cloned().collect();
        Ok(apply_forward_policy(summary, &self.config.policy, &series))
    }

    /// Consumes channel input until every sender hangs up.
    pub fn drain(&self, rx: &Receiver<GatewayInput>, protocol: &TapProtocol) -> DrainReport {
        let mut report = DrainReport::default();
        for input in rx.iter() {
            match input {
                GatewayInput::Packet(p) => {
                    report.packets += 1;
                    if let Err(e) = self.ingest_packet(p) {
                        report.errors.push(e);
                    }
                }
                GatewayInput::EndOfStream { device_id } => match self.close_device(&device_id, protocol) {
                    Ok(s) => report.summaries.push(s),
                    Err(e) => report.errors.push(e),
                },
            }
        }
        report
    }
}

pub fn alert_count(frames: &[CloudFrame]) -> usize {
    frames.iter().filter(|f| f.event == EventKind::Alert).count()
}
