//! Simulated smart-glove devices.
//!
//! A session is synthesized from a [`TapProtocol`]: each round places tap
//! instants along a linearly ramped rate, renders them as raised-cosine bend
//! pulses, adds seeded Gaussian angle noise and converts the result to
//! divider voltages. Traces can also be replayed from CSV, and any sample
//! stream can be cut into sequenced [`SamplePacket`]s.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::{Channel, FlexSample, FlexSensorSpec};

/// Header of the sample CSV format.
pub const SAMPLE_CSV_HEADER: &str = "t_s,channel,voltage_v";

const MAX_PULSE_WIDTH_S: f64 = 0.3;
const PULSE_WIDTH_PERIODS: f64 = 0.4;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("schema: {0}")]
    Schema(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("packet decode: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub duration_s: f64,
    pub freq_start_hz: f64,
    pub freq_end_hz: f64,
    pub label: String,
}

impl Round {
    pub fn constant(label: &str, duration_s: f64, freq_hz: f64) -> Self {
        Round { duration_s, freq_start_hz: freq_hz, freq_end_hz: freq_hz, label: label.to_string() }
    }

    pub fn ramp(label: &str, duration_s: f64, from_hz: f64, to_hz: f64) -> Self {
        Round { duration_s, freq_start_hz: from_hz, freq_end_hz: to_hz, label: label.to_string() }
    }

    /// Tap instants relative to the round start.
    ///
    /// With rate `f(τ) = f0 + (f1 - f0) τ / d`, tap `k` sits where the
    /// accumulated phase `f0 τ + (f1 - f0) τ² / 2d` equals `k + 1/2`.
    pub fn tap_times(&self) -> Vec<f64> {
        let (f0, d) = (self.freq_start_hz, self.duration_s);
        let a = (self.freq_end_hz - f0) / (2.0 * d);
        let mut out = Vec::new();
        for k in 0u64.. {
            let phase = k as f64 + 0.5;
            let disc = f0 * f0 + 4.0 * a * phase;
            if disc < 0.0 {
                break;
            }
            let denom = f0 + disc.sqrt();
            if denom <= 0.0 {
                break;
            }
            let tau = 2.0 * phase / denom;
            if tau >= d {
                break;
            }
            out.push(tau);
        }
        out
    }

    pub fn rate_at(&self, tau: f64) -> f64 {
        self.freq_start_hz + (self.freq_end_hz - self.freq_start_hz) * tau / self.duration_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapProtocol {
    pub rounds: Vec<Round>,
}

impl Default for TapProtocol {
    /// Five 10 s rounds: slow, slow, faster, fastest, then a slow-to-fast ramp.
    fn default() -> Self {
        TapProtocol {
            rounds: vec![
                Round::constant("round1", 10.0, 1.0),
                Round::constant("round2", 10.0, 1.0),
                Round::constant("round3", 10.0, 2.0),
                Round::constant("round4", 10.0, 3.5),
                Round::ramp("round5", 10.0, 1.0, 3.5),
            ],
        }
    }
}

impl TapProtocol {
    pub fn validate(&self) -> Result<(), DeviceError> {
        if self.rounds.is_empty() {
            return Err(DeviceError::Config("protocol needs at least one round".into()));
        }
        for r in &self.rounds {
            if !(r.duration_s > 0.0) {
                return Err(DeviceError::Config(format!("round {:?} has non-positive duration", r.label)));
            }
            if !(r.freq_start_hz >= 0.0) || !(r.freq_end_hz >= 0.0) {
                return Err(DeviceError::Config(format!("round {:?} has a negative rate", r.label)));
            }
        }
        Ok(())
    }

    pub fn total_duration(&self) -> f64 {
        self.rounds.iter().map(|r| r.duration_s).sum()
    }

    pub fn max_freq(&self) -> f64 {
        self.rounds.iter().flat_map(|r| [r.freq_start_hz, r.freq_end_hz]).fold(0.0, f64::max)
    }

    /// The rounds repeated `cycles` times, labels suffixed with the cycle.
    pub fn cycled(&self, cycles: usize) -> TapProtocol {
        let rounds = (0..cycles)
            .flat_map(|c| self.rounds.iter().map(move |r| Round { label: format!("{}-c{c}", r.label), ..r.clone() }))
            .collect();
        TapProtocol { rounds }
    }

    /// `[start, end)` of each round on the session clock.
    pub fn boundaries(&self) -> Vec<(f64, f64)> {
        let mut start = 0.0;
        self.rounds
            .iter()
            .map(|r| {
                let b = (start, start + r.duration_s);
                start += r.duration_s;
                b
            })
            .collect()
    }

    /// Ground-truth tap instants on the session clock.
    pub fn tap_times(&self) -> Vec<f64> {
        self.rounds
            .iter()
            .zip(self.boundaries())
            .flat_map(|(r, (start, _))| r.tap_times().into_iter().map(move |tau| start + tau))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GloveConfig {
    pub sample_rate_hz: f64,
    pub amplitude_deg: f64,
    pub noise_std_deg: f64,
    pub spec: FlexSensorSpec,
    pub seed: u64,
}

impl Default for GloveConfig {
    fn default() -> Self {
        GloveConfig {
            sample_rate_hz: 50.0,
            amplitude_deg: 60.0,
            noise_std_deg: 1.0,
            spec: FlexSensorSpec::default(),
            seed: 0,
        }
    }
}

impl GloveConfig {
    pub fn validate(&self, protocol: &TapProtocol) -> Result<(), DeviceError> {
        protocol.validate()?;
        self.spec.validate().map_err(|e| DeviceError::Config(e.to_string()))?;
        if !(self.sample_rate_hz > 0.0) {
            return Err(DeviceError::Config("sample_rate_hz must be > 0".into()));
        }
        if !(self.amplitude_deg > 0.0) {
            return Err(DeviceError::Config("amplitude_deg must be > 0".into()));
        }
        if !(self.noise_std_deg >= 0.0) {
            return Err(DeviceError::Config("noise_std_deg must be >= 0".into()));
        }
        let max_f = protocol.max_freq();
        if !(self.sample_rate_hz > 2.0 * max_f) {
            return Err(DeviceError::Config(format!(
                "sample rate {} Hz violates Nyquist for {} Hz tapping",
                self.sample_rate_hz, max_f
            )));
        }
        Ok(())
    }
}

/// Noise-free bend angle at each sample instant.
fn render_angles(protocol: &TapProtocol, config: &GloveConfig, n: usize) -> Vec<f64> {
    let fs = config.sample_rate_hz;
    let mut angles = vec![0.0; n];
    for (round, (start, _)) in protocol.rounds.iter().zip(protocol.boundaries()) {
        for tau in round.tap_times() {
            let center = start + tau;
            let width = (PULSE_WIDTH_PERIODS / round.rate_at(tau)).min(MAX_PULSE_WIDTH_S);
            let half = width / 2.0;
            let first = ((center - half) * fs).ceil().max(0.0) as usize;
            let last = (((center + half) * fs).floor().max(0.0) as usize).min(n.saturating_sub(1));
            for (i, angle) in angles.iter_mut().enumerate().take(last + 1).skip(first) {
                let dt = i as f64 / fs - center;
                if dt.abs() < half {
                    let pulse = 0.5 * (1.0 + (std::f64::consts::PI * dt / half).cos());
                    *angle = (*angle + config.amplitude_deg * pulse).min(config.amplitude_deg);
                }
            }
        }
    }
    angles
}

/// Synthesizes a two-channel tapping session.
///
/// Samples are emitted at `i / sample_rate_hz`, index channel first then
/// thumb for each instant. Both fingers follow the same tap train with
/// independent noise.
pub fn synth_session(protocol: &TapProtocol, config: &GloveConfig) -> Result<Vec<FlexSample>, DeviceError> {
    config.validate(protocol)?;
    let fs = config.sample_rate_hz;
    let n = (protocol.total_duration() * fs).round() as usize;
    let clean = render_angles(protocol, config, n);
    let noise = Normal::new(0.0, config.noise_std_deg).map_err(|e| DeviceError::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let spec = &config.spec;

    let mut out = Vec::with_capacity(2 * n);
    for (i, &angle) in clean.iter().enumerate() {
        let t = i as f64 / fs;
        for channel in Channel::ALL {
            let noisy = if config.noise_std_deg > 0.0 { angle + noise.sample(&mut rng) } else { angle };
            let voltage = spec.angle_to_voltage(noisy.clamp(0.0, spec.angle_max));
            out.push(FlexSample { t, channel, voltage });
        }
    }
    Ok(out)
}

/// Reads a sample CSV trace.
pub fn replay_csv(path: &Path) -> Result<Vec<FlexSample>, DeviceError> {
    read_samples_csv(std::fs::File::open(path)?)
}

pub fn read_samples_csv<R: Read>(reader: R) -> Result<Vec<FlexSample>, DeviceError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| DeviceError::Schema(e.to_string()))?.clone();
    let expected: Vec<&str> = SAMPLE_CSV_HEADER.split(',').collect();
    for col in &expected {
        if !headers.iter().any(|h| h == *col) {
            return Err(DeviceError::Schema(format!("missing column {col:?}")));
        }
    }
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(DeviceError::Schema(format!("header must be exactly {SAMPLE_CSV_HEADER:?}")));
    }

    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            DeviceError::Parse { line, msg: e.to_string() }
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let parse_err = |msg: String| DeviceError::Parse { line, msg };
        if record.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", record.len())));
        }
        let t: f64 = record[0].parse().map_err(|_| parse_err(format!("bad t_s {:?}", &record[0])))?;
        let channel = Channel::parse(&record[1]).ok_or_else(|| parse_err(format!("bad channel {:?}", &record[1])))?;
        let voltage: f64 = record[2].parse().map_err(|_| parse_err(format!("bad voltage_v {:?}", &record[2])))?;
        if !(t >= 0.0) || !t.is_finite() {
            return Err(parse_err(format!("t_s must be a non-negative number, got {t}")));
        }
        if !voltage.is_finite() {
            return Err(parse_err("voltage_v must be finite".into()));
        }
        out.push(FlexSample { t, channel, voltage });
    }
    Ok(out)
}

pub fn write_samples_csv<W: Write>(mut w: W, samples: &[FlexSample]) -> std::io::Result<()> {
    writeln!(w, "{SAMPLE_CSV_HEADER}")?;
    for s in samples {
        writeln!(w, "{},{},{}", s.t, s.channel, s.voltage)?;
    }
    w.flush()
}

/// A batch of samples as sent by one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePacket {
    pub device_id: String,
    pub seq: u64,
    pub samples: Vec<FlexSample>,
    pub sent_at_s: f64,
}

const SAMPLE_WIRE_BYTES: usize = 17;

impl SamplePacket {
    /// Binary encoding used on the device link.
    ///
    /// Layout, big-endian: `u16` id length, id bytes, `u64` seq, `f64`
    /// sent_at, `u32` sample count, then per sample `f64` t, `u8` channel
    /// (0 index, 1 thumb), `f64` voltage.
    pub fn encode(&self) -> Vec<u8> {
        let id = self.device_id.as_bytes();
        let mut buf = Vec::with_capacity(self.encoded_len());
        buf.extend_from_slice(&(id.len() as u16).to_be_bytes());
        buf.extend_from_slice(id);
        buf.extend_from_slice(&self.seq.to_be_bytes());
        buf.extend_from_slice(&self.sent_at_s.to_be_bytes());
        buf.extend_from_slice(&(self.samples.len() as u32).to_be_bytes());
        for s in &self.samples {
            buf.extend_from_slice(&s.t.to_be_bytes());
            buf.push(s.channel.code());
            buf.extend_from_slice(&s.voltage.to_be_bytes());
        }
        buf
    }

    pub fn encoded_len(&self) -> usize {
        2 + self.device_id.len() + 8 + 8 + 4 + SAMPLE_WIRE_BYTES * self.samples.len()
    }

    pub fn decode(bytes: &[u8]) -> Result<SamplePacket, DeviceError> {
        let mut cur = Cursor { buf: bytes, pos: 0 };
        let id_len = u16::from_be_bytes(cur.take()?) as usize;
        let id = cur.slice(id_len)?;
        let device_id = String::from_utf8(id.to_vec()).map_err(|e| DeviceError::Decode(e.to_string()))?;
        let seq = u64::from_be_bytes(cur.take()?);
        let sent_at_s = f64::from_be_bytes(cur.take()?);
        let count = u32::from_be_bytes(cur.take()?) as usize;
        if bytes.len() - cur.pos != count * SAMPLE_WIRE_BYTES {
            return Err(DeviceError::Decode(format!("expected {count} samples")));
        }
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let t = f64::from_be_bytes(cur.take()?);
            let [code] = cur.take()?;
            let channel = Channel::from_code(code).ok_or_else(|| DeviceError::Decode(format!("bad channel code {code}")))?;
            let voltage = f64::from_be_bytes(cur.take()?);
            samples.push(FlexSample { t, channel, voltage });
        }
        Ok(SamplePacket { device_id, seq, samples, sent_at_s })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn slice(&mut self, n: usize) -> Result<&'a [u8], DeviceError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| DeviceError::Decode("truncated packet".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N], DeviceError> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.slice(N)?);
        Ok(out)
    }
}

/// Cuts a stream into packets of `batch_n` samples, seq numbered from 0.
/// `sent_at_s` is the timestamp of the last sample in the batch.
pub fn packetize(stream: &[FlexSample], device_id: &str, batch_n: usize) -> Result<Vec<SamplePacket>, DeviceError> {
    if batch_n == 0 {
        return Err(DeviceError::Config("batch_n must be >= 1".into()));
    }
    Ok(stream
        .chunks(batch_n)
        .enumerate()
        .map(|(i, chunk)| SamplePacket {
            device_id: device_id.to_string(),
            seq: i as u64,
            samples: chunk.to_vec(),
            sent_at_s: chunk[chunk.len() - 1].t,
        })
        .collect())
}

/// Fresh RNG for a device derived from a base seed and the device ordinal.
pub fn device_rng(seed: u64, ordinal: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ordinal);
    rng
}

/// Per-device seed derived from a base seed.
pub fn device_seed(seed: u64, ordinal: u64) -> u64 {
    device_rng(seed, ordinal).random()
}
