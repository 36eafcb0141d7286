//! Cloud tier: the framed event protocol, the listening sink, append-only
//! JSON-lines storage and cross-session trend analytics.
//!
//! Wire format: a 4-byte big-endian length `N` followed by `N` bytes of
//! canonical UTF-8 JSON `{"event":…,"session":…,"seq":…,"payload":…}` with
//! keys in exactly that order, no insignificant whitespace, and payload
//! object keys sorted.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::gateway::SessionSummary;
use crate::signal::Channel;

/// Largest accepted frame body.
pub const MAX_FRAME_BYTES: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("frame of {len} bytes exceeds the 16 MiB limit")]
    FrameTooLarge { len: usize },
    #[error("truncated frame: need {needed} bytes, have {got}")]
    Truncated { needed: usize, got: usize },
    #[error("schema: {0}")]
    Schema(String),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("persist failed: {0}")]
    Persist(String),
    #[error("sink startup failed: {0}")]
    Startup(String),
    #[error("frame rejected by sink: {0}")]
    Rejected(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("need at least 2 sessions, found {sessions}")]
    InsufficientData { sessions: usize },
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Summary,
    Alert,
    Raw,
    Hello,
    Ack,
}

impl EventKind {
    pub const ALL: [EventKind; 5] = [EventKind::Summary, EventKind::Alert, EventKind::Raw, EventKind::Hello, EventKind::Ack];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudFrame {
    pub event: EventKind,
    pub session: String,
    pub seq: u64,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertPayload {
    pub session: String,
    pub round_label: String,
    pub mean_freq_hz: f64,
    pub floor_hz: f64,
}

/// Conditioned angle samples as `[t, angle]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPayload {
    pub channel: Channel,
    pub samples: Vec<[f64; 2]>,
}

impl CloudFrame {
    pub fn new(event: EventKind, session: impl Into<String>, seq: u64, payload: Value) -> Self {
        CloudFrame { event, session: session.into(), seq, payload }
    }

    pub fn ack(session: impl Into<String>, seq: u64) -> Self {
        Self::new(EventKind::Ack, session, seq, json!({}))
    }

    pub fn error_ack(session: impl Into<String>, seq: u64, msg: &str) -> Self {
        Self::new(EventKind::Ack, session, seq, json!({ "error": msg }))
    }

    pub fn hello(node: &str) -> Self {
        Self::new(EventKind::Hello, "", 0, json!({ "node": node }))
    }

    pub fn summary(summary: &SessionSummary, seq: u64) -> Self {
        let payload = serde_json::to_value(summary).expect("summary serializes");
        Self::new(EventKind::Summary, summary.session_id.clone(), seq, payload)
    }

    /// Error text carried by an error ack.
    pub fn ack_error(&self) -> Option<&str> {
        (self.event == EventKind::Ack).then(|| self.payload.get("error").and_then(Value::as_str)).flatten()
    }

    pub fn summary_payload(&self) -> Result<SessionSummary, CloudError> {
        self.typed_payload(EventKind::Summary)
    }

    pub fn alert_payload(&self) -> Result<AlertPayload, CloudError> {
        self.typed_payload(EventKind::Alert)
    }

    pub fn raw_payload(&self) -> Result<RawPayload, CloudError> {
        self.typed_payload(EventKind::Raw)
    }

    fn typed_payload<T: for<'de> Deserialize<'de>>(&self, want: EventKind) -> Result<T, CloudError> {
        if self.event != want {
            return Err(CloudError::Schema(format!("expected {want:?} frame, got {:?}", self.event)));
        }
        serde_json::from_value(self.payload.clone()).map_err(|e| CloudError::Schema(e.to_string()))
    }

    /// Canonical JSON body, without the length prefix.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("frame serializes")
    }
}

fn parse_body(body: &[u8]) -> Result<CloudFrame, CloudError> {
    serde_json::from_slice(body).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => CloudError::Schema(e.to_string()),
        _ => CloudError::Malformed(e.to_string()),
    })
}

pub fn encode_frame(frame: &CloudFrame) -> Result<Vec<u8>, CloudError> {
    let body = frame.to_canonical_json();
    if body.len() > MAX_FRAME_BYTES {
        return Err(CloudError::FrameTooLarge { len: body.len() });
    }
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body.as_bytes());
    Ok(out)
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode_frame(bytes: &[u8]) -> Result<CloudFrame, CloudError> {
    if bytes.len() < 4 {
        return Err(CloudError::Truncated { needed: 4, got: bytes.len() });
    }
    let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(CloudError::FrameTooLarge { len });
    }
    let body = &bytes[4..];
    if body.len() < len {
        return Err(CloudError::Truncated { needed: 4 + len, got: bytes.len() });
    }
    if body.len() > len {
        return Err(CloudError::TrailingBytes(body.len() - len));
    }
    parse_body(body)
}

/// Reads the next frame from a stream. `Ok(None)` on a clean end of stream
/// between frames.
pub fn read_frame<R: Read>(reader: &mut R) -> Result<Option<CloudFrame>, CloudError> {
    let mut prefix = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match reader.read(&mut prefix[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(CloudError::Truncated { needed: 4, got }),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(prefix) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(CloudError::FrameTooLarge { len });
    }
    let mut body = Vec::with_capacity(len);
    reader.take(len as u64).read_to_end(&mut body)?;
    if body.len() < len {
        return Err(CloudError::Truncated { needed: 4 + len, got: 4 + body.len() });
    }
    parse_body(&body).map(Some)
}

pub fn write_frame<W: Write>(writer: &mut W, frame: &CloudFrame) -> Result<(), CloudError> {
    writer.write_all(&encode_frame(frame)?)?;
    writer.flush()?;
    Ok(())
}

/// Append-only JSON-lines store, one canonical frame per line.
#[derive(Debug)]
pub struct LongTermLog {
    path: PathBuf,
    file: File,
    count: u64,
}

impl LongTermLog {
    /// Opens or creates the log. A torn final line left by a crash is cut off.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CloudError> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        let mut content = Vec::new();
        file.read_to_end(&mut content)?;
        let complete = content.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        if complete < content.len() {
            file.set_len(complete as u64)?;
            file.seek(SeekFrom::End(0))?;
        }
        let count = content[..complete].iter().filter(|&&b| b == b'\n').count() as u64;
        Ok(LongTermLog { path, file, count })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> u64 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Appends one record and syncs it to disk. Returns the record index.
    pub fn persist(&mut self, frame: &CloudFrame) -> Result<u64, CloudError> {
        let mut line = frame.to_canonical_json();
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.sync_data())
            .map_err(|e| CloudError::Persist(e.to_string()))?;
        self.count += 1;
        Ok(self.count - 1)
    }

    pub fn read_all(path: impl AsRef<Path>) -> Result<Vec<CloudFrame>, CloudError> {
        let reader = BufReader::new(File::open(path)?);
        let mut out = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            out.push(parse_body(line.as_bytes())?);
        }
        Ok(out)
    }
}

/// A running sink. Dropping it without [`SinkServer::shutdown`] leaves the
/// listener thread running until process exit.
pub struct SinkServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    log: Arc<Mutex<LongTermLog>>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    acceptor: Option<JoinHandle<Vec<JoinHandle<()>>>>,
}

/// Binds `endpoint` and starts accepting connections. Every decoded frame is
/// persisted before its ack is sent; persistence is serialized through one
/// writer. Per connection, `seq` must strictly increase.
pub fn serve(endpoint: &str, log: LongTermLog) -> Result<SinkServer, CloudError> {
    let listener = TcpListener::bind(endpoint).map_err(|e| CloudError::Startup(format!("{endpoint}: {e}")))?;
    let addr = listener.local_addr().map_err(|e| CloudError::Startup(e.to_string()))?;
    let stop = Arc::new(AtomicBool::new(false));
    let log = Arc::new(Mutex::new(log));
    let conns = Arc::new(Mutex::new(Vec::new()));

    let acceptor = {
        let (stop, log, conns) = (stop.clone(), log.clone(), conns.clone());
        thread::spawn(move || {
            let mut workers = Vec::new();
            for stream in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let Ok(clone) = stream.try_clone() else { continue };
                if let Ok(c) = stream.try_clone() {
                    conns.lock().unwrap().push(c);
                }
                let log = log.clone();
                workers.push(thread::spawn(move || {
                    let _ = handle_connection(stream, &log);
                    // the registry keeps a handle, so close explicitly
                    let _ = clone.shutdown(Shutdown::Both);
                }));
            }
            workers
        })
    };
    Ok(SinkServer { addr, stop, log, conns, acceptor: Some(acceptor) })
}

fn handle_connection(stream: TcpStream, log: &Mutex<LongTermLog>) -> Result<(), CloudError> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut last_seq: Option<u64> = None;
    loop {
        let frame = match read_frame(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(()),
            Err(CloudError::Io(e)) => return Err(e.into()),
            Err(e) => {
                let seq = last_seq.map_or(0, |s| s + 1);
                write_frame(&mut writer, &CloudFrame::error_ack("", seq, &e.to_string()))?;
                return Err(e);
            }
        };
        if let Some(prev) = last_seq {
            if frame.seq <= prev {
                let msg = format!("seq {} not after {prev}", frame.seq);
                write_frame(&mut writer, &CloudFrame::error_ack(frame.session.clone(), frame.seq, &msg))?;
                return Err(CloudError::Protocol(msg));
            }
        }
        let persisted = log.lock().unwrap().persist(&frame);
        if let Err(e) = persisted {
            write_frame(&mut writer, &CloudFrame::error_ack(frame.session.clone(), frame.seq, &e.to_string()))?;
            return Err(e);
        }
        write_frame(&mut writer, &CloudFrame::ack(frame.session.clone(), frame.seq))?;
        last_seq = Some(frame.seq);
    }
}

impl SinkServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn record_count(&self) -> u64 {
        self.log.lock().unwrap().len()
    }

    /// Stops accepting, closes open connections, waits for workers and hands
    /// the log back.
    pub fn shutdown(mut self) -> LongTermLog {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        let workers = self.acceptor.take().map(|h| h.join().unwrap_or_default()).unwrap_or_default();
        for c in self.conns.lock().unwrap().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        for w in workers {
            let _ = w.join();
        }
        match Arc::try_unwrap(self.log) {
            Ok(m) => m.into_inner().unwrap(),
            Err(_) => unreachable!("all sink workers joined"),
        }
    }
}

/// Client side of the sink protocol. Assigns connection-local sequence
/// numbers starting at 0 and waits for each ack.
pub struct SinkClient {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    next_seq: u64,
}

impl SinkClient {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self, CloudError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(SinkClient { reader: BufReader::new(stream.try_clone()?), writer: BufWriter::new(stream), next_seq: 0 })
    }

    /// Sends `frame` with the next sequence number; returns the seq used.
    pub fn send(&mut self, mut frame: CloudFrame) -> Result<u64, CloudError> {
        frame.seq = self.next_seq;
        write_frame(&mut self.writer, &frame)?;
        let ack = read_frame(&mut self.reader)?.ok_or_else(|| CloudError::Protocol("sink closed before ack".into()))?;
        if let Some(err) = ack.ack_error() {
            return Err(CloudError::Rejected(err.to_string()));
        }
        if ack.event != EventKind::Ack || ack.seq != frame.seq {
            return Err(CloudError::Protocol(format!("unexpected reply {:?} seq {}", ack.event, ack.seq)));
        }
        self.next_seq += 1;
        Ok(frame.seq)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalTrend {
    pub device_id: String,
    pub n_sessions: usize,
    pub slope_hz_per_session: f64,
    pub mean_freq_hz: f64,
}

/// Ordinary least-squares slope of `ys` against `0..n`.
pub fn ols_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let x_mean = (n - 1.0) / 2.0;
    let y_mean = ys.iter().sum::<f64>() / n;
    let (num, den) = ys.iter().enumerate().fold((0.0, 0.0), |(num, den), (i, y)| {
        let dx = i as f64 - x_mean;
        (num + dx * (y - y_mean), den + dx * dx)
    });
    num / den
}

/// Trend of session-level mean tap rate for a device.
///
/// A session's level is the mean of its rounds' `mean_freq_hz`. Sessions are
/// taken in log order; a session id seen again is ignored.
pub fn temporal_trend(frames: &[CloudFrame], device_id: &str) -> Result<TemporalTrend, CloudError> {
    let mut seen = BTreeSet::new();
    let mut means = Vec::new();
    for f in frames.iter().filter(|f| f.event == EventKind::Summary) {
        let s = f.summary_payload()?;
        if s.device_id != device_id || s.rounds.is_empty() || !seen.insert(s.session_id.clone()) {
            continue;
        }
        means.push(s.rounds.iter().map(|r| r.mean_freq_hz).sum::<f64>() / s.rounds.len() as f64);
    }
    trend_from_means(device_id, &means)
}

pub fn trend_from_means(device_id: &str, means: &[f64]) -> Result<TemporalTrend, CloudError> {
    if means.len() < 2 {
        return Err(CloudError::InsufficientData { sessions: means.len() });
    }
    Ok(TemporalTrend {
        device_id: device_id.to_string(),
        n_sessions: means.len(),
        slope_hz_per_session: ols_slope(means),
        mean_freq_hz: means.iter().sum::<f64>() / means.len() as f64,
    })
}

pub fn temporal_trend_from_log(path: impl AsRef<Path>, device_id: &str) -> Result<TemporalTrend, CloudError> {
    temporal_trend(&LongTermLog::read_all(path)?, device_id)
}
