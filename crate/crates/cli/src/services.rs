//! Standalone gateway and sink processes.
//!
//! The gateway listens for devices speaking a small framed protocol: each
//! packet is a 4-byte big-endian length followed by the packet's binary
//! encoding, and each is answered with 9 bytes — `accepted` (u8) and the
//! next expected sequence number (u64 BE). When a device hangs up its
//! session is closed, analysed and forwarded to the configured sink.

use std::collections::BTreeSet;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use fogwear::cloud::{serve, LongTermLog, SinkClient};
use fogwear::device::{DeviceError, SamplePacket};
use fogwear::gateway::{Ack, FogGateway};
use serde_json::json;

use crate::config::RunConfig;
use crate::run::LONGTERM_LOG;
use crate::RunError;

const POLL: Duration = Duration::from_millis(20);
const MAX_PACKET_BYTES: usize = 16 * 1024 * 1024;

/// One JSON line on stderr for things that should not stop a service.
pub fn log_event(value: serde_json::Value) {
    eprintln!("{value}");
}

/// Runs the sink on `config.sink.endpoint` until `stop` is set. The
/// long-term log in the output directory is appended to, never truncated.
pub fn run_sink(config: &RunConfig, stop: &AtomicBool, on_ready: impl FnOnce(SocketAddr)) -> Result<u64, RunError> {
    std::fs::create_dir_all(&config.output_dir).map_err(RunError::io(config.output_dir.display()))?;
    let log = LongTermLog::open(config.output_dir.join(LONGTERM_LOG))?;
    let server = serve(&config.sink.endpoint, log)?;
    on_ready(server.local_addr());
    while !stop.load(Ordering::SeqCst) {
        thread::sleep(POLL);
    }
    Ok(server.shutdown().len())
}

/// Runs the gateway on `config.gateway_service.endpoint` until `stop` is set.
/// Returns the number of sessions closed.
pub fn run_gateway(config: &RunConfig, stop: &AtomicBool, on_ready: impl FnOnce(SocketAddr)) -> Result<u64, RunError> {
    let endpoint = &config.gateway_service.endpoint;
    let listener = TcpListener::bind(endpoint).map_err(RunError::io(endpoint))?;
    listener.set_nonblocking(true).map_err(RunError::io(endpoint))?;
    let addr = listener.local_addr().map_err(RunError::io(endpoint))?;
    let gateway = Arc::new(FogGateway::new(config.gateway.clone())?);
    on_ready(addr);

    let closed = std::sync::atomic::AtomicU64::new(0);
    thread::scope(|scope| {
        while !stop.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, peer)) => {
                    let (gateway, closed) = (gateway.clone(), &closed);
                    scope.spawn(move || match serve_device(stream, &gateway, config) {
                        Ok(n) => {
                            closed.fetch_add(n, Ordering::SeqCst);
                        }
                        Err(e) => log_event(json!({"warning": "device connection", "peer": peer.to_string(), "message": e.to_string()})),
                    });
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
                Err(e) => log_event(json!({"warning": "accept", "message": e.to_string()})),
            }
        }
    });
    Ok(closed.into_inner())
}

fn serve_device(stream: TcpStream, gateway: &FogGateway, config: &RunConfig) -> Result<u64, RunError> {
    stream.set_nonblocking(false).map_err(RunError::io("device socket"))?;
    let mut reader = BufReader::new(stream.try_clone().map_err(RunError::io("device socket"))?);
    let mut writer = BufWriter::new(stream);
    let mut devices = BTreeSet::new();
    while let Some(packet) = read_packet(&mut reader)? {
        devices.insert(packet.device_id.clone());
        let ack = gateway.ingest_packet(packet).unwrap_or_else(|e| {
            log_event(json!({"warning": "ingest", "message": e.to_string()}));
            Ack { accepted: false, next_seq: 0 }
        });
        write_ack(&mut writer, &ack).map_err(RunError::io("device socket"))?;
    }

    let mut closed = 0;
    for device in devices {
        let summary = gateway.close_device(&device, &config.devices.protocol)?;
        closed += 1;
        let frames = gateway.forward_frames(&summary)?;
        let mut client = SinkClient::connect(config.sink.endpoint.as_str())?;
        for frame in frames {
            client.send(frame)?;
        }
        log_event(json!({"event": "forwarded", "session": summary.session_id, "total_taps": summary.total_taps}));
    }
    Ok(closed)
}

fn read_packet<R: Read>(reader: &mut R) -> Result<Option<SamplePacket>, RunError> {
    let mut len = [0u8; 4];
    match reader.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(RunError::io("device socket")(e)),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_PACKET_BYTES {
        return Err(DeviceError::Decode(format!("packet of {len} bytes exceeds limit")).into());
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).map_err(RunError::io("device socket"))?;
    Ok(Some(SamplePacket::decode(&body)?))
}

fn write_ack<W: Write>(w: &mut W, ack: &Ack) -> std::io::Result<()> {
    w.write_all(&[u8::from(ack.accepted)])?;
    w.write_all(&ack.next_seq.to_be_bytes())?;
    w.flush()
}

/// Device side of the gateway protocol.
pub struct GatewayClient {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl GatewayClient {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> std::io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(GatewayClient { reader: BufReader::new(stream.try_clone()?), writer: BufWriter::new(stream) })
    }

    pub fn send(&mut self, packet: &SamplePacket) -> std::io::Result<Ack> {
        let bytes = packet.encode();
        self.writer.write_all(&(bytes.len() as u32).to_be_bytes())?;
        self.writer.write_all(&bytes)?;
        self.writer.flush()?;
        let mut reply = [0u8; 9];
        self.reader.read_exact(&mut reply)?;
        Ok(Ack { accepted: reply[0] != 0, next_seq: u64::from_be_bytes(reply[1..].try_into().expect("8 bytes")) })
    }
}
