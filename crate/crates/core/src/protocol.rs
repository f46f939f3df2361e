//! Newline-delimited JSON control protocol.
//!
//! Every message is one JSON object on one line with a `type` tag:
//!
//! ```text
//! {"type":"hello","version":1}
//! {"type":"calibrate","target":"edge"}
//! {"type":"move","surface_mm":0.35}
//! {"type":"preset","condition":"EL"}
//! {"type":"status"}
//! {"type":"state","surface_mm":0.0,"edge_mm":0.0,"moving":false,"calibrated_surface":false,"calibrated_edge":false}
//! {"type":"stream","enable":true,"rate_hz":10.0}
//! {"type":"frame","t_ms":100,"cells":[...36 numbers...]}
//! {"type":"error","code":"OUT_OF_RANGE","detail":"..."}
//! ```
//!
//! The server answers every request line with exactly one `state` or `error`
//! line, in order. While streaming, `frame` lines are interleaved between
//! responses. Unknown fields are ignored.

use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::condition::Condition;
use crate::device::{Device, DeviceCommand, DeviceError, StatusReport};
use crate::error::ErrorCode;
use crate::frame::{FsrFrame, CELLS};
use crate::mechmodel::Axis;

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_ADDR: &str = "127.0.0.1:9901";
pub const ADDR_ENV: &str = "EDGESIM_ADDR";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello {
        version: u32,
    },
    Calibrate {
        #[serde(rename = "target")]
        axis: Axis,
    },
    Move {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        surface_mm: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        edge_mm: Option<f64>,
    },
    Preset {
        condition: Condition,
    },
    Status,
    State {
        surface_mm: f64,
        edge_mm: f64,
        moving: bool,
        calibrated_surface: bool,
        calibrated_edge: bool,
    },
    Stream {
        enable: bool,
        rate_hz: f64,
    },
    Frame {
        t_ms: u64,
        #[serde(with = "cells36")]
        cells: [f64; CELLS],
    },
    Error {
        code: ErrorCode,
        detail: String,
    },
}

impl Message {
    pub fn error(code: ErrorCode, detail: impl Into<String>) -> Self {
        Message::Error {
            code,
            detail: detail.into(),
        }
    }

    pub fn from_status(s: StatusReport) -> Self {
        Message::State {
            surface_mm: s.surface_mm,
            edge_mm: s.edge_mm,
            moving: s.moving,
            calibrated_surface: s.calibrated_surface,
            calibrated_edge: s.calibrated_edge,
        }
    }

    pub fn from_frame(f: &FsrFrame) -> Self {
        Message::Frame {
            t_ms: f.t_ms,
            cells: f.cells,
        }
    }
}

mod cells36 {
    use super::CELLS;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(cells: &[f64; CELLS], s: S) -> Result<S::Ok, S::Error> {
        cells.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; CELLS], D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        let n = v.len();
        v.try_into()
            .map_err(|_| D::Error::custom(format!("frame needs exactly 36 cells, got {n}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("PROTOCOL: {detail}")]
pub struct ProtocolError {
    pub detail: String,
}

/// One message as a newline-terminated JSON line.
pub fn encode(msg: &Message) -> Vec<u8> {
    let mut out = serde_json::to_vec(msg).expect("messages always serialize");
    out.push(b'\n');
    out
}

pub fn encode_line(msg: &Message) -> String {
    String::from_utf8(encode(msg)).expect("JSON is UTF-8")
}

/// Parses one line (with or without its trailing newline).
pub fn decode(bytes: &[u8]) -> Result<Message, ProtocolError> {
    let text = std::str::from_utf8(bytes).map_err(|e| ProtocolError {
        detail: format!("line is not UTF-8: {e}"),
    })?;
    let text = text.trim_end_matches(['\n', '\r']);
    if text.trim().is_empty() {
        return Err(ProtocolError {
            detail: "empty line".into(),
        });
    }
    if text.contains('\n') {
        return Err(ProtocolError {
            detail: "interior newline".into(),
        });
    }
    serde_json::from_str(text).map_err(|e| ProtocolError {
        detail: e.to_string(),
    })
}

/// Maps a request message onto a device command.
fn to_command(msg: &Message) -> Result<DeviceCommand, DeviceError> {
    Ok(match *msg {
        Message::Calibrate { axis } => DeviceCommand::Calibrate(axis),
        Message::Move {
            surface_mm,
            edge_mm,
        } => DeviceCommand::Move {
            surface_mm,
            edge_mm,
        },
        Message::Preset { condition } => DeviceCommand::Preset(condition),
        Message::Status => DeviceCommand::Status,
        Message::Stream { enable, rate_hz } => DeviceCommand::Stream { enable, rate_hz },
        Message::Hello { .. }
        | Message::State { .. }
        | Message::Frame { .. }
        | Message::Error { .. } => {
            return Err(DeviceError {
                code: ErrorCode::BadCommand,
                detail: "not a request message".into(),
            })
        }
    })
}

/// Handles one request line against the device and returns the reply.
pub fn handle_line(device: &mut Device, line: &[u8]) -> Message {
    let msg = match decode(line) {
        Ok(m) => m,
        Err(e) => return Message::error(ErrorCode::Protocol, e.detail),
    };
    if let Message::Hello { .. } = msg {
        return Message::Hello {
            version: PROTOCOL_VERSION,
        };
    }
    match to_command(&msg).and_then(|cmd| device.apply(&cmd)) {
        Ok(()) => Message::from_status(device.status()),
        Err(e) => Message::error(e.code, e.detail),
    }
}

#[derive(Debug, Clone)]
pub struct ServerOptions {
    /// Simulated milliseconds per real millisecond.
    pub time_scale: f64,
    /// Real-time interval between device ticks.
    pub tick: Duration,
}

impl Default for ServerOptions {
    fn default() -> Self {
        ServerOptions {
            time_scale: 1.0,
            tick: Duration::from_millis(2),
        }
    }
}

type Writer = BufWriter<TcpStream>;

struct Shared {
    // Lock order: `conn` before `device`.
    conn: Mutex<Option<Writer>>,
    device: Mutex<Device>,
    taps: Mutex<Vec<Sender<FsrFrame>>>,
    shutdown: AtomicBool,
}

fn write_msg(w: &mut Writer, msg: &Message) -> io::Result<()> {
    w.write_all(&encode(msg))?;
    w.flush()
}

/// TCP endpoint owning a single virtual device.
pub struct Server {
    listener: TcpListener,
    shared: Arc<Shared>,
    options: ServerOptions,
}

impl Server {
    pub fn bind(device: Device, addr: impl ToSocketAddrs, options: ServerOptions) -> io::Result<Server> {
        if !(options.time_scale > 0.0 && options.time_scale.is_finite()) {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                "time scale must be positive",
            ));
        }
        let listener = TcpListener::bind(addr)?;
        Ok(Server {
            listener,
            shared: Arc::new(Shared {
                conn: Mutex::new(None),
                device: Mutex::new(device),
                taps: Mutex::new(Vec::new()),
                shutdown: AtomicBool::new(false),
            }),
            options,
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Subscribes to every frame the device streams, whichever client
    /// enabled streaming.
    pub fn frame_tap(&self) -> Receiver<FsrFrame> {
        let (tx, rx) = mpsc::channel();
        self.shared.taps.lock().unwrap().push(tx);
        rx
    }

    /// Runs the accept loop on a background thread.
    pub fn spawn(self) -> io::Result<ServerHandle> {
        let addr = self.local_addr()?;
        let shared = Arc::clone(&self.shared);
        let join = thread::Builder::new()
            .name("edgesim-server".into())
            .spawn(move || self.serve())?;
        Ok(ServerHandle {
            addr,
            shared,
            join: Some(join),
        })
    }

    /// Serves connections one at a time until shut down.
    pub fn serve(self) -> io::Result<()> {
        let ticker = spawn_ticker(Arc::clone(&self.shared), self.options.clone());
        info!("listening on {}", self.local_addr()?);
        for stream in self.listener.incoming() {
            if self.shared.shutdown.load(Ordering::SeqCst) {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    warn!("accept failed: {e}");
                    continue;
                }
            };
            if let Err(e) = self.serve_connection(stream) {
                debug!("connection ended: {e}");
            }
            if self.shared.shutdown.load(Ordering::SeqCst) {
                break;
            }
        }
        self.shared.shutdown.store(true, Ordering::SeqCst);
        let _ = ticker.join();
        Ok(())
    }

    fn serve_connection(&self, stream: TcpStream) -> io::Result<()> {
        let peer = stream.peer_addr().ok();
        info!("client connected: {peer:?}");
        stream.set_nodelay(true).ok();
        let mut reader = BufReader::new(stream.try_clone()?);
        {
            let mut conn = self.shared.conn.lock().unwrap();
            let mut w = BufWriter::new(stream.try_clone()?);
            write_msg(
                &mut w,
                &Message::Hello {
                    version: PROTOCOL_VERSION,
                },
            )?;
            *conn = Some(w);
        }
        let mut line = Vec::with_capacity(512);
        let result = loop {
            line.clear();
            match reader.read_until(b'\n', &mut line) {
                Ok(0) => break Ok(()),
                Ok(_) => {}
                Err(e) => break Err(e),
            }
            if self.shared.shutdown.load(Ordering::SeqCst) {
                break Ok(());
            }
            let mut conn = self.shared.conn.lock().unwrap();
            let reply = {
                let mut device = self.shared.device.lock().unwrap();
                handle_line(&mut device, &line)
            };
            if let Some(w) = conn.as_mut() {
                if let Err(e) = write_msg(w, &reply) {
                    break Err(e);
                }
            }
        };
        // Disconnect: streaming stops, motion targets persist.
        {
            let mut conn = self.shared.conn.lock().unwrap();
            *conn = None;
            self.shared.device.lock().unwrap().stop_streaming();
        }
        let _ = stream.shutdown(Shutdown::Both);
        info!("client disconnected: {peer:?}");
        result
    }
}

fn spawn_ticker(shared: Arc<Shared>, options: ServerOptions) -> JoinHandle<()> {
    thread::Builder::new()
        .name("edgesim-ticker".into())
        .spawn(move || {
            let start = Instant::now();
            let base = shared.device.lock().unwrap().clock_ms();
            while !shared.shutdown.load(Ordering::SeqCst) {
                thread::sleep(options.tick);
                let sim_now = base + (start.elapsed().as_secs_f64() * 1000.0 * options.time_scale) as u64;
                let mut conn = shared.conn.lock().unwrap();
                let frames = {
                    let mut device = shared.device.lock().unwrap();
                    let dt = sim_now.saturating_sub(device.clock_ms());
                    if dt == 0 {
                        continue;
                    }
                    device.tick(dt)
                };
                if frames.is_empty() {
                    continue;
                }
                if let Some(w) = conn.as_mut() {
                    for f in &frames {
                        if write_msg(w, &Message::from_frame(f)).is_err() {
                            break;
                        }
                    }
                }
                drop(conn);
                let mut taps = shared.taps.lock().unwrap();
                taps.retain(|tx| frames.iter().all(|f| tx.send(f.clone()).is_ok()));
            }
        })
        .expect("spawn ticker")
}

/// Handle to a server running on a background thread.
pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    join: Option<JoinHandle<io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Runs `f` against the served device.
    pub fn with_device<R>(&self, f: impl FnOnce(&mut Device) -> R) -> R {
        f(&mut self.shared.device.lock().unwrap())
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        if let Some(w) = self.shared.conn.lock().unwrap().as_ref() {
            let _ = w.get_ref().shutdown(Shutdown::Both);
        }
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.join.is_some() {
            self.stop();
        }
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Io(#[from] io::Error),
    #[error("transport: no response within {0:?}")]
    Timeout(Duration),
    #[error("transport: connection closed")]
    Disconnected,
    #[error("transport: unexpected handshake {0:?}")]
    Handshake(Box<Message>),
    #[error("device error {code}: {detail}")]
    Device { code: ErrorCode, detail: String },
    #[error("unexpected response {0:?}")]
    Unexpected(Box<Message>),
}

impl ClientError {
    /// True for failures of the connection itself, as opposed to error
    /// replies from the device.
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            ClientError::Io(_) | ClientError::Timeout(_) | ClientError::Disconnected | ClientError::Handshake(_)
        )
    }
}

/// Host-side connection. Responses and frames are demultiplexed by a reader
/// thread; frames arrive on their own channel in timestamp order.
pub struct Client {
    stream: TcpStream,
    responses: Receiver<Message>,
    frames: Receiver<FsrFrame>,
    timeout: Duration,
    server_version: u32,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Client, ClientError> {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no address"))?;
        let stream = TcpStream::connect_timeout(&addr, timeout)?;
        stream.set_nodelay(true).ok();
        let (resp_tx, responses) = mpsc::channel();
        let (frame_tx, frames) = mpsc::channel();
        let reader = BufReader::new(stream.try_clone()?);
        thread::Builder::new()
            .name("edgesim-client-reader".into())
            .spawn(move || read_loop(reader, resp_tx, frame_tx))?;
        let mut client = Client {
            stream,
            responses,
            frames,
            timeout,
            server_version: 0,
        };
        match client.recv()? {
            Message::Hello { version } => client.server_version = version,
            other => return Err(ClientError::Handshake(Box::new(other))),
        }
        Ok(client)
    }

    pub fn server_version(&self) -> u32 {
        self.server_version
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    fn recv(&self) -> Result<Message, ClientError> {
        match self.responses.recv_timeout(self.timeout) {
            Ok(m) => Ok(m),
            Err(RecvTimeoutError::Timeout) => Err(ClientError::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(ClientError::Disconnected),
        }
    }

    /// Sends one message and waits for its non-frame reply. Error replies are
    /// returned as `Message::Error`.
    pub fn request(&mut self, msg: &Message) -> Result<Message, ClientError> {
        self.stream.write_all(&encode(msg))?;
        self.recv()
    }

    /// Writes a raw line without waiting for the reply.
    pub fn send_raw(&mut self, line: &[u8]) -> Result<(), ClientError> {
        self.stream.write_all(line)?;
        Ok(())
    }

    /// Next reply, for use after [`Client::send_raw`].
    pub fn next_response(&mut self) -> Result<Message, ClientError> {
        self.recv()
    }

    fn command(&mut self, msg: &Message) -> Result<StatusReport, ClientError> {
        match self.request(msg)? {
            Message::State {
                surface_mm,
                edge_mm,
                moving,
                calibrated_surface,
                calibrated_edge,
            } => Ok(StatusReport {
                surface_mm,
                edge_mm,
                moving,
                calibrated_surface,
                calibrated_edge,
            }),
            Message::Error { code, detail } => Err(ClientError::Device { code, detail }),
            other => Err(ClientError::Unexpected(Box::new(other))),
        }
    }

    pub fn status(&mut self) -> Result<StatusReport, ClientError> {
        self.command(&Message::Status)
    }

    pub fn calibrate(&mut self, axis: Axis) -> Result<StatusReport, ClientError> {
        self.command(&Message::Calibrate { axis })
    }

    pub fn preset(&mut self, condition: Condition) -> Result<StatusReport, ClientError> {
        self.command(&Message::Preset { condition })
    }

    pub fn move_to(&mut self, surface_mm: Option<f64>, edge_mm: Option<f64>) -> Result<StatusReport, ClientError> {
        self.command(&Message::Move {
            surface_mm,
            edge_mm,
        })
    }

    pub fn stream(&mut self, enable: bool, rate_hz: f64) -> Result<StatusReport, ClientError> {
        self.command(&Message::Stream { enable, rate_hz })
    }

    /// Frames received so far, in timestamp order.
    pub fn frames(&self) -> &Receiver<FsrFrame> {
        &self.frames
    }

    pub fn drain_frames(&self) -> Vec<FsrFrame> {
        self.frames.try_iter().collect()
    }
}

impl Drop for Client {
    fn drop(&mut self) {
        // The reader thread holds a clone of the socket; shut it down so the
        // server sees the disconnect.
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

fn read_loop(mut reader: BufReader<TcpStream>, responses: Sender<Message>, frames: Sender<FsrFrame>) {
    let mut line = Vec::with_capacity(1024);
    loop {
        line.clear();
        match reader.read_until(b'\n', &mut line) {
            Ok(0) | Err(_) => return,
            Ok(_) => {}
        }
        match decode(&line) {
            Ok(Message::Frame { t_ms, cells }) => {
                let _ = frames.send(FsrFrame::new(t_ms, cells));
            }
            Ok(m) => {
                if responses.send(m).is_err() {
                    return;
                }
            }
            Err(e) => warn!("dropping undecodable server line: {e}"),
        }
    }
}

/// Resolves the listen/connect address: explicit value, then `EDGESIM_ADDR`,
/// then the default.
pub fn resolve_addr(explicit: Option<&str>) -> String {
    explicit
        .map(str::to_string)
        .or_else(|| std::env::var(ADDR_ENV).ok())
        .unwrap_or_else(|| DEFAULT_ADDR.to_string())
}
