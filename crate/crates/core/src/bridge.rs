//! WebSocket relay between a live session engine and browser UIs.
//!
//! Every peer opens with `{"type":"join","role":"engine"}` or
//! `{"type":"join","role":"ui"}`. Engine events are relayed verbatim to all
//! UIs and kept for replay to late joiners. Device frames fed through
//! [`Bridge::relay_frames`] go to UIs as protocol `frame` messages.
//!
//! A UI response is forwarded to the engine only while the matching trial is
//! awaiting a response, and only once. Everything else gets a `rejected`
//! reply to the sender.

use std::collections::HashMap;
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tungstenite::{Message as WsMessage, WebSocket};

use crate::experiment::{EventSink, SessionEvent, UiResponse};
use crate::frame::FsrFrame;
use crate::protocol::{encode_line, Message};

const POLL: Duration = Duration::from_millis(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Engine,
    Ui,
}

/// Bridge control messages. Session events and frames travel as their own
/// message types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BridgeMessage {
    Join { role: Role },
    Joined { role: Role },
    Response(UiResponse),
    Accepted { index: usize },
    Rejected { index: Option<usize>, reason: String },
    /// Experimenter request to stop the running session.
    Abort,
}

impl BridgeMessage {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("bridge messages serialize")
    }
}

#[derive(Debug, Default)]
struct Hub {
    peers: HashMap<u64, (Role, Sender<String>)>,
    /// Trial currently accepting a response.
    open: Option<usize>,
    history: Vec<String>,
}

impl Hub {
    fn broadcast(&mut self, role: Role, line: &str) {
        self.peers
            .retain(|_, (r, tx)| *r != role || tx.send(line.to_string()).is_ok());
    }

    fn on_engine_line(&mut self, line: &str) {
        match serde_json::from_str::<SessionEvent>(line) {
            Ok(SessionEvent::TrialStart { index, .. }) => {
                if index == 0 {
                    self.history.clear();
                }
                self.open = None;
            }
            Ok(SessionEvent::AwaitResponse { index, .. }) => self.open = Some(index),
            Ok(SessionEvent::TrialEnd { .. }) | Ok(SessionEvent::SessionEnd { .. }) => self.open = None,
            Err(_) => {
                debug!("relaying unrecognised engine line");
            }
        }
        self.history.push(line.to_string());
        self.broadcast(Role::Ui, line);
    }

    fn on_ui_message(&mut self, from: u64, msg: BridgeMessage) {
        let reply = match msg {
            BridgeMessage::Response(r) => {
                if self.open == Some(r.index) {
                    self.open = None;
                    let index = r.index;
                    self.broadcast(Role::Engine, &BridgeMessage::Response(r).to_line());
                    BridgeMessage::Accepted { index }
                } else {
                    BridgeMessage::Rejected {
                        index: Some(r.index),
                        reason: "not awaiting a response for this trial".into(),
                    }
                }
            }
            BridgeMessage::Abort => {
                self.broadcast(Role::Engine, &BridgeMessage::Abort.to_line());
                return;
            }
            other => BridgeMessage::Rejected {
                index: None,
                reason: format!("unexpected message from ui: {}", other.to_line()),
            },
        };
        if let Some((_, tx)) = self.peers.get(&from) {
            let _ = tx.send(reply.to_line());
        }
    }
}

struct Shared {
    hub: Mutex<Hub>,
    shutdown: AtomicBool,
    next_id: AtomicU64,
}

pub struct Bridge {
    listener: TcpListener,
    shared: Arc<Shared>,
}

impl Bridge {
    pub fn bind(addr: impl ToSocketAddrs) -> io::Result<Bridge> {
        Ok(Bridge {
            listener: TcpListener::bind(addr)?,
            shared: Arc::new(Shared {
                hub: Mutex::new(Hub::default()),
                shutdown: AtomicBool::new(false),
                next_id: AtomicU64::new(0),
            }),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Forwards device frames to every UI until the source closes.
    pub fn relay_frames(&self, frames: Receiver<FsrFrame>) {
        let shared = Arc::clone(&self.shared);
        thread::Builder::new()
            .name("edgesim-bridge-frames".into())
            .spawn(move || {
                for f in frames {
                    if shared.shutdown.load(Ordering::SeqCst) {
                        break;
                    }
                    let line = encode_line(&Message::from_frame(&f));
                    shared.hub.lock().unwrap().broadcast(Role::Ui, line.trim_end());
                }
            })
            .expect("spawn frame relay");
    }

    pub fn spawn(self) -> io::Result<BridgeHandle> {
        let addr = self.local_addr()?;
        let shared = Arc::clone(&self.shared);
        let join = thread::Builder::new()
            .name("edgesim-bridge".into())
            .spawn(move || self.serve())?;
        Ok(BridgeHandle {
            addr,
            shared,
            join: Some(join),
        })
    }

    pub fn serve(self) {
        info!("ui bridge listening on {:?}", self.local_addr());
        for stream in self.listener.incoming() {
            if self.shared.shutdown.load(Ordering::SeqCst) {
                break;
            }
            match stream {
                Ok(s) => {
                    let shared = Arc::clone(&self.shared);
                    let _ = thread::Builder::new()
                        .name("edgesim-bridge-peer".into())
                        .spawn(move || {
                            if let Err(e) = serve_peer(shared, s) {
                                debug!("bridge peer ended: {e}");
                            }
                        });
                }
                Err(e) => warn!("bridge accept failed: {e}"),
            }
        }
    }
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut))
}

fn serve_peer(shared: Arc<Shared>, stream: TcpStream) -> Result<(), tungstenite::Error> {
    stream.set_nodelay(true).ok();
    let mut ws = tungstenite::accept(stream).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(e) => e,
        tungstenite::HandshakeError::Interrupted(_) => tungstenite::Error::ConnectionClosed,
    })?;
    ws.get_ref().set_read_timeout(Some(POLL))?;
    let id = shared.next_id.fetch_add(1, Ordering::SeqCst);
    let (tx, rx) = mpsc::channel::<String>();
    let mut role: Option<Role> = None;
    let result = loop {
        if shared.shutdown.load(Ordering::SeqCst) {
            let _ = ws.close(None);
            break Ok(());
        }
        match ws.read() {
            Ok(WsMessage::Text(text)) => match role {
                None => match serde_json::from_str::<BridgeMessage>(&text) {
                    Ok(BridgeMessage::Join { role: r }) => {
                        role = Some(r);
                        let mut hub = shared.hub.lock().unwrap();
                        // Joined goes out first, then any replay.
                        let _ = tx.send(BridgeMessage::Joined { role: r }.to_line());
                        if r == Role::Ui {
                            for line in &hub.history {
                                let _ = tx.send(line.clone());
                            }
                        }
                        hub.peers.insert(id, (r, tx.clone()));
                    }
                    _ => {
                        let _ = tx.send(
                            BridgeMessage::Rejected {
                                index: None,
                                reason: "expected join".into(),
                            }
                            .to_line(),
                        );
                    }
                },
                Some(Role::Engine) => {
                    let mut hub = shared.hub.lock().unwrap();
                    match serde_json::from_str::<BridgeMessage>(&text) {
                        Ok(BridgeMessage::Join { .. }) => {}
                        _ => hub.on_engine_line(&text),
                    }
                }
                Some(Role::Ui) => match serde_json::from_str::<BridgeMessage>(&text) {
                    Ok(msg) => shared.hub.lock().unwrap().on_ui_message(id, msg),
                    Err(e) => {
                        let _ = tx.send(
                            BridgeMessage::Rejected {
                                index: None,
                                reason: format!("unparseable message: {e}"),
                            }
                            .to_line(),
                        );
                    }
                },
            },
            Ok(WsMessage::Close(_)) => break Ok(()),
            Ok(_) => {}
            Err(e) if is_timeout(&e) => {}
            Err(e) => break Err(e),
        }
        if let Err(e) = flush_outbox(&mut ws, &rx) {
            break Err(e);
        }
    };
    shared.hub.lock().unwrap().peers.remove(&id);
    result
}

fn flush_outbox<S: io::Read + io::Write>(ws: &mut WebSocket<S>, rx: &Receiver<String>) -> Result<(), tungstenite::Error> {
    loop {
        match rx.try_recv() {
            Ok(line) => ws.send(WsMessage::Text(line))?,
            Err(TryRecvError::Empty) | Err(TryRecvError::Disconnected) => return Ok(()),
        }
    }
}

pub struct BridgeHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    join: Option<JoinHandle<()>>,
}

impl BridgeHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("ws://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

impl Drop for BridgeHandle {
    fn drop(&mut self) {
        if self.join.is_some() {
            self.stop();
        }
    }
}

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("bridge connection: {0}")]
    Io(#[from] io::Error),
    #[error("bridge handshake: {0}")]
    Handshake(String),
    #[error("bridge closed")]
    Closed,
}

/// Connects to a bridge as `role` and returns the socket, already joined.
pub fn connect(addr: &str, role: Role) -> Result<WebSocket<TcpStream>, BridgeError> {
    let host = addr.trim_start_matches("ws://").trim_end_matches('/');
    let stream = TcpStream::connect(host)?;
    stream.set_nodelay(true).ok();
    let (mut ws, _) = tungstenite::client(format!("ws://{host}/"), stream)
        .map_err(|e| BridgeError::Handshake(e.to_string()))?;
    ws.send(WsMessage::Text(BridgeMessage::Join { role }.to_line()))
        .map_err(|e| BridgeError::Handshake(e.to_string()))?;
    loop {
        match ws.read() {
            Ok(WsMessage::Text(t)) => {
                return match serde_json::from_str::<BridgeMessage>(&t) {
                    Ok(BridgeMessage::Joined { role: r }) if r == role => Ok(ws),
                    _ => Err(BridgeError::Handshake(format!("unexpected reply {t}"))),
                }
            }
            Ok(_) => continue,
            Err(e) => return Err(BridgeError::Handshake(e.to_string())),
        }
    }
}

/// Engine side of a live session: an event sink plus incoming responses
/// and abort requests.
pub struct EngineLink {
    outbox: Sender<String>,
    responses: Option<Receiver<UiResponse>>,
    abort: Arc<AtomicBool>,
    closed: Arc<AtomicBool>,
    join: Option<JoinHandle<()>>,
}

impl EngineLink {
    pub fn connect(addr: &str) -> Result<EngineLink, BridgeError> {
        let mut ws = connect(addr, Role::Engine)?;
        ws.get_ref().set_read_timeout(Some(POLL))?;
        let (outbox, rx) = mpsc::channel::<String>();
        let (resp_tx, resp_rx) = mpsc::channel();
        let abort = Arc::new(AtomicBool::new(false));
        let closed = Arc::new(AtomicBool::new(false));
        let (abort2, closed2) = (Arc::clone(&abort), Arc::clone(&closed));
        let join = thread::Builder::new()
            .name("edgesim-engine-link".into())
            .spawn(move || {
                loop {
                    match ws.read() {
                        Ok(WsMessage::Text(t)) => match serde_json::from_str::<BridgeMessage>(&t) {
                            Ok(BridgeMessage::Response(r)) => {
                                let _ = resp_tx.send(r);
                            }
                            Ok(BridgeMessage::Abort) => abort2.store(true, Ordering::SeqCst),
                            _ => debug!("engine link ignored {t}"),
                        },
                        Ok(WsMessage::Close(_)) => break,
                        Ok(_) => {}
                        Err(e) if is_timeout(&e) => {}
                        Err(_) => break,
                    }
                    // Read the flag before flushing so nothing queued ahead of close is lost.
                    let closing = closed2.load(Ordering::SeqCst);
                    if flush_outbox(&mut ws, &rx).is_err() {
                        break;
                    }
                    if closing {
                        let _ = flush_outbox(&mut ws, &rx);
                        let _ = ws.close(None);
                        let _ = ws.flush();
                        break;
                    }
                }
                closed2.store(true, Ordering::SeqCst);
            })?;
        Ok(EngineLink {
            outbox,
            responses: Some(resp_rx),
            abort,
            closed,
            join: Some(join),
        })
    }

    /// Response stream for a [`crate::experiment::LiveResponder`]. Can be taken once.
    pub fn take_responses(&mut self) -> Option<Receiver<UiResponse>> {
        self.responses.take()
    }

    /// Set when a UI asks to abort.
    pub fn abort_flag(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.abort)
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::SeqCst)
    }

    /// Sends queued events and closes the link.
    pub fn close(mut self) {
        self.finish();
    }

    fn finish(&mut self) {
        self.closed.store(true, Ordering::SeqCst);
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

impl EventSink for EngineLink {
    fn emit(&mut self, event: &SessionEvent) {
        let _ = self.outbox.send(event.to_line());
    }
}

impl Drop for EngineLink {
    fn drop(&mut self) {
        self.finish();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condition::Condition;

    fn hub_with_peers() -> (Hub, Receiver<String>, Receiver<String>) {
        let mut hub = Hub::default();
        let (etx, erx) = mpsc::channel();
        let (utx, urx) = mpsc::channel();
        hub.peers.insert(0, (Role::Engine, etx));
        hub.peers.insert(1, (Role::Ui, utx));
        (hub, erx, urx)
    }

    fn response(index: usize) -> BridgeMessage {
        BridgeMessage::Response(UiResponse {
            index,
            choice: Condition::EL,
            client_t_ms: None,
        })
    }

    #[test]
    fn message_encoding() {
        assert_eq!(
            BridgeMessage::Join { role: Role::Ui }.to_line(),
            r#"{"type":"join","role":"ui"}"#
        );
        assert_eq!(
            response(3).to_line(),
            r#"{"type":"response","index":3,"choice":"EL","client_t_ms":null}"#
        );
        let m: BridgeMessage = serde_json::from_str(r#"{"type":"response","index":1,"choice":"SH"}"#).unwrap();
        assert!(matches!(m, BridgeMessage::Response(UiResponse { index: 1, choice: Condition::SH, .. })));
    }

    #[test]
    fn responses_gated_by_phase() {
        let (mut hub, erx, urx) = hub_with_peers();
        hub.on_ui_message(1, response(0));
        assert!(urx.try_recv().unwrap().contains("rejected"));
        assert!(erx.try_recv().is_err());

        hub.on_engine_line(&SessionEvent::TrialStart { index: 0, total: 4 }.to_line());
        hub.on_ui_message(1, response(0));
        assert!(erx.try_recv().is_err());

        hub.on_engine_line(&SessionEvent::AwaitResponse { index: 0, t0: 0.0 }.to_line());
        hub.on_ui_message(1, response(1));
        hub.on_ui_message(1, response(0));
        hub.on_ui_message(1, response(0));
        let to_engine: Vec<String> = erx.try_iter().collect();
        assert_eq!(to_engine.len(), 1);
        let ui: Vec<String> = urx.try_iter().collect();
        assert_eq!(ui.iter().filter(|l| l.contains("\"accepted\"")).count(), 1);
        assert_eq!(ui.iter().filter(|l| l.contains("\"rejected\"")).count(), 3);
    }

    #[test]
    fn replay_history_resets_per_session() {
        let (mut hub, _erx, _urx) = hub_with_peers();
        hub.on_engine_line(&SessionEvent::TrialStart { index: 0, total: 1 }.to_line());
        hub.on_engine_line(&SessionEvent::AwaitResponse { index: 0, t0: 1.0 }.to_line());
        assert_eq!(hub.history.len(), 2);
        hub.on_engine_line(&SessionEvent::TrialStart { index: 0, total: 1 }.to_line());
        assert_eq!(hub.history.len(), 1);
    }
}
