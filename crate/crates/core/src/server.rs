//! Threaded WebSocket stream server and blocking client.
//!
//! Ingest, tick and broadcast are decoupled by freshest-value cells; the
//! tick thread never waits on a socket.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tungstenite::{Message as WsMessage, WebSocket};

use crate::kinematics::ACTION_DIM;
use crate::protocol::{
    monotonic_micros, ControlMsg, EchoTransport, LatencyEcho, Message, ObjectRecord, ProtocolError, StateFrame,
    TeleopFrame, DEFAULT_PORT,
};

const POLL: Duration = Duration::from_micros(500);

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("invalid server config: {0}")]
    Config(String),
    #[error("websocket: {0}")]
    Ws(#[from] tungstenite::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerConfig {
    pub bind: String,
    pub tick_hz: f64,
    pub teleop_hz_expected: f64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            bind: format!("127.0.0.1:{DEFAULT_PORT}"),
            tick_hz: 120.0,
            teleop_hz_expected: 90.0,
        }
    }
}

/// Simulation-side output published after each tick.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSnapshot {
    pub joint_state: [f32; ACTION_DIM],
    pub ee_poses: [[f32; 7]; 2],
    pub objects: Vec<ObjectRecord>,
}

impl Default for StateSnapshot {
    fn default() -> Self {
        StateSnapshot {
            joint_state: [0.0; ACTION_DIM],
            ee_poses: [[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]; 2],
            objects: Vec::new(),
        }
    }
}

/// Receives at most one (the freshest) teleop frame per tick.
pub trait TickSink: Send + 'static {
    fn tick(&mut self, frame: Option<&TeleopFrame>, controls: &[ControlMsg], now_micros: u64) -> StateSnapshot;
}

impl<F> TickSink for F
where
    F: FnMut(Option<&TeleopFrame>, &[ControlMsg], u64) -> StateSnapshot + Send + 'static,
{
    fn tick(&mut self, frame: Option<&TeleopFrame>, controls: &[ControlMsg], now_micros: u64) -> StateSnapshot {
        self(frame, controls, now_micros)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teleop,
    Observer,
}

#[derive(Debug)]
struct ConnCounters {
    id: u64,
    peer: String,
    role: Role,
    open: AtomicBool,
    received: AtomicU64,
    dropped: AtomicU64,
    out_of_order: AtomicU64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionStats {
    pub id: u64,
    pub peer: String,
    pub role: Role,
    pub open: bool,
    pub received: u64,
    pub dropped: u64,
    pub out_of_order: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerStats {
    pub ticks: u64,
    /// Teleop frames handed to the sink.
    pub consumed: u64,
    pub echo_seq: u32,
    pub connections: Vec<ConnectionStats>,
}

#[derive(Default)]
struct Ingest {
    slot: Option<TeleopFrame>,
    last_seen: Option<u32>,
}

#[derive(Default)]
struct Shared {
    ingest: Mutex<Ingest>,
    controls: Mutex<Vec<ControlMsg>>,
    state: Mutex<Arc<Vec<u8>>>,
    state_version: AtomicU64,
    conns: Mutex<Vec<Arc<ConnCounters>>>,
    teleop_active: AtomicBool,
    ticks: AtomicU64,
    consumed: AtomicU64,
    echo_seq: AtomicU64,
    stop: AtomicBool,
}

impl Shared {
    /// Freshest-wins handoff; frames with seq ≤ last seen are discarded.
    fn offer(&self, frame: TeleopFrame, counters: &ConnCounters) {
        let mut g = self.ingest.lock().unwrap();
        if g.last_seen.is_some_and(|last| frame.seq <= last) {
            counters.out_of_order.fetch_add(1, Ordering::Relaxed);
            return;
        }
        g.last_seen = Some(frame.seq);
        if g.slot.replace(frame).is_some() {
            counters.dropped.fetch_add(1, Ordering::Relaxed);
        }
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("ws://{}", self.addr)
    }

    pub fn stats(&self) -> ServerStats {
        let s = &self.shared;
        let connections = s
            .conns
            .lock()
            .unwrap()
            .iter()
            .map(|c| ConnectionStats {
                id: c.id,
                peer: c.peer.clone(),
                role: c.role,
                open: c.open.load(Ordering::Relaxed),
                received: c.received.load(Ordering::Relaxed),
                dropped: c.dropped.load(Ordering::Relaxed),
                out_of_order: c.out_of_order.load(Ordering::Relaxed),
            })
            .collect();
        ServerStats {
            ticks: s.ticks.load(Ordering::Relaxed),
            consumed: s.consumed.load(Ordering::Relaxed),
            echo_seq: s.echo_seq.load(Ordering::Relaxed) as u32,
            connections,
        }
    }

    pub fn shutdown(mut self) -> ServerStats {
        self.stop_threads();
        self.stats()
    }

    fn stop_threads(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_threads();
    }
}

/// Binds, then spawns the accept and tick threads.
pub fn stream_server<S: TickSink>(cfg: &ServerConfig, sink: S) -> Result<ServerHandle, ServerError> {
    if !(cfg.tick_hz > 0.0 && cfg.tick_hz.is_finite()) {
        return Err(ServerError::Config(format!("tick_hz must be positive, got {}", cfg.tick_hz)));
    }
    let listener = TcpListener::bind(&cfg.bind).map_err(|source| ServerError::Bind {
        addr: cfg.bind.clone(),
        source,
    })?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared::default());
    *shared.state.lock().unwrap() = Arc::new(Vec::new());

    let period = Duration::from_secs_f64(1.0 / cfg.tick_hz);
    let tick = {
        let shared = shared.clone();
        std::thread::Builder::new()
            .name("mirrorlink-tick".into())
            .spawn(move || tick_loop(&shared, sink, period))?
    };
    let accept = {
        let shared = shared.clone();
        std::thread::Builder::new()
            .name("mirrorlink-accept".into())
            .spawn(move || accept_loop(&shared, listener))?
    };
    log::info!("stream server listening on {addr}, tick {} Hz", cfg.tick_hz);
    Ok(ServerHandle {
        addr,
        shared,
        threads: vec![tick, accept],
    })
}

fn tick_loop<S: TickSink>(shared: &Shared, mut sink: S, period: Duration) {
    let start = Instant::now();
    let mut k: u64 = 0;
    while !shared.stop.load(Ordering::Relaxed) {
        let frame = shared.ingest.lock().unwrap().slot.take();
        let controls = std::mem::take(&mut *shared.controls.lock().unwrap());
        if let Some(f) = &frame {
            shared.consumed.fetch_add(1, Ordering::Relaxed);
            shared.echo_seq.store(f.seq as u64, Ordering::Relaxed);
        }
        let now = monotonic_micros();
        let snap = sink.tick(frame.as_ref(), &controls, now);
        let state = StateFrame {
            seq: k as u32,
            timestamp_micros: now,
            echo_seq: shared.echo_seq.load(Ordering::Relaxed) as u32,
            joint_state: snap.joint_state,
            ee_poses: snap.ee_poses,
            objects: snap.objects,
        };
        *shared.state.lock().unwrap() = Arc::new(state.encode());
        shared.state_version.fetch_add(1, Ordering::Release);
        shared.ticks.fetch_add(1, Ordering::Relaxed);

        // Absolute schedule; overruns skip ticks instead of bursting.
        k += 1;
        let mut next = start + period.mul_f64(k as f64);
        let now = Instant::now();
        while next < now {
            k += 1;
            next = start + period.mul_f64(k as f64);
        }
        std::thread::sleep(next - now);
    }
}

fn accept_loop(shared: &Arc<Shared>, listener: TcpListener) {
    let mut next_id = 0u64;
    let mut workers: Vec<JoinHandle<()>> = Vec::new();
    while !shared.stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let role = if shared.teleop_active.swap(true, Ordering::SeqCst) {
                    Role::Observer
                } else {
                    shared.ingest.lock().unwrap().last_seen = None;
                    Role::Teleop
                };
                let counters = Arc::new(ConnCounters {
                    id: next_id,
                    peer: peer.to_string(),
                    role,
                    open: AtomicBool::new(true),
                    received: AtomicU64::new(0),
                    dropped: AtomicU64::new(0),
                    out_of_order: AtomicU64::new(0),
                });
                next_id += 1;
                shared.conns.lock().unwrap().push(counters.clone());
                let shared = shared.clone();
                workers.push(std::thread::spawn(move || {
                    if let Err(e) = serve_connection(&shared, stream, &counters) {
                        log::debug!("connection {} closed: {e}", counters.id);
                    }
                    counters.open.store(false, Ordering::Relaxed);
                    if counters.role == Role::Teleop {
                        shared.teleop_active.store(false, Ordering::SeqCst);
                    }
                }));
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(2)),
            Err(e) => log::warn!("accept failed: {e}"),
        }
        workers.retain(|w| !w.is_finished());
    }
    for w in workers {
        let _ = w.join();
    }
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut))
}

fn serve_connection(shared: &Shared, stream: TcpStream, counters: &ConnCounters) -> Result<(), ServerError> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let mut ws = tungstenite::accept(stream).map_err(|e| ServerError::Config(format!("handshake failed: {e}")))?;
    ws.get_ref().set_read_timeout(Some(POLL))?;
    let mut sent_version = 0u64;
    while !shared.stop.load(Ordering::Relaxed) {
        match ws.read() {
            Ok(WsMessage::Binary(bytes)) => handle_binary(shared, &mut ws, &bytes, counters)?,
            Ok(WsMessage::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(e) if is_timeout(&e) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(e.into()),
        }
        let v = shared.state_version.load(Ordering::Acquire);
        if v != sent_version {
            sent_version = v;
            let bytes = shared.state.lock().unwrap().clone();
            ws.send(WsMessage::binary((*bytes).clone()))?;
        }
    }
    let _ = ws.close(None);
    Ok(())
}

fn handle_binary(
    shared: &Shared,
    ws: &mut WebSocket<TcpStream>,
    bytes: &[u8],
    counters: &ConnCounters,
) -> Result<(), ServerError> {
    // Decode errors close this connection only.
    match Message::decode(bytes)? {
        Message::Teleop(frame) => {
            counters.received.fetch_add(1, Ordering::Relaxed);
            if counters.role == Role::Teleop {
                shared.offer(frame, counters);
            } else {
                counters.dropped.fetch_add(1, Ordering::Relaxed);
            }
        }
        Message::LatencyEcho(_) => ws.send(WsMessage::binary(bytes.to_vec()))?,
        Message::Control(c) => {
            if counters.role == Role::Teleop {
                shared.controls.lock().unwrap().push(c);
            }
        }
        Message::State(_) => {}
    }
    Ok(())
}

/// Blocking client used by tests, the CLI and desktop teleop senders.
pub struct TeleopClient {
    ws: WebSocket<tungstenite::stream::MaybeTlsStream<TcpStream>>,
    next_control_seq: u32,
}

impl TeleopClient {
    pub fn connect(url: &str) -> Result<Self, ServerError> {
        let (ws, _) = tungstenite::connect(url)?;
        if let tungstenite::stream::MaybeTlsStream::Plain(s) = ws.get_ref() {
            s.set_nodelay(true)?;
        }
        Ok(TeleopClient { ws, next_control_seq: 0 })
    }

    fn tcp(&self) -> &TcpStream {
        match self.ws.get_ref() {
            tungstenite::stream::MaybeTlsStream::Plain(s) => s,
            _ => unreachable!("only plain ws:// is supported"),
        }
    }

    pub fn send_raw(&mut self, bytes: Vec<u8>) -> Result<(), ServerError> {
        self.ws.send(WsMessage::binary(bytes))?;
        Ok(())
    }

    pub fn send_frame(&mut self, frame: &TeleopFrame) -> Result<(), ServerError> {
        self.send_raw(frame.encode())
    }

    pub fn send_control(&mut self, msg: &ControlMsg) -> Result<(), ServerError> {
        self.next_control_seq += 1;
        self.send_raw(msg.encode(self.next_control_seq, monotonic_micros()))
    }

    pub fn send_latency_probe(&mut self, probe: &LatencyEcho) -> Result<(), ServerError> {
        self.send_raw(probe.encode())
    }

    /// Next binary payload, or `None` on timeout.
    pub fn recv_bytes(&mut self, timeout: Duration) -> Result<Option<Vec<u8>>, ServerError> {
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now()).max(Duration::from_micros(50));
            self.tcp().set_read_timeout(Some(left))?;
            match self.ws.read() {
                Ok(WsMessage::Binary(b)) => return Ok(Some(b.to_vec())),
                Ok(WsMessage::Close(_)) => return Err(tungstenite::Error::ConnectionClosed.into()),
                Ok(_) => {}
                Err(e) if is_timeout(&e) => {}
                Err(e) => return Err(e.into()),
            }
            if Instant::now() >= deadline {
                return Ok(None);
            }
        }
    }

    pub fn recv(&mut self, timeout: Duration) -> Result<Option<Message>, ServerError> {
        match self.recv_bytes(timeout)? {
            Some(b) => Ok(Some(Message::decode(&b)?)),
            None => Ok(None),
        }
    }

    /// Next state frame, skipping other message types.
    pub fn recv_state(&mut self, timeout: Duration) -> Result<Option<StateFrame>, ServerError> {
        let deadline = Instant::now() + timeout;
        while let Some(m) = self.recv(deadline.saturating_duration_since(Instant::now()))? {
            if let Message::State(s) = m {
                return Ok(Some(s));
            }
        }
        Ok(None)
    }

    pub fn close(mut self) {
        let _ = self.ws.close(None);
        let _ = self.ws.flush();
    }
}

impl EchoTransport for TeleopClient {
    fn send(&mut self, bytes: &[u8]) -> std::io::Result<()> {
        self.send_raw(bytes.to_vec()).map_err(std::io::Error::other)
    }

    fn recv(&mut self, timeout: Duration) -> std::io::Result<Option<Vec<u8>>> {
        self.recv_bytes(timeout).map_err(std::io::Error::other)
    }
}
