//! Policies, temporal ensembling and the closed inference loop.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::PoseSE3;
use crate::kinematics::{ActionVector26, ACTION_DIM};
use crate::motion_filter::{DualArmFilter, FilterConfig};
use crate::oracle::{self, OraclePlan};
use crate::protocol::ObjectRecord;
use crate::recorder::FrameRecord;
use crate::scene::{Scene, SuccessReport};

pub const DEFAULT_CHUNK_EVERY: u64 = 8;
pub const DEFAULT_HORIZON: usize = 16;
pub const DEFAULT_DECAY: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("policy did not answer in time")]
    Timeout,
    #[error("policy protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("no prediction covers tick {0}")]
    NoPredictionAvailable(u64),
    #[error("chunk starting at {got} arrived after one starting at {last}")]
    OutOfOrderChunk { last: u64, got: u64 },
    #[error("empty action chunk")]
    EmptyChunk,
}

/// Structured snapshot handed to a policy; all fields come from one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub tick_index: u64,
    pub instruction: String,
    pub joint_state: ActionVector26,
    pub ee_poses: [PoseSE3; 2],
    pub object_poses: Vec<ObjectRecord>,
}

impl Observation {
    pub fn from_scene(scene: &Scene) -> Self {
        Observation {
            tick_index: scene.tick,
            instruction: scene.manifest.instruction.clone(),
            joint_state: scene.joints,
            ee_poses: scene.ee,
            object_poses: scene.object_records(),
        }
    }

    pub fn to_wire(&self) -> ObservationWire {
        ObservationWire {
            tick_index: self.tick_index,
            instruction: self.instruction.clone(),
            joint_state: self.joint_state.0.to_vec(),
            ee_poses: self.ee_poses.iter().map(|p| p.to_array().to_vec()).collect(),
            object_poses: self
                .object_poses
                .iter()
                .map(|o| WireObject {
                    id: o.id,
                    pose: o.pose.iter().map(|&v| v as f64).collect(),
                })
                .collect(),
            image_blob: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireObject {
    pub id: u16,
    pub pose: Vec<f64>,
}

/// External policy request body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ObservationWire {
    pub tick_index: u64,
    pub instruction: String,
    pub joint_state: Vec<f64>,
    pub ee_poses: Vec<Vec<f64>>,
    pub object_poses: Vec<WireObject>,
    /// Reserved for rendered observations.
    #[serde(default)]
    pub image_blob: Option<String>,
}

/// External policy response body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChunkWire {
    pub start_tick: u64,
    pub actions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    pub start_tick: u64,
    pub actions: Vec<ActionVector26>,
}

impl ActionChunk {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn covers(&self, tick: u64) -> bool {
        tick >= self.start_tick && tick < self.start_tick + self.actions.len() as u64
    }

    pub fn at(&self, tick: u64) -> Option<&ActionVector26> {
        self.covers(tick).then(|| &self.actions[(tick - self.start_tick) as usize])
    }

    pub fn to_wire(&self) -> ChunkWire {
        ChunkWire {
            start_tick: self.start_tick,
            actions: self.actions.iter().map(|a| a.0.to_vec()).collect(),
        }
    }

    pub fn from_wire(w: ChunkWire) -> Result<Self, PolicyError> {
        if w.actions.is_empty() {
            return Err(PolicyError::Protocol("empty action chunk".into()));
        }
        let actions = w
            .actions
            .into_iter()
            .enumerate()
            .map(|(i, a)| {
                let arr: [f64; ACTION_DIM] = a
                    .try_into()
                    .map_err(|a: Vec<f64>| PolicyError::Protocol(format!("action {i} has {} values", a.len())))?;
                if arr.iter().all(|v| v.is_finite()) {
                    Ok(ActionVector26(arr))
                } else {
                    Err(PolicyError::Protocol(format!("action {i} is not finite")))
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(ActionChunk {
            start_tick: w.start_tick,
            actions,
        })
    }
}

/// Weighted mean of `preds` (oldest first) under weights `w`, clamped to the
/// componentwise hull so rounding never escapes it.
pub fn ensemble_with_weights(preds: &[ActionVector26], w: &[f64]) -> Option<ActionVector26> {
    let base = preds.first()?;
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut out = *base;
    for j in 0..ACTION_DIM {
        let (mut lo, mut hi, mut acc) = (base.0[j], base.0[j], 0.0);
        for (p, wk) in preds.iter().zip(w) {
            lo = lo.min(p.0[j]);
            hi = hi.max(p.0[j]);
            acc += wk * (p.0[j] - base.0[j]);
        }
        out.0[j] = (base.0[j] + acc / total).clamp(lo, hi);
    }
    Some(out)
}

/// Ensemble with `w_k = exp(-m k)`, `k = 0` for the oldest prediction.
pub fn ensemble(preds: &[ActionVector26], decay: f64) -> Option<ActionVector26> {
    let w: Vec<f64> = (0..preds.len()).map(|k| (-decay * k as f64).exp()).collect();
    ensemble_with_weights(preds, &w)
}

/// Buffer of overlapping chunks in arrival order.
#[derive(Debug, Clone)]
pub struct TemporalEnsembler {
    pub decay: f64,
    chunks: VecDeque<ActionChunk>,
}

impl TemporalEnsembler {
    pub fn new(decay: f64) -> Self {
        assert!(decay >= 0.0, "decay must be non-negative");
        TemporalEnsembler {
            decay,
            chunks: VecDeque::new(),
        }
    }

    pub fn push(&mut self, chunk: ActionChunk) -> Result<(), EnsembleError> {
        if chunk.actions.is_empty() {
            return Err(EnsembleError::EmptyChunk);
        }
        if let Some(last) = self.chunks.back().filter(|c| chunk.start_tick < c.start_tick) {
            return Err(EnsembleError::OutOfOrderChunk {
                last: last.start_tick,
                got: chunk.start_tick,
            });
        }
        self.chunks.push_back(chunk);
        Ok(())
    }

    /// Number of buffered chunks predicting `tick`.
    pub fn coverage(&self, tick: u64) -> usize {
        self.chunks.iter().filter(|c| c.covers(tick)).count()
    }

    /// Ensembled action for `tick`; chunks ending before `tick` are dropped.
    pub fn step(&mut self, tick: u64) -> Result<ActionVector26, EnsembleError> {
        self.chunks.retain(|c| c.start_tick + c.actions.len() as u64 > tick);
        let preds: Vec<ActionVector26> = self.chunks.iter().filter_map(|c| c.at(tick).copied()).collect();
        ensemble(&preds, self.decay).ok_or(EnsembleError::NoPredictionAvailable(tick))
    }
}

pub trait Policy: Send {
    fn name(&self) -> String;
    /// Called once with the freshly reset scene.
    fn reset(&mut self, scene: &Scene) -> Result<(), PolicyError>;
    fn infer(&mut self, obs: &Observation) -> Result<ActionChunk, PolicyError>;
}

/// Always predicts the all-zero action.
#[derive(Debug, Clone)]
pub struct NullPolicy {
    pub horizon: usize,
}

impl Policy for NullPolicy {
    fn name(&self) -> String {
        "null".into()
    }
    fn reset(&mut self, _: &Scene) -> Result<(), PolicyError> {
        Ok(())
    }
    fn infer(&mut self, obs: &Observation) -> Result<ActionChunk, PolicyError> {
        Ok(ActionChunk {
            start_tick: obs.tick_index + 1,
            actions: vec![ActionVector26::default(); self.horizon.max(1)],
        })
    }
}

/// Serves slices of the scripted demonstration.
#[derive(Debug, Clone)]
pub struct OraclePolicy {
    pub horizon: usize,
    plan: Option<OraclePlan>,
}

impl OraclePolicy {
    pub fn new(horizon: usize) -> Self {
        OraclePolicy {
            horizon: horizon.max(1),
            plan: None,
        }
    }
}

impl Policy for OraclePolicy {
    fn name(&self) -> String {
        "oracle".into()
    }
    fn reset(&mut self, scene: &Scene) -> Result<(), PolicyError> {
        self.plan = Some(oracle::plan(scene).map_err(|e| PolicyError::Protocol(e.to_string()))?);
        Ok(())
    }
    fn infer(&mut self, obs: &Observation) -> Result<ActionChunk, PolicyError> {
        let plan = self
            .plan
            .as_ref()
            .ok_or_else(|| PolicyError::Protocol("oracle used before reset".into()))?;
        let start = obs.tick_index + 1;
        Ok(ActionChunk {
            start_tick: start,
            actions: (start..start + self.horizon as u64).map(|t| plan.action(t)).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub chunk_every: u64,
    /// Defaults to the manifest's tick budget.
    pub max_ticks: Option<u64>,
    pub decay: f64,
    pub filter: FilterConfig,
    pub record: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            chunk_every: DEFAULT_CHUNK_EVERY,
            max_ticks: None,
            decay: DEFAULT_DECAY,
            filter: FilterConfig::default(),
            record: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoopOutcome {
    pub success: bool,
    pub ticks: u64,
    pub requests: u64,
    pub timeouts: u64,
    /// Fatal policy error; the trial counts as failed.
    pub error: Option<String>,
    pub report: SuccessReport,
    /// Filled when `LoopConfig::record` is set.
    pub frames: Vec<FrameRecord>,
}

/// Runs `policy` on `scene` until success or the tick budget. Every tick
/// executes the ensembled prediction, or holds the last executed command,
/// through the motion-filter cascade.
pub fn run_closed_loop(scene: &mut Scene, policy: &mut dyn Policy, cfg: &LoopConfig) -> LoopOutcome {
    let max_ticks = cfg.max_ticks.unwrap_or(scene.manifest.max_ticks);
    let chunk_every = cfg.chunk_every.max(1);
    let mut out = LoopOutcome {
        success: false,
        ticks: 0,
        requests: 0,
        timeouts: 0,
        error: None,
        report: scene.evaluate_success(),
        frames: Vec::new(),
    };
    if let Err(e) = policy.reset(scene) {
        out.error = Some(e.to_string());
        return out;
    }
    let mut filter = DualArmFilter::new((*scene.model).clone(), scene.joints, cfg.filter.clone());
    let mut ens = TemporalEnsembler::new(cfg.decay);
    let mut held = scene.joints;
    let start = scene.tick;
    while scene.tick - start < max_ticks {
        if (scene.tick - start) % chunk_every == 0 {
            out.requests += 1;
            match policy.infer(&Observation::from_scene(scene)) {
                Ok(chunk) => {
                    if let Err(e) = ens.push(chunk) {
                        out.error = Some(e.to_string());
                        break;
                    }
                }
                Err(PolicyError::Timeout) => out.timeouts += 1,
                Err(e) => {
                    out.error = Some(e.to_string());
                    break;
                }
            }
        }
        let cmd = ens.step(scene.tick + 1).unwrap_or(held);
        let report = filter.step_joint(&cmd);
        let exec = report.action.quantized();
        held = exec;
        scene.step(&exec);
        if cfg.record {
            out.frames.push(FrameRecord::capture(scene, &exec, report.outcome_byte()));
        }
        if scene.evaluate_success().success {
            break;
        }
    }
    out.ticks = scene.tick - start;
    out.report = scene.evaluate_success();
    out.success = out.error.is_none() && out.report.success;
    out
}

#[cfg(feature = "net")]
pub use external::{ExternalPolicy, PolicyReply, PolicyServer};

#[cfg(feature = "net")]
mod external {
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicBool, Ordering};
    use std::sync::Arc;
    use std::thread::JoinHandle;
    use std::time::{Duration, Instant};

    use tungstenite::Message as WsMessage;

    use super::*;
    use crate::protocol::{control_payload, encode_control_payload, monotonic_micros, peek_header};
    use crate::server::{ServerError, TeleopClient};

    /// Policy served by another process over the control channel; one
    /// request is outstanding at a time and replies are matched by seq.
    pub struct ExternalPolicy {
        url: String,
        client: TeleopClient,
        timeout: Duration,
        seq: u32,
    }

    impl ExternalPolicy {
        pub fn connect(addr: &str, timeout: Duration) -> Result<Self, PolicyError> {
            let url = if addr.starts_with("ws://") {
                addr.to_string()
            } else {
                format!("ws://{addr}")
            };
            let client = TeleopClient::connect(&url).map_err(|e| PolicyError::Protocol(format!("connect {url}: {e}")))?;
            Ok(ExternalPolicy {
                url,
                client,
                timeout,
                seq: 0,
            })
        }
    }

    fn proto(e: impl std::fmt::Display) -> PolicyError {
        PolicyError::Protocol(e.to_string())
    }

    impl Policy for ExternalPolicy {
        fn name(&self) -> String {
            format!("external:{}", self.url)
        }

        fn reset(&mut self, _: &Scene) -> Result<(), PolicyError> {
            Ok(())
        }

        fn infer(&mut self, obs: &Observation) -> Result<ActionChunk, PolicyError> {
            self.seq = self.seq.wrapping_add(1);
            let body = serde_json::to_vec(&obs.to_wire()).map_err(proto)?;
            self.client
                .send_raw(encode_control_payload(&body, self.seq, monotonic_micros()))
                .map_err(proto)?;
            let deadline = Instant::now() + self.timeout;
            loop {
                let left = deadline.saturating_duration_since(Instant::now());
                if left.is_zero() {
                    return Err(PolicyError::Timeout);
                }
                let Some(bytes) = self.client.recv_bytes(left).map_err(proto)? else {
                    return Err(PolicyError::Timeout);
                };
                // Late replies to abandoned requests are skipped.
                if peek_header(&bytes).map_err(proto)?.seq != self.seq {
                    continue;
                }
                let wire: ChunkWire = serde_json::from_slice(control_payload(&bytes).map_err(proto)?).map_err(proto)?;
                return ActionChunk::from_wire(wire);
            }
        }
    }

    /// What a served policy answers to one request.
    #[derive(Debug, Clone)]
    pub enum PolicyReply {
        Chunk(ChunkWire),
        /// Sent verbatim as the JSON payload.
        Raw(String),
        Silent,
    }

    /// Minimal policy endpoint speaking the external wire protocol.
    pub struct PolicyServer {
        addr: std::net::SocketAddr,
        stop: Arc<AtomicBool>,
        thread: Option<JoinHandle<()>>,
    }

    impl PolicyServer {
        pub fn spawn<F>(bind: &str, handler: F) -> Result<Self, ServerError>
        where
            F: Fn(&ObservationWire) -> PolicyReply + Send + Sync + 'static,
        {
            let listener = TcpListener::bind(bind).map_err(|source| ServerError::Bind {
                addr: bind.to_string(),
                source,
            })?;
            listener.set_nonblocking(true)?;
            let addr = listener.local_addr()?;
            let stop = Arc::new(AtomicBool::new(false));
            let handler = Arc::new(handler);
            let flag = stop.clone();
            let thread = std::thread::spawn(move || {
                while !flag.load(Ordering::Relaxed) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            let (h, f) = (handler.clone(), flag.clone());
                            std::thread::spawn(move || serve_conn(stream, &*h, &f));
                        }
                        Err(_) => std::thread::sleep(Duration::from_millis(2)),
                    }
                }
            });
            Ok(PolicyServer {
                addr,
                stop,
                thread: Some(thread),
            })
        }

        pub fn addr(&self) -> String {
            self.addr.to_string()
        }
    }

    fn serve_conn(stream: std::net::TcpStream, handler: &dyn Fn(&ObservationWire) -> PolicyReply, stop: &AtomicBool) {
        let _ = stream.set_nonblocking(false);
        let _ = stream.set_nodelay(true);
        let Ok(mut ws) = tungstenite::accept(stream) else { return };
        let _ = ws.get_ref().set_read_timeout(Some(Duration::from_millis(20)));
        while !stop.load(Ordering::Relaxed) {
            let bytes = match ws.read() {
                Ok(WsMessage::Binary(b)) => b,
                Ok(WsMessage::Close(_)) => return,
                Ok(_) => continue,
                Err(tungstenite::Error::Io(e))
                    if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) =>
                {
                    continue
                }
                Err(_) => return,
            };
            let Ok(h) = peek_header(&bytes) else { return };
            let Some(obs) = control_payload(&bytes)
                .ok()
                .and_then(|p| serde_json::from_slice::<ObservationWire>(p).ok())
            else {
                return;
            };
            let json = match handler(&obs) {
                PolicyReply::Chunk(c) => serde_json::to_vec(&c).expect("chunk serializes"),
                PolicyReply::Raw(s) => s.into_bytes(),
                PolicyReply::Silent => continue,
            };
            if ws
                .send(WsMessage::binary(encode_control_payload(&json, h.seq, monotonic_micros())))
                .is_err()
            {
                return;
            }
        }
    }

    impl Drop for PolicyServer {
        fn drop(&mut self) {
            self.stop.store(true, Ordering::Relaxed);
            if let Some(t) = self.thread.take() {
                let _ = t.join();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::TaskId;

    fn splat(v: f64) -> ActionVector26 {
        ActionVector26([v; ACTION_DIM])
    }

    #[test]
    fn worked_examples() {
        let a = splat(0.37);
        assert_eq!(ensemble(&[a, a, a], 0.8), Some(a));
        assert_eq!(ensemble(&[splat(0.0), splat(1.0)], 0.0), Some(splat(0.5)));
        assert_eq!(ensemble(&[splat(0.0), splat(1.0)], std::f64::consts::LN_2), Some(splat(1.0 / 3.0)));
    }

    #[test]
    fn ensembler_reports_gaps_and_order() {
        let mut e = TemporalEnsembler::new(0.1);
        assert_eq!(e.step(1), Err(EnsembleError::NoPredictionAvailable(1)));
        e.push(ActionChunk { start_tick: 5, actions: vec![splat(1.0); 4] }).unwrap();
        assert!(matches!(
            e.push(ActionChunk { start_tick: 4, actions: vec![splat(1.0)] }),
            Err(EnsembleError::OutOfOrderChunk { .. })
        ));
        assert_eq!(e.step(5), Ok(splat(1.0)));
        assert!(e.step(9).is_err());
    }

    #[test]
    fn overlapping_chunks_cover_every_tick_after_warmup() {
        let mut e = TemporalEnsembler::new(0.1);
        for t in 0..200u64 {
            if t % DEFAULT_CHUNK_EVERY == 0 {
                e.push(ActionChunk {
                    start_tick: t + 1,
                    actions: vec![splat(0.0); DEFAULT_HORIZON],
                })
                .unwrap();
            }
            if t >= DEFAULT_CHUNK_EVERY {
                assert!(e.coverage(t + 1) >= 2, "tick {}", t + 1);
            }
            e.step(t + 1).unwrap();
        }
    }

    #[test]
    fn oracle_closes_the_loop() {
        let mut s = Scene::reset_task(TaskId::CanStacking, 3);
        let out = run_closed_loop(&mut s, &mut OraclePolicy::new(DEFAULT_HORIZON), &LoopConfig::default());
        assert!(out.success, "{:?}", out.report);
    }

    #[test]
    fn null_policy_fails_quietly() {
        let mut s = Scene::reset_task(TaskId::KitchenCleanup, 3);
        let out = run_closed_loop(&mut s, &mut NullPolicy { horizon: 16 }, &LoopConfig::default());
        assert!(!out.success);
        assert!(out.error.is_none());
        assert_eq!(out.ticks, s.manifest.max_ticks);
    }

    #[test]
    fn malformed_chunks_are_protocol_errors() {
        let short = ChunkWire { start_tick: 1, actions: vec![vec![0.0; 3]] };
        assert!(matches!(ActionChunk::from_wire(short), Err(PolicyError::Protocol(_))));
        let empty = ChunkWire { start_tick: 1, actions: vec![] };
        assert!(ActionChunk::from_wire(empty).is_err());
    }
}
