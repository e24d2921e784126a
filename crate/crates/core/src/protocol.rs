//! Little-endian binary wire format shared by teleop clients, the server
//! and external policy processes.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{PoseSE3, Quaternion, Vec3};
use crate::kinematics::{ACTION_DIM, HAND_DOF};
use crate::motion_filter::HandInput;

pub const MAGIC: [u8; 4] = *b"RMTP";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 18;
pub const HAND_BLOCK_LEN: usize = 53;
pub const TELEOP_FRAME_LEN: usize = HEADER_LEN + 2 * HAND_BLOCK_LEN;
pub const STATE_FIXED_LEN: usize = HEADER_LEN + 4 + 4 * ACTION_DIM + 4 * 14 + 2;
pub const OBJECT_RECORD_LEN: usize = 2 + 4 * 7;
pub const DEFAULT_PORT: u16 = 8765;

pub const FLAG_CLUTCH: u8 = 1 << 0;
pub const FLAG_EPISODE_START: u8 = 1 << 1;
pub const FLAG_EPISODE_END: u8 = 1 << 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Teleop = 0x01,
    State = 0x02,
    LatencyEcho = 0x03,
    Control = 0x04,
}

impl MsgType {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0x01 => Some(MsgType::Teleop),
            0x02 => Some(MsgType::State),
            0x03 => Some(MsgType::LatencyEcho),
            0x04 => Some(MsgType::Control),
            _ => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated frame: need {expected} bytes, got {actual}")]
    TruncatedFrame { expected: usize, actual: usize },
    #[error("wrong message type 0x{actual:02x}, expected 0x{expected:02x}")]
    WrongType { expected: u8, actual: u8 },
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("oversized frame: expected {expected} bytes, got {actual}")]
    OversizedFrame { expected: usize, actual: usize },
    #[error("invalid payload: {0}")]
    InvalidPayload(String),
}

/// Microseconds since the first call in this process, from a monotonic clock.
pub fn monotonic_micros() -> u64 {
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    EPOCH.get_or_init(Instant::now).elapsed().as_micros() as u64
}

struct Writer(Vec<u8>);

impl Writer {
    fn with_header(kind: MsgType, seq: u32, ts: u64, capacity: usize) -> Self {
        let mut v = Vec::with_capacity(capacity);
        v.extend_from_slice(&MAGIC);
        v.push(VERSION);
        v.push(kind as u8);
        v.extend_from_slice(&seq.to_le_bytes());
        v.extend_from_slice(&ts.to_le_bytes());
        Writer(v)
    }

    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

/// Cursor over a buffer whose length has already been checked.
struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out = self.buf[self.at..self.at + N].try_into().unwrap();
        self.at += N;
        out
    }

    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }

    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }

    fn f32s<const N: usize>(&mut self) -> [f32; N] {
        std::array::from_fn(|_| f32::from_le_bytes(self.take()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Header {
    pub kind: MsgType,
    pub seq: u32,
    pub timestamp_micros: u64,
}

/// Validates magic, version and type, returning the header and a reader past it.
fn read_header(bytes: &[u8]) -> Result<(Header, Reader<'_>), ProtocolError> {
    if bytes.len() < 4 {
        return Err(ProtocolError::TruncatedFrame {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(ProtocolError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(ProtocolError::TruncatedFrame {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let mut r = Reader { buf: bytes, at: 4 };
    let version = r.u8();
    if version != VERSION {
        return Err(ProtocolError::UnsupportedVersion(version));
    }
    let t = r.u8();
    let kind = MsgType::from_byte(t).ok_or(ProtocolError::UnknownType(t))?;
    let seq = r.u32();
    let timestamp_micros = r.u64();
    Ok((
        Header {
            kind,
            seq,
            timestamp_micros,
        },
        r,
    ))
}

fn expect_kind(h: &Header, kind: MsgType) -> Result<(), ProtocolError> {
    if h.kind != kind {
        return Err(ProtocolError::WrongType {
            expected: kind as u8,
            actual: h.kind as u8,
        });
    }
    Ok(())
}

fn expect_len(bytes: &[u8], expected: usize) -> Result<(), ProtocolError> {
    use std::cmp::Ordering::*;
    match bytes.len().cmp(&expected) {
        Less => Err(ProtocolError::TruncatedFrame {
            expected,
            actual: bytes.len(),
        }),
        Greater => Err(ProtocolError::OversizedFrame {
            expected,
            actual: bytes.len(),
        }),
        Equal => Ok(()),
    }
}

pub fn peek_header(bytes: &[u8]) -> Result<Header, ProtocolError> {
    read_header(bytes).map(|(h, _)| h)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HandBlock {
    pub position: [f32; 3],
    /// (w, x, y, z); carried raw, normalized only on ingest.
    pub orientation: [f32; 4],
    pub fingers: [f32; HAND_DOF],
    pub flags: u8,
}

impl HandBlock {
    pub fn identity() -> Self {
        HandBlock {
            orientation: [1.0, 0.0, 0.0, 0.0],
            ..HandBlock::default()
        }
    }

    pub fn from_pose(pose: &PoseSE3, fingers: [f32; HAND_DOF], flags: u8) -> Self {
        let p = pose.position;
        let q = pose.orientation.as_wxyz();
        HandBlock {
            position: [p.x as f32, p.y as f32, p.z as f32],
            orientation: q.map(|v| v as f32),
            fingers,
            flags,
        }
    }

    pub fn clutch(&self) -> bool {
        self.flags & FLAG_CLUTCH != 0
    }

    /// Re-normalizes the quaternion and widens to f64.
    pub fn ingest(&self) -> Result<HandInput, ProtocolError> {
        let [w, x, y, z] = self.orientation.map(f64::from);
        let orientation = Quaternion::from_wxyz(w, x, y, z)
            .map_err(|e| ProtocolError::InvalidPayload(e.to_string()))?;
        let [px, py, pz] = self.position.map(f64::from);
        if !(px.is_finite() && py.is_finite() && pz.is_finite()) {
            return Err(ProtocolError::InvalidPayload("non-finite position".into()));
        }
        Ok(HandInput {
            pose: PoseSE3::new(Vec3::new(px, py, pz), orientation),
            fingers: self.fingers.map(f64::from),
            clutch: self.clutch(),
        })
    }

    fn write(&self, w: &mut Writer) {
        w.f32s(&self.position);
        w.f32s(&self.orientation);
        w.f32s(&self.fingers);
        w.u8(self.flags);
    }

    fn read(r: &mut Reader<'_>) -> Self {
        HandBlock {
            position: r.f32s(),
            orientation: r.f32s(),
            fingers: r.f32s(),
            flags: r.u8(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TeleopFrame {
    pub seq: u32,
    pub timestamp_micros: u64,
    /// Left then right.
    pub hands: [HandBlock; 2],
}

impl TeleopFrame {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_header(MsgType::Teleop, self.seq, self.timestamp_micros, TELEOP_FRAME_LEN);
        for h in &self.hands {
            h.write(&mut w);
        }
        debug_assert_eq!(w.0.len(), TELEOP_FRAME_LEN);
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let (h, mut r) = read_header(bytes)?;
        expect_kind(&h, MsgType::Teleop)?;
        expect_len(bytes, TELEOP_FRAME_LEN)?;
        let hands = [HandBlock::read(&mut r), HandBlock::read(&mut r)];
        Ok(TeleopFrame {
            seq: h.seq,
            timestamp_micros: h.timestamp_micros,
            hands,
        })
    }

    pub fn ingest(&self) -> Result<[HandInput; 2], ProtocolError> {
        Ok([self.hands[0].ingest()?, self.hands[1].ingest()?])
    }

    pub fn has_flag(&self, flag: u8) -> bool {
        self.hands.iter().any(|h| h.flags & flag != 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectRecord {
    pub id: u16,
    /// [x, y, z, qw, qx, qy, qz]
    pub pose: [f32; 7],
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateFrame {
    pub seq: u32,
    pub timestamp_micros: u64,
    /// Latest teleop seq consumed by the simulation.
    pub echo_seq: u32,
    pub joint_state: [f32; ACTION_DIM],
    pub ee_poses: [[f32; 7]; 2],
    pub objects: Vec<ObjectRecord>,
}

impl StateFrame {
    pub fn encoded_len(&self) -> usize {
        STATE_FIXED_LEN + OBJECT_RECORD_LEN * self.objects.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_header(MsgType::State, self.seq, self.timestamp_micros, self.encoded_len());
        w.u32(self.echo_seq);
        w.f32s(&self.joint_state);
        for p in &self.ee_poses {
            w.f32s(p);
        }
        w.u16(u16::try_from(self.objects.len()).expect("at most 65535 objects"));
        for o in &self.objects {
            w.u16(o.id);
            w.f32s(&o.pose);
        }
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let (h, mut r) = read_header(bytes)?;
        expect_kind(&h, MsgType::State)?;
        if bytes.len() < STATE_FIXED_LEN {
            return Err(ProtocolError::TruncatedFrame {
                expected: STATE_FIXED_LEN,
                actual: bytes.len(),
            });
        }
        let echo_seq = r.u32();
        let joint_state = r.f32s();
        let ee_poses = [r.f32s(), r.f32s()];
        let n = r.u16() as usize;
        expect_len(bytes, STATE_FIXED_LEN + OBJECT_RECORD_LEN * n)?;
        let objects = (0..n)
            .map(|_| ObjectRecord {
                id: r.u16(),
                pose: r.f32s(),
            })
            .collect();
        Ok(StateFrame {
            seq: h.seq,
            timestamp_micros: h.timestamp_micros,
            echo_seq,
            joint_state,
            ee_poses,
            objects,
        })
    }
}

/// Header-only probe; receivers echo it back unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatencyEcho {
    pub seq: u32,
    pub timestamp_micros: u64,
}

impl LatencyEcho {
    pub fn encode(&self) -> Vec<u8> {
        Writer::with_header(MsgType::LatencyEcho, self.seq, self.timestamp_micros, HEADER_LEN).0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let (h, _) = read_header(bytes)?;
        expect_kind(&h, MsgType::LatencyEcho)?;
        expect_len(bytes, HEADER_LEN)?;
        Ok(LatencyEcho {
            seq: h.seq,
            timestamp_micros: h.timestamp_micros,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ControlMsg {
    #[serde(default)]
    pub reset: bool,
    #[serde(default)]
    pub start_episode: bool,
    #[serde(default)]
    pub end_episode: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
    /// Layout seed applied on reset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ControlMsg {
    pub fn encode(&self, seq: u32, timestamp_micros: u64) -> Vec<u8> {
        let json = serde_json::to_vec(self).expect("control message serializes");
        encode_control_payload(&json, seq, timestamp_micros)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        serde_json::from_slice(control_payload(bytes)?).map_err(|e| ProtocolError::InvalidPayload(e.to_string()))
    }
}

/// Frames an arbitrary JSON document on the control channel.
pub fn encode_control_payload(json: &[u8], seq: u32, timestamp_micros: u64) -> Vec<u8> {
    let mut w = Writer::with_header(MsgType::Control, seq, timestamp_micros, HEADER_LEN + 4 + json.len());
    w.u32(json.len() as u32);
    w.0.extend_from_slice(json);
    w.0
}

/// The JSON bytes carried by a control-channel frame.
pub fn control_payload(bytes: &[u8]) -> Result<&[u8], ProtocolError> {
    let (h, mut r) = read_header(bytes)?;
    expect_kind(&h, MsgType::Control)?;
    if bytes.len() < HEADER_LEN + 4 {
        return Err(ProtocolError::TruncatedFrame {
            expected: HEADER_LEN + 4,
            actual: bytes.len(),
        });
    }
    let n = r.u32() as usize;
    expect_len(bytes, HEADER_LEN + 4 + n)?;
    Ok(&bytes[HEADER_LEN + 4..])
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Teleop(TeleopFrame),
    State(StateFrame),
    LatencyEcho(LatencyEcho),
    Control(ControlMsg),
}

impl Message {
    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        Ok(match peek_header(bytes)?.kind {
            MsgType::Teleop => Message::Teleop(TeleopFrame::decode(bytes)?),
            MsgType::State => Message::State(StateFrame::decode(bytes)?),
            MsgType::LatencyEcho => Message::LatencyEcho(LatencyEcho::decode(bytes)?),
            MsgType::Control => Message::Control(ControlMsg::decode(bytes)?),
        })
    }
}

// ---------------------------------------------------------------------------
// Latency measurement
// ---------------------------------------------------------------------------

pub const LATENCY_WARMUP: usize = 10;

#[derive(Debug, Error)]
pub enum LatencyError {
    #[error("insufficient samples: wanted {wanted}, observed {observed}")]
    InsufficientSamples { wanted: usize, observed: usize },
    #[error("transport: {0}")]
    Transport(#[from] std::io::Error),
}

/// Message-framed duplex channel used by the latency probe.
pub trait EchoTransport {
    fn send(&mut self, bytes: &[u8]) -> std::io::Result<()>;
    /// Next binary message, or `None` when `timeout` elapses first.
    fn recv(&mut self, timeout: Duration) -> std::io::Result<Option<Vec<u8>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub samples: usize,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p99_us: f64,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl LatencyStats {
    pub fn from_samples(mut us: Vec<f64>) -> Option<Self> {
        if us.is_empty() {
            return None;
        }
        us.sort_by(f64::total_cmp);
        Some(LatencyStats {
            samples: us.len(),
            mean_us: us.iter().sum::<f64>() / us.len() as f64,
            p50_us: percentile(&us, 50.0),
            p99_us: percentile(&us, 99.0),
        })
    }
}

/// Sends `n + LATENCY_WARMUP` echo probes one at a time and reports one-way
/// estimates (round trip / 2) for the last `n`.
pub fn measure_latency<T: EchoTransport + ?Sized>(
    transport: &mut T,
    n: usize,
    timeout: Duration,
) -> Result<LatencyStats, LatencyError> {
    let insufficient = |observed| LatencyError::InsufficientSamples { wanted: n, observed };
    if n == 0 {
        return Err(insufficient(0));
    }
    let deadline = Instant::now() + timeout;
    let mut samples = Vec::with_capacity(n);
    for i in 0..(n + LATENCY_WARMUP) {
        let seq = i as u32;
        let sent = monotonic_micros();
        transport.send(&LatencyEcho { seq, timestamp_micros: sent }.encode())?;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(insufficient(samples.len()));
            }
            let Some(msg) = transport.recv(left)? else {
                return Err(insufficient(samples.len()));
            };
            let Ok(echo) = LatencyEcho::decode(&msg) else { continue };
            if echo.seq != seq {
                continue;
            }
            let received = monotonic_micros();
            // A timestamp from the future means the echo was corrupted or skewed.
            if echo.timestamp_micros != sent || received < sent {
                break;
            }
            if i >= LATENCY_WARMUP {
                samples.push((received - sent) as f64 / 2.0);
            }
            break;
        }
    }
    if samples.len() < n {
        return Err(insufficient(samples.len()));
    }
    Ok(LatencyStats::from_samples(samples).expect("n > 0"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_frame() -> TeleopFrame {
        TeleopFrame {
            seq: 0xdead_beef,
            timestamp_micros: 0x0102_0304_0506_0708,
            hands: [
                HandBlock {
                    position: [0.1, -0.2, 1.5],
                    orientation: [0.5, 0.5, -0.5, 0.5],
                    fingers: [0.0, 0.1, 0.2, 0.3, 0.4, 1.0],
                    flags: FLAG_CLUTCH | FLAG_EPISODE_START,
                },
                HandBlock::identity(),
            ],
        }
    }

    #[test]
    fn header_layout() {
        let b = sample_frame().encode();
        assert_eq!(&b[..4], b"RMTP");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 0x01);
        assert_eq!(&b[6..10], &[0xef, 0xbe, 0xad, 0xde]);
        assert_eq!(&b[10..18], &[8, 7, 6, 5, 4, 3, 2, 1]);
        assert_eq!(b[18 + 52], FLAG_CLUTCH | FLAG_EPISODE_START);
    }

    #[test]
    fn identity_hand_bytes() {
        let f = TeleopFrame {
            hands: [HandBlock::identity(); 2],
            ..TeleopFrame::default()
        };
        let b = f.encode();
        assert_eq!(b.len(), 124);
        assert_eq!(&b[18..30], &[0u8; 12]);
        assert_eq!(&b[30..34], &[0x00, 0x00, 0x80, 0x3f]);
        assert_eq!(&b[34..46], &[0u8; 12]);
    }

    #[test]
    fn decode_errors_are_distinct() {
        let good = sample_frame().encode();

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert_eq!(TeleopFrame::decode(&bad), Err(ProtocolError::BadMagic(*b"XXXX")));

        assert_eq!(
            TeleopFrame::decode(&good[..100]),
            Err(ProtocolError::TruncatedFrame {
                expected: 124,
                actual: 100
            })
        );

        let mut v2 = good.clone();
        v2[4] = 2;
        assert_eq!(TeleopFrame::decode(&v2), Err(ProtocolError::UnsupportedVersion(2)));

        let mut wrong = good.clone();
        wrong[5] = 0x02;
        assert_eq!(
            TeleopFrame::decode(&wrong),
            Err(ProtocolError::WrongType {
                expected: 1,
                actual: 2
            })
        );

        let mut long = good;
        long.push(0);
        assert!(matches!(TeleopFrame::decode(&long), Err(ProtocolError::OversizedFrame { .. })));
        assert!(matches!(TeleopFrame::decode(b"RM"), Err(ProtocolError::TruncatedFrame { .. })));
    }

    #[test]
    fn state_frame_round_trip() {
        let s = StateFrame {
            seq: 7,
            timestamp_micros: 99,
            echo_seq: 5,
            joint_state: std::array::from_fn(|i| i as f32 * 0.1),
            ee_poses: [[0.4, 0.2, 0.1, 1.0, 0.0, 0.0, 0.0], [0.4, -0.2, 0.1, 0.0, 1.0, 0.0, 0.0]],
            objects: vec![
                ObjectRecord {
                    id: 3,
                    pose: [1.0, 2.0, 3.0, 1.0, 0.0, 0.0, 0.0],
                },
                ObjectRecord {
                    id: 9,
                    pose: [0.0; 7],
                },
            ],
        };
        let b = s.encode();
        assert_eq!(b.len(), 184 + 60);
        assert_eq!(StateFrame::decode(&b).unwrap(), s);
        assert!(matches!(StateFrame::decode(&b[..b.len() - 1]), Err(ProtocolError::TruncatedFrame { .. })));
    }

    #[test]
    fn control_and_echo_round_trip() {
        let c = ControlMsg {
            reset: true,
            task_id: Some("kitchen".into()),
            ..ControlMsg::default()
        };
        let b = c.encode(1, 2);
        assert_eq!(Message::decode(&b).unwrap(), Message::Control(c));
        let json = std::str::from_utf8(&b[22..]).unwrap();
        assert!(json.contains("\"taskId\":\"kitchen\""));
        assert!(json.contains("\"startEpisode\":false"));

        let e = LatencyEcho {
            seq: 4,
            timestamp_micros: 1234,
        };
        assert_eq!(LatencyEcho::decode(&e.encode()).unwrap(), e);
    }

    #[test]
    fn ingest_renormalizes() {
        let mut h = HandBlock::identity();
        h.orientation = [2.0, 0.0, 0.0, 0.0];
        let i = h.ingest().unwrap();
        assert!((i.pose.orientation.norm() - 1.0).abs() < 1e-12);
        h.orientation = [0.0; 4];
        assert!(h.ingest().is_err());
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 50.0);
        assert_eq!(percentile(&v, 99.0), 99.0);
        assert_eq!(percentile(&[3.0], 99.0), 3.0);
    }

    struct Silent;
    impl EchoTransport for Silent {
        fn send(&mut self, _: &[u8]) -> std::io::Result<()> {
            Ok(())
        }
        fn recv(&mut self, _: Duration) -> std::io::Result<Option<Vec<u8>>> {
            Ok(None)
        }
    }

    #[test]
    fn latency_without_echoes_is_insufficient() {
        assert!(matches!(
            measure_latency(&mut Silent, 0, Duration::from_millis(10)),
            Err(LatencyError::InsufficientSamples { observed: 0, .. })
        ));
        assert!(matches!(
            measure_latency(&mut Silent, 5, Duration::from_millis(10)),
            Err(LatencyError::InsufficientSamples { observed: 0, .. })
        ));
    }
}
