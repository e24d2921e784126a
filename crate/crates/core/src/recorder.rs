//! Episode files and dataset indices.
//!
//! An episode file is one JSON header line followed by little-endian frame
//! blocks of stride `FRAME_FIXED_LEN + OBJECT_RECORD_LEN * objectCount`
//! (plus a length-prefixed blob per frame when the blob channel is on).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kinematics::{ActionVector26, DualArmModel, ACTION_DIM};
use crate::protocol::{ObjectRecord, OBJECT_RECORD_LEN};
use crate::scene::Scene;
use crate::task::{TaskId, TaskManifest};

pub const FORMAT: &str = "mirrorlink-episode";
pub const FORMAT_VERSION: u32 = 1;
/// timestamp + jointState + action + eePoses + filterOutcome.
pub const FRAME_FIXED_LEN: usize = 8 + 4 * ACTION_DIM * 2 + 4 * 14 + 1;
pub const EPISODE_EXT: &str = "bin";
pub const INDEX_FILE: &str = "index.json";
/// Replay tolerance on every recorded pose and joint value.
pub const REPLAY_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum RecorderError {
    #[error("frame {index}: timestamp {next} does not follow {prev}")]
    NonMonotoneTimestamp { index: usize, prev: u64, next: u64 },
    #[error("frame {index}: {actual} object records, header declares {expected}")]
    ObjectCountMismatch { index: usize, expected: usize, actual: usize },
    #[error("frame {index}: blob present but the blob channel is off")]
    BlobChannelDisabled { index: usize },
    #[error("header declares {declared} frames, body holds {actual}")]
    FrameCountMismatch { declared: u64, actual: String },
    #[error("malformed episode: {0}")]
    Malformed(String),
    #[error("{what} mismatch: recorded {recorded}, loaded {loaded}")]
    VersionMismatch {
        what: &'static str,
        recorded: String,
        loaded: String,
    },
    #[error("replay diverged at frame {frame}: {detail}")]
    DivergenceDetected { frame: usize, detail: String },
    #[error("replayed success label {replayed} differs from recorded {recorded}")]
    SuccessMismatch { recorded: bool, replayed: bool },
    #[error(transparent)]
    Task(#[from] crate::task::TaskError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub timestamp_micros: u64,
    pub joint_state: [f32; ACTION_DIM],
    pub action: [f32; ACTION_DIM],
    pub ee_poses: [[f32; 7]; 2],
    pub object_poses: Vec<ObjectRecord>,
    pub filter_outcome: u8,
    /// Opaque payload; written only when the header enables the blob channel.
    pub blob: Vec<u8>,
}

impl FrameRecord {
    /// Snapshot of `scene` after it executed `action`.
    pub fn capture(scene: &Scene, action: &ActionVector26, filter_outcome: u8) -> Self {
        FrameRecord {
            timestamp_micros: tick_micros(scene.tick, scene.manifest.tick_hz),
            joint_state: scene.joints.to_f32(),
            action: action.to_f32(),
            ee_poses: scene.ee.map(|p| p.to_array().map(|v| v as f32)),
            object_poses: scene.object_records(),
            filter_outcome,
            blob: Vec::new(),
        }
    }

    fn encode_into(&self, out: &mut Vec<u8>, blob_channel: bool) {
        out.extend_from_slice(&self.timestamp_micros.to_le_bytes());
        for v in self.joint_state.iter().chain(&self.action).chain(self.ee_poses.iter().flatten()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for o in &self.object_poses {
            out.extend_from_slice(&o.id.to_le_bytes());
            for v in &o.pose {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.push(self.filter_outcome);
        if blob_channel {
            out.extend_from_slice(&(self.blob.len() as u32).to_le_bytes());
            out.extend_from_slice(&self.blob);
        }
    }
}

/// Tick timestamps on the simulation clock.
pub fn tick_micros(tick: u64, tick_hz: f64) -> u64 {
    (tick as f64 * 1e6 / tick_hz).round() as u64
}

/// Seconds rounded half-up to milliseconds.
pub fn duration_s(frames: u64, tick_hz: f64) -> f64 {
    (frames as f64 / tick_hz * 1000.0 + 0.5).floor() / 1000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EpisodeHeader {
    pub format: String,
    pub format_version: u32,
    pub task_id: String,
    pub seed: u64,
    pub instruction: String,
    pub object_count: usize,
    pub frame_count: u64,
    pub tick_hz: f64,
    pub duration_s: f64,
    pub model_version: String,
    pub task_version: String,
    pub success_label: Option<bool>,
    #[serde(default)]
    pub blob_channel: bool,
}

impl EpisodeHeader {
    /// Header for an episode of `scene`'s task; counts are filled in on write.
    pub fn for_scene(scene: &Scene, success: Option<bool>) -> Self {
        let m = &scene.manifest;
        EpisodeHeader {
            format: FORMAT.into(),
            format_version: FORMAT_VERSION,
            task_id: m.task_id.as_str().into(),
            seed: scene.seed,
            instruction: m.instruction.clone(),
            object_count: m.object_count(),
            frame_count: 0,
            tick_hz: m.tick_hz,
            duration_s: 0.0,
            model_version: scene.model.model_version.clone(),
            task_version: m.task_version.clone(),
            success_label: success,
            blob_channel: false,
        }
    }

    pub fn stride(&self) -> usize {
        FRAME_FIXED_LEN + OBJECT_RECORD_LEN * self.object_count
    }

    pub fn task(&self) -> Result<TaskId, RecorderError> {
        Ok(self.task_id.parse()?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub header: EpisodeHeader,
    pub frames: Vec<FrameRecord>,
}

fn encode_body(header: &EpisodeHeader, frames: &[FrameRecord]) -> Result<Vec<u8>, RecorderError> {
    let mut body = Vec::with_capacity(frames.len() * header.stride());
    let mut prev: Option<u64> = None;
    for (index, f) in frames.iter().enumerate() {
        if let Some(p) = prev.filter(|&p| f.timestamp_micros <= p) {
            return Err(RecorderError::NonMonotoneTimestamp {
                index,
                prev: p,
                next: f.timestamp_micros,
            });
        }
        prev = Some(f.timestamp_micros);
        if f.object_poses.len() != header.object_count {
            return Err(RecorderError::ObjectCountMismatch {
                index,
                expected: header.object_count,
                actual: f.object_poses.len(),
            });
        }
        if !header.blob_channel && !f.blob.is_empty() {
            return Err(RecorderError::BlobChannelDisabled { index });
        }
        f.encode_into(&mut body, header.blob_channel);
    }
    Ok(body)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Result of a successful write.
#[derive(Debug, Clone, PartialEq)]
pub struct Recorded {
    pub path: PathBuf,
    pub header: EpisodeHeader,
    pub digest: String,
}

/// Writes an episode atomically; `frameCount` and `durationS` are derived
/// from `frames`. Nothing is left on disk on error.
pub fn record_episode(path: &Path, mut header: EpisodeHeader, frames: &[FrameRecord]) -> Result<Recorded, RecorderError> {
    let body = encode_body(&header, frames)?;
    header.frame_count = frames.len() as u64;
    header.duration_s = duration_s(header.frame_count, header.tick_hz);
    let mut line = serde_json::to_vec(&header)?;
    line.push(b'\n');

    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| RecorderError::Malformed(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    let written = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&line)?;
        f.write_all(&body)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = written {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(Recorded {
        path: path.to_path_buf(),
        header,
        digest: sha256_hex(&body),
    })
}

fn split_header(bytes: &[u8]) -> Result<(EpisodeHeader, &[u8]), RecorderError> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| RecorderError::Malformed("missing header line".into()))?;
    let header: EpisodeHeader = serde_json::from_slice(&bytes[..nl])?;
    if header.format != FORMAT || header.format_version != FORMAT_VERSION {
        return Err(RecorderError::Malformed(format!(
            "unsupported format {} v{}",
            header.format, header.format_version
        )));
    }
    Ok((header, &bytes[nl + 1..]))
}

/// Reads only the header line.
pub fn read_header(path: &Path) -> Result<EpisodeHeader, RecorderError> {
    let mut line = Vec::new();
    BufReader::new(fs::File::open(path)?).read_until(b'\n', &mut line)?;
    Ok(split_header(&line)?.0)
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let (a, b) = self.0.split_at(N);
        self.0 = b;
        a.try_into().expect("split_at yields N bytes")
    }
    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }
}

fn decode_body(header: &EpisodeHeader, body: &[u8]) -> Result<Vec<FrameRecord>, RecorderError> {
    let stride = header.stride();
    let mismatch = |actual: String| RecorderError::FrameCountMismatch {
        declared: header.frame_count,
        actual,
    };
    if !header.blob_channel && body.len() != stride * header.frame_count as usize {
        return Err(mismatch(format!("{} bytes at stride {stride}", body.len())));
    }
    let mut c = Cursor(body);
    let mut frames = Vec::with_capacity(header.frame_count as usize);
    for _ in 0..header.frame_count {
        if c.0.len() < stride {
            return Err(mismatch(format!("{} complete frames", frames.len())));
        }
        let timestamp_micros = u64::from_le_bytes(c.take());
        let joint_state = std::array::from_fn(|_| c.f32());
        let action = std::array::from_fn(|_| c.f32());
        let ee_poses = std::array::from_fn(|_| std::array::from_fn(|_| c.f32()));
        let object_poses = (0..header.object_count)
            .map(|_| ObjectRecord {
                id: u16::from_le_bytes(c.take()),
                pose: std::array::from_fn(|_| c.f32()),
            })
            .collect();
        let filter_outcome = c.take::<1>()[0];
        let blob = if header.blob_channel {
            if c.0.len() < 4 {
                return Err(mismatch(format!("{} complete frames", frames.len())));
            }
            let n = u32::from_le_bytes(c.take()) as usize;
            if c.0.len() < n {
                return Err(mismatch(format!("{} complete frames", frames.len())));
            }
            let (b, rest) = c.0.split_at(n);
            c.0 = rest;
            b.to_vec()
        } else {
            Vec::new()
        };
        frames.push(FrameRecord {
            timestamp_micros,
            joint_state,
            action,
            ee_poses,
            object_poses,
            filter_outcome,
            blob,
        });
    }
    if !c.0.is_empty() {
        return Err(mismatch(format!("{} trailing bytes", c.0.len())));
    }
    Ok(frames)
}

pub fn parse_episode(bytes: &[u8]) -> Result<Episode, RecorderError> {
    let (header, body) = split_header(bytes)?;
    let frames = decode_body(&header, body)?;
    Ok(Episode { header, frames })
}

pub fn read_episode(path: &Path) -> Result<Episode, RecorderError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_episode(&bytes)
}

/// SHA-256 of the body of an episode file.
pub fn file_digest(path: &Path) -> Result<String, RecorderError> {
    let bytes = fs::read(path)?;
    Ok(sha256_hex(split_header(&bytes)?.1))
}

#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    pub scene: Scene,
    pub success: bool,
}

fn check_close(frame: usize, what: &str, recorded: &[f32], replayed: impl Iterator<Item = f64>) -> Result<(), RecorderError> {
    for (i, (r, v)) in recorded.iter().zip(replayed).enumerate() {
        // Written so that NaN counts as a divergence.
        if !((*r as f64 - v).abs() <= REPLAY_TOL) {
            return Err(RecorderError::DivergenceDetected {
                frame,
                detail: format!("{what}[{i}] recorded {r}, replayed {v}"),
            });
        }
    }
    Ok(())
}

/// Re-drives a fresh scene with the recorded actions and checks every frame.
pub fn replay_episode(
    episode: &Episode,
    manifest: Arc<TaskManifest>,
    model: Arc<DualArmModel>,
) -> Result<ReplayOutcome, RecorderError> {
    let h = &episode.header;
    if h.task()? != manifest.task_id {
        return Err(RecorderError::VersionMismatch {
            what: "task",
            recorded: h.task_id.clone(),
            loaded: manifest.task_id.as_str().into(),
        });
    }
    if h.task_version != manifest.task_version {
        return Err(RecorderError::VersionMismatch {
            what: "taskVersion",
            recorded: h.task_version.clone(),
            loaded: manifest.task_version.clone(),
        });
    }
    if h.model_version != model.model_version {
        return Err(RecorderError::VersionMismatch {
            what: "modelVersion",
            recorded: h.model_version.clone(),
            loaded: model.model_version.clone(),
        });
    }
    let mut scene = Scene::reset(manifest, model, h.seed);
    for (i, f) in episode.frames.iter().enumerate() {
        scene.step(&ActionVector26::from_f32(&f.action));
        check_close(i, "jointState", &f.joint_state, scene.joints.0.iter().copied())?;
        for (s, ee) in scene.ee.iter().enumerate() {
            check_close(i, "eePose", &f.ee_poses[s], ee.to_array().into_iter())?;
        }
        let objects = scene.object_records();
        let poses = scene.object_poses();
        if objects.len() != f.object_poses.len() {
            return Err(RecorderError::DivergenceDetected {
                frame: i,
                detail: format!("{} objects, recorded {}", objects.len(), f.object_poses.len()),
            });
        }
        for ((rec, live), pose) in f.object_poses.iter().zip(&objects).zip(&poses) {
            if rec.id != live.id {
                return Err(RecorderError::DivergenceDetected {
                    frame: i,
                    detail: format!("object id {} recorded as {}", live.id, rec.id),
                });
            }
            check_close(i, "objectPose", &rec.pose, pose.to_array().into_iter())?;
        }
    }
    let success = scene.evaluate_success().success;
    if let Some(recorded) = h.success_label.filter(|&r| r != success) {
        return Err(RecorderError::SuccessMismatch {
            recorded,
            replayed: success,
        });
    }
    Ok(ReplayOutcome { scene, success })
}

/// Replay against the canonical manifest and robot model.
pub fn replay_canonical(episode: &Episode) -> Result<ReplayOutcome, RecorderError> {
    let task = episode.header.task()?;
    replay_episode(
        episode,
        Arc::new(TaskManifest::canonical(task)),
        Arc::new(DualArmModel::canonical()),
    )
}

pub fn episode_file_name(task: TaskId, seed: u64) -> String {
    format!("{}_s{seed:06}.{EPISODE_EXT}", task.as_str())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct IndexEntry {
    pub file: String,
    pub task_id: String,
    pub seed: u64,
    pub digest: String,
    pub success: Option<bool>,
    pub frame_count: u64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DatasetIndex {
    pub dataset: String,
    pub episodes: Vec<IndexEntry>,
    pub counts: BTreeMap<String, u64>,
}

fn episode_files(dir: &Path) -> Result<Vec<PathBuf>, RecorderError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == EPISODE_EXT)
                && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.'))
        })
        .collect();
    files.sort();
    Ok(files)
}

impl DatasetIndex {
    /// Scans `dir` for episode files; entries are sorted by file name.
    pub fn rebuild(dir: &Path, dataset: &str) -> Result<Self, RecorderError> {
        let mut episodes = Vec::new();
        for path in episode_files(dir)? {
            let header = read_header(&path)?;
            episodes.push(IndexEntry {
                file: path.file_name().expect("listed file").to_string_lossy().into_owned(),
                digest: file_digest(&path)?,
                task_id: header.task_id,
                seed: header.seed,
                success: header.success_label,
                frame_count: header.frame_count,
                duration_s: header.duration_s,
            });
        }
        Ok(Self::from_entries(dataset, episodes))
    }

    pub fn from_entries(dataset: &str, mut episodes: Vec<IndexEntry>) -> Self {
        episodes.sort_by(|a, b| a.file.cmp(&b.file));
        let mut counts = BTreeMap::new();
        for e in &episodes {
            *counts.entry(e.task_id.clone()).or_insert(0) += 1;
        }
        DatasetIndex {
            dataset: dataset.into(),
            episodes,
            counts,
        }
    }

    pub fn load(dir: &Path) -> Result<Self, RecorderError> {
        Ok(serde_json::from_slice(&fs::read(dir.join(INDEX_FILE))?)?)
    }

    /// Atomic write of `index.json`.
    pub fn write(&self, dir: &Path) -> Result<(), RecorderError> {
        let tmp = dir.join(format!(".{INDEX_FILE}.{}.tmp", std::process::id()));
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(&tmp, dir.join(INDEX_FILE))?;
        Ok(())
    }

    pub fn is_consistent(&self) -> bool {
        let mut counts = BTreeMap::new();
        for e in &self.episodes {
            *counts.entry(e.task_id.as_str()).or_insert(0u64) += 1;
        }
        counts.len() == self.counts.len() && counts.iter().all(|(k, v)| self.counts.get(*k) == Some(v))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct TaskStats {
    pub trajectories: u64,
    pub mean_duration_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct DatasetStats {
    pub per_task: BTreeMap<String, TaskStats>,
    pub total: u64,
    pub mean_duration_s: f64,
}

/// Counts and durations from episode headers. Accepts an index when
/// present, otherwise scans the directory.
pub fn dataset_stats(dir: &Path) -> Result<DatasetStats, RecorderError> {
    let entries = if dir.join(INDEX_FILE).exists() {
        DatasetIndex::load(dir)?.episodes
    } else {
        DatasetIndex::rebuild(dir, "")?.episodes
    };
    Ok(stats_from_entries(&entries))
}

pub fn stats_from_entries(entries: &[IndexEntry]) -> DatasetStats {
    let mut sums: BTreeMap<String, (u64, f64)> = BTreeMap::new();
    for e in entries {
        let s = sums.entry(e.task_id.clone()).or_default();
        s.0 += 1;
        s.1 += e.duration_s;
    }
    let total = entries.len() as u64;
    let all: f64 = sums.values().map(|s| s.1).sum();
    DatasetStats {
        per_task: sums
            .into_iter()
            .map(|(k, (n, d))| {
                (
                    k,
                    TaskStats {
                        trajectories: n,
                        mean_duration_s: d / n as f64,
                    },
                )
            })
            .collect(),
        total,
        mean_duration_s: if total == 0 { 0.0 } else { all / total as f64 },
    }
}
