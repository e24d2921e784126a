//! Live teleoperation session: drives a scene from teleop frames and
//! records operator-delimited episodes.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use crate::evaluator::Assets;
use crate::kinematics::ActionVector26;
use crate::motion_filter::{DualArmFilter, FilterConfig};
use crate::protocol::{ControlMsg, TeleopFrame, FLAG_EPISODE_END, FLAG_EPISODE_START};
use crate::recorder::{record_episode, DatasetIndex, EpisodeHeader, FrameRecord, EPISODE_EXT};
use crate::scene::Scene;
use crate::server::{StateSnapshot, TickSink};
use crate::task::TaskId;

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub task: TaskId,
    pub seed: u64,
    /// Episodes are written here; recording requests fail without it.
    pub dataset_dir: Option<PathBuf>,
    pub dataset_name: String,
    pub filter: FilterConfig,
}

/// Observable side effects of a session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionLog {
    pub episodes: Vec<PathBuf>,
    pub warnings: Vec<String>,
    pub resets: u64,
    pub recording: bool,
    pub ingest_errors: u64,
}

pub struct LiveSession {
    cfg: SessionConfig,
    assets: Assets,
    scene: Scene,
    filter: DualArmFilter,
    recording: Option<Vec<FrameRecord>>,
    last_ts: u64,
    /// Marker bits seen on the previous consumed frame.
    last_markers: u8,
    log: Arc<Mutex<SessionLog>>,
}

impl LiveSession {
    pub fn new(cfg: SessionConfig, assets: Assets) -> Self {
        let scene = assets.scene(cfg.task, cfg.seed);
        let filter = DualArmFilter::new((*scene.model).clone(), scene.joints, cfg.filter.clone());
        LiveSession {
            cfg,
            assets,
            scene,
            filter,
            recording: None,
            last_ts: 0,
            last_markers: 0,
            log: Arc::default(),
        }
    }

    pub fn log(&self) -> Arc<Mutex<SessionLog>> {
        self.log.clone()
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    fn warn(&self, m: String) {
        log::warn!("{m}");
        self.log.lock().expect("session log").warnings.push(m);
    }

    fn reset(&mut self, c: &ControlMsg) {
        if let Some(t) = &c.task_id {
            match t.parse() {
                Ok(task) => self.cfg.task = task,
                Err(e) => return self.warn(format!("reset rejected: {e}")),
            }
        }
        if let Some(s) = c.seed {
            self.cfg.seed = s;
        }
        if self.recording.take().is_some() {
            self.warn("reset discarded the episode being recorded".into());
        }
        self.scene = self.assets.scene(self.cfg.task, self.cfg.seed);
        self.filter = DualArmFilter::new((*self.scene.model).clone(), self.scene.joints, self.cfg.filter.clone());
        let mut log = self.log.lock().expect("session log");
        log.resets += 1;
        log.recording = false;
    }

    fn end_episode(&mut self) {
        let Some(frames) = self.recording.take() else {
            return self.warn("endEpisode while not recording".into());
        };
        self.log.lock().expect("session log").recording = false;
        let Some(dir) = self.cfg.dataset_dir.clone() else {
            return self.warn("no dataset directory configured; episode dropped".into());
        };
        let success = self.scene.evaluate_success().success;
        let header = EpisodeHeader::for_scene(&self.scene, Some(success));
        let n = self.log.lock().expect("session log").episodes.len();
        let name = format!(
            "{}_s{:06}_live{:04}_{}.{EPISODE_EXT}",
            self.cfg.task.as_str(),
            self.cfg.seed,
            n,
            std::process::id()
        );
        let written = record_episode(&dir.join(name), header, &frames)
            .and_then(|r| DatasetIndex::rebuild(&dir, &self.cfg.dataset_name)?.write(&dir).map(|_| r));
        match written {
            Ok(r) => self.log.lock().expect("session log").episodes.push(r.path),
            Err(e) => self.warn(format!("episode write failed: {e}")),
        }
    }

    fn control(&mut self, c: &ControlMsg) {
        if c.reset {
            self.reset(c);
        }
        if c.start_episode {
            if self.recording.is_some() {
                self.warn("startEpisode while already recording".into());
            } else {
                // Episodes start from a fresh layout so they replay.
                self.reset(&ControlMsg::default());
                self.recording = Some(Vec::new());
                self.log.lock().expect("session log").recording = true;
            }
        }
        if c.end_episode {
            self.end_episode();
        }
    }

    /// One simulation tick.
    pub fn step(&mut self, frame: Option<&TeleopFrame>, controls: &[ControlMsg], now_micros: u64) -> StateSnapshot {
        for c in controls {
            self.control(c);
        }
        if let Some(f) = frame {
            // Frame markers act on their rising edge only, since a held
            // marker repeats in every frame.
            let markers = f.hands.iter().fold(0, |m, h| m | h.flags) & (FLAG_EPISODE_START | FLAG_EPISODE_END);
            let rising = markers & !self.last_markers;
            self.last_markers = markers;
            if rising != 0 {
                self.control(&ControlMsg {
                    start_episode: rising & FLAG_EPISODE_START != 0,
                    end_episode: rising & FLAG_EPISODE_END != 0,
                    ..ControlMsg::default()
                });
            }
        }
        let (action, outcome): (ActionVector26, u8) = match frame.map(TeleopFrame::ingest) {
            Some(Ok(hands)) => {
                let r = self.filter.step_teleop(&hands);
                (r.action, r.outcome_byte())
            }
            Some(Err(e)) => {
                self.log.lock().expect("session log").ingest_errors += 1;
                log::debug!("teleop frame ignored: {e}");
                (*self.filter.action(), 0)
            }
            None => (*self.filter.action(), 0),
        };
        let exec = action.quantized();
        self.scene.step(&exec);
        if let Some(rec) = &mut self.recording {
            let mut f = FrameRecord::capture(&self.scene, &exec, outcome);
            self.last_ts = now_micros.max(self.last_ts + 1);
            f.timestamp_micros = self.last_ts;
            rec.push(f);
        }
        StateSnapshot {
            joint_state: self.scene.joints.to_f32(),
            ee_poses: self.scene.ee.map(|p| p.to_array().map(|v| v as f32)),
            objects: self.scene.object_records(),
        }
    }
}

impl TickSink for LiveSession {
    fn tick(&mut self, frame: Option<&TeleopFrame>, controls: &[ControlMsg], now_micros: u64) -> StateSnapshot {
        self.step(frame, controls, now_micros)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recorder::{read_episode, replay_canonical};

    fn session(dir: Option<PathBuf>) -> LiveSession {
        LiveSession::new(
            SessionConfig {
                task: TaskId::CanStacking,
                seed: 4,
                dataset_dir: dir,
                dataset_name: "live".into(),
                filter: FilterConfig::default(),
            },
            Assets::canonical(),
        )
    }

    fn ctl(start: bool, end: bool) -> ControlMsg {
        ControlMsg {
            start_episode: start,
            end_episode: end,
            ..ControlMsg::default()
        }
    }

    #[test]
    fn start_end_writes_one_replayable_episode() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = session(Some(dir.path().to_path_buf()));
        s.step(None, &[ctl(true, false)], 10);
        for t in 0..30 {
            s.step(None, &[], 10 + t);
        }
        s.step(None, &[ctl(false, true)], 100);
        let log = s.log().lock().unwrap().clone();
        assert_eq!(log.episodes.len(), 1);
        let ep = read_episode(&log.episodes[0]).unwrap();
        assert_eq!(ep.frames.len(), 31);
        replay_canonical(&ep).unwrap();
        assert!(DatasetIndex::load(dir.path()).unwrap().is_consistent());
    }

    #[test]
    fn end_without_start_is_rejected() {
        let mut s = session(None);
        s.step(None, &[ctl(false, true)], 1);
        let log = s.log().lock().unwrap().clone();
        assert!(log.episodes.is_empty());
        assert_eq!(log.warnings.len(), 1);
    }

    #[test]
    fn reset_applies_task_and_seed() {
        let mut s = session(None);
        s.step(
            None,
            &[ControlMsg {
                reset: true,
                task_id: Some("kitchen".into()),
                seed: Some(9),
                ..ControlMsg::default()
            }],
            1,
        );
        assert_eq!(s.scene().task(), TaskId::KitchenCleanup);
        let fresh = Scene::reset_task(TaskId::KitchenCleanup, 9);
        assert_eq!(s.scene().objects[0].pose.position, fresh.objects[0].pose.position);
    }
}
