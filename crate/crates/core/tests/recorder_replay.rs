use std::fs;
use std::sync::Arc;

use mirrorlink::kinematics::{DualArmModel, ACTION_DIM};
use mirrorlink::policy::{run_closed_loop, LoopConfig, OraclePolicy};
use mirrorlink::protocol::ObjectRecord;
use mirrorlink::recorder::{
    episode_file_name, parse_episode, read_episode, record_episode, replay_canonical, replay_episode, EpisodeHeader,
    Episode, FrameRecord, RecorderError, FORMAT, FORMAT_VERSION,
};
use mirrorlink::scene::Scene;
use mirrorlink::task::{TaskId, TaskManifest};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn f32s(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1e3f32..1e3)).collect()
}

fn random_episode(rng: &mut ChaCha8Rng) -> (EpisodeHeader, Vec<FrameRecord>) {
    let objects = rng.random_range(0..6usize);
    let blob_channel = rng.random_bool(0.3);
    let header = EpisodeHeader {
        format: FORMAT.into(),
        format_version: FORMAT_VERSION,
        task_id: TaskId::ALL[rng.random_range(0..5)].as_str().into(),
        seed: rng.random(),
        instruction: format!("instruction {}", rng.random::<u32>()),
        object_count: objects,
        frame_count: 0,
        tick_hz: [30.0, 60.0, 90.0, 120.0][rng.random_range(0..4)],
        duration_s: 0.0,
        model_version: "m1".into(),
        task_version: "t1".into(),
        success_label: [None, Some(true), Some(false)][rng.random_range(0..3)],
        blob_channel,
    };
    let mut t = rng.random_range(0..1_000_000u64);
    let frames = (0..rng.random_range(0..40))
        .map(|_| {
            t += rng.random_range(1..20_000);
            let joints: [f32; ACTION_DIM] = f32s(rng, ACTION_DIM).try_into().unwrap();
            let action: [f32; ACTION_DIM] = f32s(rng, ACTION_DIM).try_into().unwrap();
            let ee = [f32s(rng, 7).try_into().unwrap(), f32s(rng, 7).try_into().unwrap()];
            let object_poses = (0..objects)
                .map(|_| ObjectRecord {
                    id: rng.random(),
                    pose: f32s(rng, 7).try_into().unwrap(),
                })
                .collect();
            let blob = if blob_channel {
                (0..rng.random_range(0..32)).map(|_| rng.random()).collect()
            } else {
                Vec::new()
            };
            FrameRecord {
                timestamp_micros: t,
                joint_state: joints,
                action,
                ee_poses: ee,
                object_poses,
                filter_outcome: rng.random(),
                blob,
            }
        })
        .collect();
    (header, frames)
}

#[test]
fn thousand_random_episodes_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for i in 0..1000 {
        let (header, frames) = random_episode(&mut rng);
        let path = dir.path().join(format!("e{i}.bin"));
        let rec = record_episode(&path, header.clone(), &frames).unwrap();
        let ep = read_episode(&path).unwrap();
        assert_eq!(ep.frames, frames, "episode {i}");
        assert_eq!(ep.header, rec.header);
        assert_eq!(ep.header.frame_count, frames.len() as u64);

        let again = dir.path().join(format!("e{i}b.bin"));
        record_episode(&again, ep.header.clone(), &ep.frames).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap(), "episode {i}");
    }
}

fn oracle_episode(task: TaskId, seed: u64) -> Episode {
    let mut scene = Scene::reset_task(task, seed);
    let header = EpisodeHeader::for_scene(&scene, None);
    let cfg = LoopConfig {
        record: true,
        ..LoopConfig::default()
    };
    let out = run_closed_loop(&mut scene, &mut OraclePolicy::new(16), &cfg);
    assert!(out.success);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(episode_file_name(task, seed));
    record_episode(&path, EpisodeHeader { success_label: Some(true), ..header }, &out.frames).unwrap();
    read_episode(&path).unwrap()
}

fn header_len(bytes: &[u8]) -> usize {
    bytes.iter().position(|&b| b == b'\n').unwrap() + 1
}

#[test]
fn pristine_episodes_replay_for_every_task() {
    for task in TaskId::ALL {
        let ep = oracle_episode(task, 7);
        let out = replay_canonical(&ep).unwrap_or_else(|e| panic!("{task:?}: {e}"));
        assert!(out.success);
    }
}

#[test]
fn corrupted_action_byte_diverges_at_or_after_its_frame() {
    let ep = oracle_episode(TaskId::KitchenCleanup, 9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ep.bin");
    record_episode(&path, ep.header.clone(), &ep.frames).unwrap();
    let bytes = fs::read(&path).unwrap();
    let body = header_len(&bytes);
    let stride = ep.header.stride();
    let n = ep.frames.len();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    while checked < 20 {
        let frame = rng.random_range(0..n);
        let joint = rng.random_range(0..ACTION_DIM);
        let v = ep.frames[frame].action[joint];
        if v.abs() < 0.05 {
            continue;
        }
        let mut bad = bytes.clone();
        // Top byte of the little-endian f32: flips the lowest exponent bit.
        bad[body + frame * stride + 8 + 4 * ACTION_DIM + 4 * joint + 3] ^= 0x01;
        let corrupted = parse_episode(&bad).unwrap();
        match replay_canonical(&corrupted) {
            Err(RecorderError::DivergenceDetected { frame: at, .. }) => {
                assert!(at >= frame, "diverged at {at} before corrupted frame {frame}")
            }
            other => panic!("frame {frame} joint {joint}: expected divergence, got {other:?}"),
        }
        checked += 1;
    }
}

#[test]
fn version_mismatches_are_rejected_before_replay() {
    let ep = oracle_episode(TaskId::CupToCup, 2);
    let model = Arc::new(DualArmModel::canonical());
    let mut manifest = TaskManifest::canonical(TaskId::CupToCup);
    manifest.task_version.push_str("-next");
    assert!(matches!(
        replay_episode(&ep, Arc::new(manifest), model.clone()),
        Err(RecorderError::VersionMismatch { what: "taskVersion", .. })
    ));

    let mut other = DualArmModel::canonical();
    other.model_version.push_str("-next");
    assert!(matches!(
        replay_episode(&ep, Arc::new(TaskManifest::canonical(TaskId::CupToCup)), Arc::new(other)),
        Err(RecorderError::VersionMismatch { what: "modelVersion", .. })
    ));

    assert!(matches!(
        replay_episode(&ep, Arc::new(TaskManifest::canonical(TaskId::AirFryer)), model),
        Err(RecorderError::VersionMismatch { what: "task", .. })
    ));
}

#[test]
fn flipped_success_label_is_reported() {
    let mut ep = oracle_episode(TaskId::CanStacking, 3);
    ep.header.success_label = Some(false);
    assert!(matches!(
        replay_canonical(&ep),
        Err(RecorderError::SuccessMismatch {
            recorded: false,
            replayed: true
        })
    ));
}
