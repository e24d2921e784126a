use std::time::Duration;

use mirrorlink::kinematics::{ActionVector26, Side, ACTION_DIM};
use mirrorlink::policy::{
    run_closed_loop, ActionChunk, ChunkWire, ExternalPolicy, LoopConfig, Observation, OraclePolicy, Policy, PolicyError,
    PolicyReply, PolicyServer, TemporalEnsembler,
};
use mirrorlink::scene::Scene;
use mirrorlink::task::TaskId;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct AlwaysTimesOut;

impl Policy for AlwaysTimesOut {
    fn name(&self) -> String {
        "timeout".into()
    }
    fn reset(&mut self, _: &Scene) -> Result<(), PolicyError> {
        Ok(())
    }
    fn infer(&mut self, _: &Observation) -> Result<ActionChunk, PolicyError> {
        Err(PolicyError::Timeout)
    }
}

/// Emits wild random chunks and times out on a random subset of calls.
struct Erratic {
    rng: ChaCha8Rng,
    scale: f64,
}

impl Policy for Erratic {
    fn name(&self) -> String {
        "erratic".into()
    }
    fn reset(&mut self, _: &Scene) -> Result<(), PolicyError> {
        Ok(())
    }
    fn infer(&mut self, obs: &Observation) -> Result<ActionChunk, PolicyError> {
        if self.rng.random_bool(0.3) {
            return Err(PolicyError::Timeout);
        }
        let h = self.rng.random_range(1..24);
        let actions = (0..h)
            .map(|_| {
                let mut a = obs.joint_state;
                for v in a.0.iter_mut() {
                    *v += self.rng.random_range(-self.scale..self.scale);
                }
                a
            })
            .collect();
        Ok(ActionChunk {
            start_tick: obs.tick_index + 1,
            actions,
        })
    }
}

fn recording(max_ticks: u64) -> LoopConfig {
    LoopConfig {
        max_ticks: Some(max_ticks),
        record: true,
        ..LoopConfig::default()
    }
}

#[test]
fn oracle_solves_fifty_kitchen_seeds() {
    let mut failed = Vec::new();
    for seed in 0..50 {
        let mut scene = Scene::reset_task(TaskId::KitchenCleanup, seed);
        let out = run_closed_loop(&mut scene, &mut OraclePolicy::new(16), &LoopConfig::default());
        if !out.success {
            failed.push((seed, out.report.failed_criteria()));
        }
    }
    assert!(failed.is_empty(), "failed seeds: {failed:?}");
}

#[test]
fn timeouts_are_counted_and_the_arm_holds() {
    let mut scene = Scene::reset_task(TaskId::CupToCup, 3);
    let start = scene.joints;
    let out = run_closed_loop(&mut scene, &mut AlwaysTimesOut, &recording(100));
    assert!(out.error.is_none());
    assert!(!out.success);
    assert_eq!(out.ticks, 100);
    assert_eq!(out.requests, 13);
    assert_eq!(out.timeouts, out.requests);
    for f in &out.frames {
        assert!(ActionVector26::from_f32(&f.action).max_abs_diff(&start.quantized()) < 1e-6);
    }
}

#[test]
fn deterministic_policy_gives_identical_episodes() {
    let run = || {
        let mut scene = Scene::reset_task(TaskId::CanStacking, 11);
        run_closed_loop(&mut scene, &mut OraclePolicy::new(16), &recording(400)).frames
    };
    let (a, b) = (run(), run());
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

fn arm_jumps_within(frames: &[mirrorlink::recorder::FrameRecord], start: &ActionVector26, bound: f64) -> Result<(), String> {
    let mut prev = start.quantized();
    for (i, f) in frames.iter().enumerate() {
        let a = ActionVector26::from_f32(&f.action);
        for side in Side::BOTH {
            for j in ActionVector26::arm_range(side) {
                let d = (a.0[j] - prev.0[j]).abs();
                if d > bound + 1e-6 {
                    return Err(format!("frame {i} joint {j} jumped {d}"));
                }
            }
        }
        prev = a;
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_policy_respects_the_jump_bound(seed in any::<u64>(), scale in 0.01f64..3.0, task in 0usize..5) {
        let task = TaskId::ALL[task];
        let mut scene = Scene::reset_task(task, seed % 1000);
        let start = scene.joints;
        let cfg = recording(120);
        let bound = cfg.filter.joint_jump_max;
        let mut policy = Erratic { rng: ChaCha8Rng::seed_from_u64(seed), scale };
        let out = run_closed_loop(&mut scene, &mut policy, &cfg);
        prop_assert!(out.error.is_none());
        prop_assert_eq!(out.frames.len() as u64, out.ticks);
        if let Err(e) = arm_jumps_within(&out.frames, &start, bound) {
            return Err(TestCaseError::fail(e));
        }
    }
}

const TIMEOUT: Duration = Duration::from_secs(2);

#[test]
fn echo_server_holds_position() {
    let server = PolicyServer::spawn("127.0.0.1:0", |obs| {
        PolicyReply::Chunk(ChunkWire {
            start_tick: obs.tick_index + 1,
            actions: vec![obs.joint_state.clone()],
        })
    })
    .unwrap();
    let mut policy = ExternalPolicy::connect(&server.addr(), TIMEOUT).unwrap();
    let mut scene = Scene::reset_task(TaskId::AirFryer, 5);
    let start = scene.joints.quantized();
    let out = run_closed_loop(&mut scene, &mut policy, &recording(48));
    assert!(out.error.is_none(), "{:?}", out.error);
    assert_eq!(out.requests, 6);
    assert_eq!(out.timeouts, 0);
    for f in &out.frames {
        assert!(ActionVector26::from_f32(&f.joint_state).max_abs_diff(&start) < 1e-6);
    }
}

#[test]
fn sixteen_step_chunks_every_eight_ticks_overlap() {
    const H: usize = 16;
    const EVERY: u64 = 8;
    let server = PolicyServer::spawn("127.0.0.1:0", |obs| {
        PolicyReply::Chunk(ChunkWire {
            start_tick: obs.tick_index + 1,
            actions: vec![obs.joint_state.clone(); H],
        })
    })
    .unwrap();
    let mut policy = ExternalPolicy::connect(&server.addr(), TIMEOUT).unwrap();
    let scene = Scene::reset_task(TaskId::KitchenCleanup, 1);
    let mut obs = Observation::from_scene(&scene);
    let mut ens = TemporalEnsembler::new(0.1);
    for tick in 0..200u64 {
        if tick % EVERY == 0 {
            obs.tick_index = tick;
            let chunk = policy.infer(&obs).unwrap();
            assert_eq!(chunk.horizon(), H);
            ens.push(chunk).unwrap();
        }
        // Warm-up: the first chunk alone covers ticks 1..=EVERY.
        if tick >= EVERY {
            assert!(ens.coverage(tick + 1) >= 2, "tick {}", tick + 1);
        }
        ens.step(tick + 1).unwrap();
    }
}

#[test]
fn malformed_reply_fails_the_trial() {
    let server = PolicyServer::spawn("127.0.0.1:0", |_| PolicyReply::Raw("{\"startTick\": [".into())).unwrap();
    let mut policy = ExternalPolicy::connect(&server.addr(), TIMEOUT).unwrap();
    let mut scene = Scene::reset_task(TaskId::KitchenCleanup, 2);
    let out = run_closed_loop(&mut scene, &mut policy, &recording(50));
    assert!(!out.success);
    assert_eq!(out.requests, 1);
    assert!(out.error.is_some());
}

#[test]
fn wrong_action_width_is_a_protocol_error() {
    let server = PolicyServer::spawn("127.0.0.1:0", |obs| {
        PolicyReply::Chunk(ChunkWire {
            start_tick: obs.tick_index + 1,
            actions: vec![vec![0.0; ACTION_DIM - 1]],
        })
    })
    .unwrap();
    let mut policy = ExternalPolicy::connect(&server.addr(), TIMEOUT).unwrap();
    let scene = Scene::reset_task(TaskId::KitchenCleanup, 2);
    assert!(matches!(
        policy.infer(&Observation::from_scene(&scene)),
        Err(PolicyError::Protocol(_))
    ));
}

#[test]
fn silent_server_times_out_every_request() {
    let server = PolicyServer::spawn("127.0.0.1:0", |_| PolicyReply::Silent).unwrap();
    let mut policy = ExternalPolicy::connect(&server.addr(), Duration::from_millis(30)).unwrap();
    let mut scene = Scene::reset_task(TaskId::AssemblyLine, 4);
    let out = run_closed_loop(&mut scene, &mut policy, &recording(40));
    assert!(out.error.is_none());
    assert_eq!(out.requests, 5);
    assert_eq!(out.timeouts, 5);
}
