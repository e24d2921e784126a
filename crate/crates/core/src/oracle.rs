//! Scripted demonstrations: per-task Cartesian scripts turned into joint
//! timelines with warm-started IK. The whole timeline is planned from the
//! reset scene, which is possible because the world is deterministic.

use thiserror::Error;

use crate::geom::{PoseSE3, Quaternion, Vec3};
use crate::kinematics::{ActionVector26, DualArmModel, IkConfig, Side};
use crate::scene::Scene;
use crate::task::TaskId;

const LIN_SPEED: f64 = 0.25;
const ANG_SPEED: f64 = 1.0;
const GRIP_TICKS: u64 = 12;
const SETTLE_TICKS: u64 = 6;
/// Per-tick joint change above which a plan is considered broken.
const MAX_PLAN_JUMP: f64 = 0.12;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("{side} arm: IK failed at tick {tick}")]
    Unreachable { side: Side, tick: u64 },
    #[error("{side} arm: joint jump {jump:.3} rad at tick {tick}")]
    Discontinuous { side: Side, tick: u64, jump: f64 },
}

/// Per-tick Cartesian palm targets and hand closure for one arm.
#[derive(Debug, Clone)]
pub struct ArmScript {
    pub side: Side,
    pose: PoseSE3,
    closure: f64,
    /// Entry `k` is the command for tick `k + 1`.
    samples: Vec<(PoseSE3, f64)>,
}

fn smoothstep(s: f64) -> f64 {
    s * s * (3.0 - 2.0 * s)
}

impl ArmScript {
    pub fn new(side: Side, start: PoseSE3) -> Self {
        ArmScript {
            side,
            pose: start,
            closure: 0.0,
            samples: Vec::new(),
        }
    }

    /// Last scripted tick.
    pub fn now(&self) -> u64 {
        self.samples.len() as u64
    }

    pub fn pose(&self) -> PoseSE3 {
        self.pose
    }

    fn push(&mut self, pose: PoseSE3) {
        self.pose = pose;
        self.samples.push((pose, self.closure));
    }

    pub fn move_to(&mut self, target: PoseSE3) -> &mut Self {
        let from = self.pose;
        let lin = (target.position - from.position).norm() / LIN_SPEED;
        let ang = from.orientation.angle_to(&target.orientation) / ANG_SPEED;
        let ticks = ((lin.max(ang) * 120.0).ceil() as u64).max(1);
        for k in 1..=ticks {
            self.push(from.lerp(&target, smoothstep(k as f64 / ticks as f64)));
        }
        self.pose = target;
        self
    }

    pub fn move_by(&mut self, d: Vec3) -> &mut Self {
        let p = self.pose;
        self.move_to(PoseSE3::new(p.position + d, p.orientation))
    }

    pub fn hold(&mut self, ticks: u64) -> &mut Self {
        for _ in 0..ticks {
            self.push(self.pose);
        }
        self
    }

    pub fn hold_until(&mut self, tick: u64) -> &mut Self {
        let n = tick.saturating_sub(self.now());
        self.hold(n)
    }

    pub fn grip(&mut self, closure: f64) -> &mut Self {
        let c0 = self.closure;
        for k in 1..=GRIP_TICKS {
            self.closure = c0 + (closure - c0) * k as f64 / GRIP_TICKS as f64;
            self.push(self.pose);
        }
        self.hold(SETTLE_TICKS)
    }

    /// Follows a moving target; `f` receives the absolute tick.
    pub fn track(&mut self, ticks: u64, f: impl Fn(u64) -> PoseSE3) -> &mut Self {
        for _ in 0..ticks {
            let t = self.now() + 1;
            self.push(f(t));
        }
        self
    }

    /// Tracks `f` while ramping the closure like `grip`.
    pub fn track_grip(&mut self, closure: f64, f: impl Fn(u64) -> PoseSE3) -> &mut Self {
        let c0 = self.closure;
        for k in 1..=(GRIP_TICKS + SETTLE_TICKS) {
            self.closure = c0 + (closure - c0) * (k.min(GRIP_TICKS) as f64 / GRIP_TICKS as f64);
            let t = self.now() + 1;
            self.push(f(t));
        }
        self
    }
}

/// Complete joint-space demonstration, one action per tick starting at tick 1.
#[derive(Debug, Clone, PartialEq)]
pub struct OraclePlan {
    pub actions: Vec<ActionVector26>,
}

impl OraclePlan {
    /// Action for `tick` (≥ 1); the final action is held past the end.
    pub fn action(&self, tick: u64) -> ActionVector26 {
        let i = (tick.max(1) - 1) as usize;
        self.actions[i.min(self.actions.len() - 1)]
    }
}

fn solve_arm(model: &DualArmModel, start: &[f64], script: &ArmScript, len: usize) -> Result<Vec<Vec<f64>>, OracleError> {
    let chain = model.arm(script.side);
    let cfg = IkConfig {
        restarts: 0,
        max_iter: 200,
        ..IkConfig::default()
    };
    let mut q = start.to_vec();
    let mut out = Vec::with_capacity(len);
    for k in 0..len {
        let (target, _) = script.samples.get(k).copied().unwrap_or((script.pose, script.closure));
        let tick = k as u64 + 1;
        let r = chain
            .solve_ik(&target, &q, &cfg)
            .map_err(|_| OracleError::Unreachable { side: script.side, tick })?;
        if !r.converged {
            return Err(OracleError::Unreachable { side: script.side, tick });
        }
        let jump = r.joints.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if jump > MAX_PLAN_JUMP {
            return Err(OracleError::Discontinuous {
                side: script.side,
                tick,
                jump,
            });
        }
        q = r.joints;
        out.push(q.clone());
    }
    Ok(out)
}

fn compile(scene: &Scene, scripts: [ArmScript; 2]) -> Result<OraclePlan, OracleError> {
    let model = &scene.model;
    let len = scripts.iter().map(|s| s.samples.len()).max().unwrap_or(0).max(1);
    let mut out = vec![scene.joints; len];
    for s in &scripts {
        let q = solve_arm(model, scene.joints.arm(s.side), s, len)?;
        for (k, a) in out.iter_mut().enumerate() {
            a.set_arm(s.side, &q[k]);
            let c = s.samples.get(k).map(|x| x.1).unwrap_or(s.closure);
            a.set_hand(s.side, &model.fingers_to_joints(s.side, &[c; 6]));
        }
    }
    Ok(OraclePlan {
        actions: out.iter().map(ActionVector26::quantized).collect(),
    })
}

fn at(p: Vec3, q: Quaternion) -> PoseSE3 {
    PoseSE3::new(p, q)
}

fn up(z: f64) -> Vec3 {
    Vec3::new(0.0, 0.0, z)
}

/// Plans the scripted demonstration for the scene's task from its reset state.
pub fn plan(scene: &Scene) -> Result<OraclePlan, OracleError> {
    let [l0, r0] = scene.ee;
    let mut l = ArmScript::new(Side::Left, l0);
    let mut r = ArmScript::new(Side::Right, r0);
    let (dl, dr) = (l0.orientation, r0.orientation);
    let pos = |name: &str| scene.object(name).expect("manifest object").pose.position;
    match scene.task() {
        TaskId::KitchenCleanup => {
            let item = pos("item");
            let handover = Vec3::new(0.38, 0.03, 0.16);
            l.move_to(at(item + up(0.10), dl)).move_to(at(item, dl)).grip(1.0);
            l.move_by(up(0.10)).move_to(at(handover, dl));
            r.hold_until(l.now().saturating_sub(60));
            r.move_to(at(handover + Vec3::new(0.0, -0.035, 0.0), dr));
            r.hold_until(l.now()).grip(1.0);
            l.hold_until(r.now()).grip(0.0).move_by(up(0.06)).move_to(l0);
            let basket = pos("basket");
            r.hold_until(l.now() - 40);
            r.move_by(up(0.06)).move_to(at(basket + up(0.14), dr)).move_to(at(basket + up(0.01), dr));
            r.grip(0.0).move_by(up(0.10));
        }
        TaskId::AirFryer => {
            let spec = scene.manifest.drawer.as_ref().expect("air fryer drawer");
            let drawer = scene.drawer.as_ref().expect("air fryer drawer").pose;
            let handle = drawer.transform_point(&Vec3::from(spec.handle.center));
            let axis = Vec3::from(spec.axis).normalize();
            let pull = 0.93 * spec.max_travel;
            r.move_to(at(handle + up(0.08), dr)).move_to(at(handle, dr)).grip(1.0);
            r.move_to(at(handle + axis * pull, dr));
            let opened = r.now();

            let food = pos("food");
            let basket = drawer.transform_point(&Vec3::from(spec.basket.center)) + axis * pull;
            l.move_to(at(food + up(0.10), dl)).move_to(at(food, dl)).grip(1.0).move_by(up(0.10));
            l.hold_until(opened);
            l.move_to(at(basket + up(0.12), dl)).move_to(at(basket + up(0.03), dl)).grip(0.0);
            l.move_by(up(0.12));
            r.hold_until(l.now()).move_to(at(handle, dr)).grip(0.0).move_by(up(0.08));
            l.move_to(l0);
        }
        TaskId::AssemblyLine => {
            let cv = scene.manifest.conveyor.as_ref().expect("assembly conveyor");
            let v = Vec3::from(cv.velocity);
            let dt = scene.dt;
            let descend = 48u64;
            for e in &cv.spawn_schedule {
                let o = scene.object(&e.item).expect("scheduled item");
                let class = o.class.as_ref().expect("class drawn at reset");
                let dest = pos(&cv.classes[class]);
                let (arm, down, intercept_y) = if dest.y >= 0.0 {
                    (&mut l, dl, 0.14)
                } else {
                    (&mut r, dr, -0.10)
                };
                let (anchor, spawn) = (o.pose.position, o.spawn_tick);
                let item_at = move |t: u64| anchor + v * (t.saturating_sub(spawn) as f64 * dt);
                let grasp = spawn + ((intercept_y - anchor.y) / (v.y * dt)).round() as u64;
                let hover = grasp - descend;
                arm.move_to(at(item_at(hover) + up(0.08), down));
                arm.hold_until(hover);
                arm.track(descend, |t| {
                    let s = smoothstep((t - hover) as f64 / descend as f64);
                    at(item_at(t) + up(0.08 * (1.0 - s)), down)
                });
                arm.track_grip(1.0, |t| at(item_at(t), down));
                arm.move_by(up(0.10)).move_to(at(dest + up(0.14), down)).move_to(at(dest + up(0.01), down));
                arm.grip(0.0).move_by(up(0.10));
            }
        }
        TaskId::CupToCup => {
            let (cl, cr) = (pos("cup_left"), pos("cup_right"));
            let cup_h = scene.object("cup_left").expect("cup").shape.height();
            let left_hold = Vec3::new(0.38, 0.09, 0.20);
            l.move_to(at(cl + up(0.10), dl)).move_to(at(cl, dl)).grip(1.0);
            l.move_by(up(0.12)).move_to(at(left_hold, dl));
            r.move_to(at(cr + up(0.10), dr)).move_to(at(cr, dr)).grip(1.0).move_by(up(0.12));
            // Rotating the palm about world x tilts the cup about its centre;
            // place the centre so the mouth sits over the left cup when the
            // tilt passes the pour angle.
            let tilt = -(scene.manifest.constants.pour_angle + 0.12);
            let spill = -(scene.manifest.constants.pour_angle + 0.02);
            let mouth_at_spill = Quaternion::rot_x(spill).rotate(&up(0.5 * cup_h));
            let target_mouth = left_hold + up(0.5 * cup_h + 0.03);
            let centre = target_mouth - mouth_at_spill;
            r.hold_until(l.now());
            r.move_to(at(centre, dr));
            r.move_to(at(centre, Quaternion::rot_x(tilt) * dr));
            r.hold(SETTLE_TICKS).move_to(at(centre, dr));
            let done = r.now();
            l.hold_until(done).move_to(at(cl + up(0.002), dl)).grip(0.0).move_by(up(0.1));
            r.move_to(at(cr + up(0.002), dr)).grip(0.0).move_by(up(0.1));
        }
        TaskId::CanStacking => {
            let (a, b) = (pos("can_a"), pos("can_b"));
            let h = scene.object("can_b").expect("can").shape.height();
            l.move_to(at(a + up(0.10), dl)).move_to(at(a, dl)).grip(1.0);
            l.move_by(up(0.14)).move_to(at(b + up(h + 0.06), dl)).move_to(at(b + up(h), dl));
            l.grip(0.0).move_by(up(0.08));
            l.hold(scene.manifest.constants.stable_frames as u64 + 10);
        }
    }
    compile(scene, [l, r])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rollout(task: TaskId, seed: u64) -> (Scene, u64) {
        let mut s = Scene::reset_task(task, seed);
        let p = plan(&s).unwrap_or_else(|e| panic!("{task} seed {seed}: {e}"));
        for t in 1..=s.manifest.max_ticks {
            s.step(&p.action(t));
            if s.evaluate_success().success {
                return (s, t);
            }
        }
        let t = s.tick;
        (s, t)
    }

    #[test]
    fn oracle_solves_every_task_on_a_few_seeds() {
        for task in TaskId::ALL {
            for seed in 0..5 {
                let (s, t) = rollout(task, seed);
                let r = s.evaluate_success();
                assert!(r.success, "{task} seed {seed} failed at tick {t}: {r:?}");
            }
        }
    }

    #[test]
    fn plan_is_deterministic() {
        let s = Scene::reset_task(TaskId::AssemblyLine, 7);
        assert_eq!(plan(&s).unwrap(), plan(&s).unwrap());
    }
}
