//! Four-stage filtering between raw operator poses and joint commands.
//!
//! Stage order is fixed: clutch transform, cross-frame end-effector pose
//! threshold, IK convergence threshold, joint jump threshold. The first
//! rejecting stage short-circuits the rest and the previous command is held.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{pose_delta, PoseSE3};
use crate::kinematics::{ActionVector26, DualArmModel, IkConfig, KinematicChain, Side, HAND_DOF};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("clutch transform requested while the clutch is disengaged")]
    ClutchDisengaged,
    #[error("filter config field {0} must be strictly positive")]
    NonPositive(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Max joint change per frame (rad, ∞-norm).
    pub joint_jump_max: f64,
    /// Max end-effector translation per frame (m).
    pub ee_lin_max: f64,
    /// Max end-effector rotation per frame (rad).
    pub ee_ang_max: f64,
    pub ik_tol_lin: f64,
    pub ik_tol_ang: f64,
    pub ik_damping: f64,
    pub ik_max_iter: usize,
    /// Clamp to the threshold instead of holding the previous command.
    pub clamp: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            joint_jump_max: 0.15,
            ee_lin_max: 0.05,
            ee_ang_max: 0.12,
            ik_tol_lin: 1e-4,
            ik_tol_ang: 1e-3,
            ik_damping: 0.01,
            ik_max_iter: 100,
            clamp: false,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        let fields = [
            ("joint_jump_max", self.joint_jump_max),
            ("ee_lin_max", self.ee_lin_max),
            ("ee_ang_max", self.ee_ang_max),
            ("ik_tol_lin", self.ik_tol_lin),
            ("ik_tol_ang", self.ik_tol_ang),
            ("ik_damping", self.ik_damping),
        ];
        for (name, v) in fields {
            if !(v > 0.0) {
                return Err(FilterError::NonPositive(name));
            }
        }
        if self.ik_max_iter == 0 {
            return Err(FilterError::NonPositive("ik_max_iter"));
        }
        Ok(())
    }

    /// The stage-3 solver only warm-starts from the previous command.
    pub fn ik_config(&self) -> IkConfig {
        IkConfig {
            damping: self.ik_damping,
            max_iter: self.ik_max_iter,
            tol_lin: self.ik_tol_lin,
            tol_ang: self.ik_tol_ang,
            restarts: 0,
            ..IkConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOutcome {
    Passed,
    Rejected,
    Clamped,
    NotEvaluated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Clutch = 0,
    CrossFrame = 1,
    IkSolve = 2,
    JointJump = 3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClutchState {
    engaged: bool,
    controller_anchor: PoseSE3,
    robot_anchor: PoseSE3,
}

impl Default for ClutchState {
    fn default() -> Self {
        ClutchState {
            engaged: false,
            controller_anchor: PoseSE3::identity(),
            robot_anchor: PoseSE3::identity(),
        }
    }
}

impl ClutchState {
    /// Both anchors are captured together at the engage transition.
    pub fn engaged_at(controller: PoseSE3, robot: PoseSE3) -> Self {
        ClutchState {
            engaged: true,
            controller_anchor: controller,
            robot_anchor: robot,
        }
    }

    pub fn is_engaged(&self) -> bool {
        self.engaged
    }

    pub fn controller_anchor(&self) -> &PoseSE3 {
        &self.controller_anchor
    }

    pub fn robot_anchor(&self) -> &PoseSE3 {
        &self.robot_anchor
    }

    pub fn engage(&mut self, controller: PoseSE3, robot: PoseSE3) {
        *self = Self::engaged_at(controller, robot);
    }

    pub fn disengage(&mut self) {
        self.engaged = false;
    }
}

/// `robotAnchor ∘ (controllerAnchor⁻¹ ∘ controllerNow)`.
pub fn clutch_transform(clutch: &ClutchState, controller_now: &PoseSE3) -> Result<PoseSE3, FilterError> {
    if !clutch.engaged {
        return Err(FilterError::ClutchDisengaged);
    }
    let relative = clutch.controller_anchor.inverse().compose(controller_now);
    Ok(clutch.robot_anchor.compose(&relative))
}

pub fn cross_frame_pose_filter(prev: &PoseSE3, proposed: &PoseSE3, cfg: &FilterConfig) -> (PoseSE3, StageOutcome) {
    let d = pose_delta(prev, proposed);
    if d.linear <= cfg.ee_lin_max && d.angular <= cfg.ee_ang_max {
        return (*proposed, StageOutcome::Passed);
    }
    if cfg.clamp {
        let frac = (cfg.ee_lin_max / d.linear).min(cfg.ee_ang_max / d.angular).min(1.0);
        return (prev.lerp(proposed, frac), StageOutcome::Clamped);
    }
    (*prev, StageOutcome::Rejected)
}

pub fn ik_jump_filter(q_prev: &[f64], q_new: &[f64], cfg: &FilterConfig) -> (Vec<f64>, StageOutcome) {
    let jump = q_prev
        .iter()
        .zip(q_new)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if jump <= cfg.joint_jump_max {
        return (q_new.to_vec(), StageOutcome::Passed);
    }
    if cfg.clamp {
        let m = cfg.joint_jump_max;
        let q = q_prev
            .iter()
            .zip(q_new)
            .map(|(p, n)| p + (n - p).clamp(-m, m))
            .collect();
        return (q, StageOutcome::Clamped);
    }
    (q_prev.to_vec(), StageOutcome::Rejected)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub stages: [StageOutcome; 4],
    /// Joint command emitted this frame; equals the previous command after a rejection.
    pub command: Vec<f64>,
    /// Pose target produced by the clutch stage, if it ran.
    pub target: Option<PoseSE3>,
}

impl FilterReport {
    fn held(q_prev: &[f64], stages: [StageOutcome; 4], target: Option<PoseSE3>) -> Self {
        FilterReport {
            stages,
            command: q_prev.to_vec(),
            target,
        }
    }

    pub fn rejected_at(&self) -> Option<Stage> {
        const ORDER: [Stage; 4] = [Stage::Clutch, Stage::CrossFrame, Stage::IkSolve, Stage::JointJump];
        self.stages
            .iter()
            .position(|s| *s == StageOutcome::Rejected)
            .map(|i| ORDER[i])
    }

    pub fn accepted(&self) -> bool {
        self.rejected_at().is_none()
    }

    /// Four-bit summary: 0 all passed, 1..=4 rejected at that stage,
    /// 5 passed with clamping.
    pub fn code(&self) -> u8 {
        match self.rejected_at() {
            Some(s) => s as u8 + 1,
            None if self.stages.contains(&StageOutcome::Clamped) => 5,
            None => 0,
        }
    }
}

use StageOutcome::{NotEvaluated as Skip, Passed as Pass};

/// Runs the full teleoperation cascade for one arm and one frame.
pub fn run_cascade(
    controller_now: &PoseSE3,
    clutch: &ClutchState,
    q_prev: &[f64],
    ee_prev: &PoseSE3,
    chain: &KinematicChain,
    cfg: &FilterConfig,
) -> FilterReport {
    let Ok(target) = clutch_transform(clutch, controller_now) else {
        return FilterReport::held(q_prev, [StageOutcome::Rejected, Skip, Skip, Skip], None);
    };
    let (target, cross) = cross_frame_pose_filter(ee_prev, &target, cfg);
    if cross == StageOutcome::Rejected {
        return FilterReport::held(q_prev, [Pass, cross, Skip, Skip], Some(target));
    }
    let ik = match chain.solve_ik(&target, q_prev, &cfg.ik_config()) {
        Ok(r) if r.converged => r,
        _ => {
            return FilterReport::held(q_prev, [Pass, cross, StageOutcome::Rejected, Skip], Some(target));
        }
    };
    let (command, jump) = ik_jump_filter(q_prev, &ik.joints, cfg);
    FilterReport {
        stages: [Pass, cross, Pass, jump],
        command,
        target: Some(target),
    }
}

/// Cascade for commands already in joint space (policy output): the pose
/// threshold is checked on the commanded end-effector pose, IK is skipped.
pub fn filter_joint_command(
    q_cmd: &[f64],
    q_prev: &[f64],
    ee_prev: &PoseSE3,
    chain: &KinematicChain,
    cfg: &FilterConfig,
) -> FilterReport {
    let mut q = q_cmd.to_vec();
    chain.clamp(&mut q);
    let ee = chain
        .forward_kinematics(&q)
        .expect("command length matches the chain");
    let (_, cross) = cross_frame_pose_filter(ee_prev, &ee, &FilterConfig { clamp: false, ..*cfg });
    if cross == StageOutcome::Rejected && !cfg.clamp {
        return FilterReport::held(q_prev, [Skip, cross, Skip, Skip], Some(ee));
    }
    let (command, jump) = ik_jump_filter(q_prev, &q, cfg);
    let cross = if cross == StageOutcome::Rejected {
        // In clamp mode the joint clamp below bounds the motion instead.
        StageOutcome::Clamped
    } else {
        cross
    };
    FilterReport {
        stages: [Skip, cross, Skip, jump],
        command,
        target: Some(ee),
    }
}

/// Stateful per-arm cascade holding the last accepted command.
#[derive(Debug, Clone)]
pub struct ArmFilter {
    chain: KinematicChain,
    cfg: FilterConfig,
    clutch: ClutchState,
    q_last: Vec<f64>,
    ee_last: PoseSE3,
}

impl ArmFilter {
    pub fn new(chain: KinematicChain, q_init: Vec<f64>, cfg: FilterConfig) -> Self {
        let ee_last = chain
            .forward_kinematics(&q_init)
            .expect("initial configuration matches the chain");
        ArmFilter {
            chain,
            cfg,
            clutch: ClutchState::default(),
            q_last: q_init,
            ee_last,
        }
    }

    pub fn command(&self) -> &[f64] {
        &self.q_last
    }

    pub fn ee_pose(&self) -> &PoseSE3 {
        &self.ee_last
    }

    pub fn clutch(&self) -> &ClutchState {
        &self.clutch
    }

    /// One teleop frame: handles engage/disengage edges, then runs the cascade.
    pub fn step_teleop(&mut self, controller: &PoseSE3, clutch_pressed: bool) -> FilterReport {
        if clutch_pressed && !self.clutch.is_engaged() {
            self.clutch.engage(*controller, self.ee_last);
        } else if !clutch_pressed && self.clutch.is_engaged() {
            self.clutch.disengage();
        }
        let report = run_cascade(controller, &self.clutch, &self.q_last, &self.ee_last, &self.chain, &self.cfg);
        self.accept(&report);
        report
    }

    pub fn step_joint(&mut self, q_cmd: &[f64]) -> FilterReport {
        let report = filter_joint_command(q_cmd, &self.q_last, &self.ee_last, &self.chain, &self.cfg);
        self.accept(&report);
        report
    }

    fn accept(&mut self, report: &FilterReport) {
        if report.command != self.q_last {
            self.q_last.clone_from(&report.command);
            self.ee_last = self
                .chain
                .forward_kinematics(&self.q_last)
                .expect("command length matches the chain");
        }
    }
}

/// Operator input for one hand in one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandInput {
    pub pose: PoseSE3,
    pub fingers: [f64; HAND_DOF],
    pub clutch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualFilterReport {
    pub left: FilterReport,
    pub right: FilterReport,
    pub action: ActionVector26,
}

impl DualFilterReport {
    /// Left arm code in the low nibble, right arm in the high nibble.
    pub fn outcome_byte(&self) -> u8 {
        self.left.code() | (self.right.code() << 4)
    }
}

/// Both arm cascades plus finger range-clamping, producing 26-dim commands.
#[derive(Debug, Clone)]
pub struct DualArmFilter {
    model: DualArmModel,
    arms: [ArmFilter; 2],
    action: ActionVector26,
}

impl DualArmFilter {
    pub fn new(model: DualArmModel, initial: ActionVector26, cfg: FilterConfig) -> Self {
        let arms = Side::BOTH
            .map(|side| ArmFilter::new(model.arm(side).clone(), initial.arm(side).to_vec(), cfg));
        DualArmFilter {
            model,
            arms,
            action: initial,
        }
    }

    pub fn action(&self) -> &ActionVector26 {
        &self.action
    }

    pub fn arm(&self, side: Side) -> &ArmFilter {
        &self.arms[side.index()]
    }

    pub fn step_teleop(&mut self, hands: &[HandInput; 2]) -> DualFilterReport {
        let reports = Side::BOTH.map(|side| {
            let input = &hands[side.index()];
            let r = self.arms[side.index()].step_teleop(&input.pose, input.clutch);
            self.action.set_arm(side, &r.command);
            let fingers = self.model.fingers_to_joints(side, &input.fingers);
            self.action.set_hand(side, &fingers);
            r
        });
        self.finish(reports)
    }

    pub fn step_joint(&mut self, cmd: &ActionVector26) -> DualFilterReport {
        let mut cmd = *cmd;
        self.model.clamp(&mut cmd);
        let reports = Side::BOTH.map(|side| {
            let r = self.arms[side.index()].step_joint(cmd.arm(side));
            self.action.set_arm(side, &r.command);
            self.action.set_hand(side, cmd.hand(side));
            r
        });
        self.finish(reports)
    }

    fn finish(&self, [left, right]: [FilterReport; 2]) -> DualFilterReport {
        DualFilterReport {
            left,
            right,
            action: self.action,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Quaternion, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn model() -> DualArmModel {
        DualArmModel::canonical()
    }

    #[test]
    fn clutch_transform_examples() {
        let robot = PoseSE3::new(Vec3::new(0.4, 0.2, 0.1), Quaternion::rot_y(0.3));
        let ctrl = PoseSE3::new(Vec3::new(1.0, -2.0, 1.5), Quaternion::rot_x(0.7));
        let clutch = ClutchState::engaged_at(ctrl, robot);
        let t = clutch_transform(&clutch, &ctrl).unwrap();
        assert!((t.position - robot.position).norm() < 1e-15);
        assert!(t.orientation.angle_to(&robot.orientation) < 1e-9);

        let robot = PoseSE3::from_translation(0.4, 0.2, 0.1);
        let clutch = ClutchState::engaged_at(PoseSE3::identity(), robot);
        let t = clutch_transform(&clutch, &PoseSE3::from_translation(0.1, 0.0, 0.0)).unwrap();
        assert!((t.position - Vec3::new(0.5, 0.2, 0.1)).norm() < 1e-15);

        // Anchor rotated +90° about z: a world +x motion is -y in the anchor
        // frame (Rzᵀ·x = -y), which is applied along the robot anchor's axes.
        let robot = PoseSE3::new(Vec3::new(0.4, 0.2, 0.1), Quaternion::rot_x(FRAC_PI_2));
        let anchor = PoseSE3::from_rotation(Quaternion::rot_z(FRAC_PI_2));
        let clutch = ClutchState::engaged_at(anchor, robot);
        let moved = PoseSE3::new(Vec3::new(0.1, 0.0, 0.0), anchor.orientation);
        let t = clutch_transform(&clutch, &moved).unwrap();
        // Rx(90°)·(0, -0.1, 0) = (0, 0, -0.1).
        let expected = robot.position + Vec3::new(0.0, 0.0, -0.1);
        assert!((t.position - expected).norm() < 1e-12);
        assert!(t.orientation.angle_to(&robot.orientation) < 1e-9);

        assert_eq!(
            clutch_transform(&ClutchState::default(), &moved),
            Err(FilterError::ClutchDisengaged)
        );
    }

    #[test]
    fn cross_frame_examples() {
        let cfg = FilterConfig {
            ee_lin_max: 0.10,
            ..FilterConfig::default()
        };
        let prev = PoseSE3::from_translation(0.3, 0.1, 0.2);
        assert_eq!(cross_frame_pose_filter(&prev, &prev, &cfg).1, StageOutcome::Passed);

        let far = PoseSE3::from_translation(0.6, 0.1, 0.2);
        let (acc, out) = cross_frame_pose_filter(&prev, &far, &cfg);
        assert_eq!(out, StageOutcome::Rejected);
        assert_eq!(acc, prev);

        let cfg = FilterConfig {
            ee_lin_max: 0.10,
            ee_ang_max: 0.15,
            ..FilterConfig::default()
        };
        let proposed = PoseSE3::new(Vec3::new(0.35, 0.1, 0.2), Quaternion::rot_z(0.2));
        let d = pose_delta(&prev, &proposed);
        assert!(d.linear <= 0.10 && d.angular > 0.15);
        let (acc, out) = cross_frame_pose_filter(&prev, &proposed, &cfg);
        assert_eq!(out, StageOutcome::Rejected);
        assert_eq!(acc, prev);
    }

    #[test]
    fn cross_frame_clamp_mode() {
        let cfg = FilterConfig {
            clamp: true,
            ..FilterConfig::default()
        };
        let prev = PoseSE3::identity();
        let (acc, out) = cross_frame_pose_filter(&prev, &PoseSE3::from_translation(0.5, 0.0, 0.0), &cfg);
        assert_eq!(out, StageOutcome::Clamped);
        assert!((acc.position.x - cfg.ee_lin_max).abs() < 1e-12);
    }

    #[test]
    fn jump_filter_examples() {
        let cfg = FilterConfig {
            joint_jump_max: 0.2,
            ..FilterConfig::default()
        };
        let q = [0.1, -0.4, 0.2, 1.0, 0.0, 0.3, 0.0];
        assert_eq!(ik_jump_filter(&q, &q, &cfg).1, StageOutcome::Passed);

        let mut big = q;
        big[3] += 0.5;
        let (acc, out) = ik_jump_filter(&q, &big, &cfg);
        assert_eq!(out, StageOutcome::Rejected);
        assert_eq!(acc, q.to_vec());

        let small: Vec<f64> = q.iter().map(|v| v + 0.19).collect();
        assert_eq!(ik_jump_filter(&q, &small, &cfg).1, StageOutcome::Passed);

        let clamped = FilterConfig { clamp: true, ..cfg };
        let (acc, out) = ik_jump_filter(&q, &big, &clamped);
        assert_eq!(out, StageOutcome::Clamped);
        assert!((acc[3] - (q[3] + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn cascade_stationary_controller_is_a_fixed_point() {
        let m = model();
        let chain = m.arm(Side::Left);
        let q = m.neutral.left.clone();
        let ee = chain.forward_kinematics(&q).unwrap();
        let ctrl = PoseSE3::new(Vec3::new(0.0, 0.3, 1.2), Quaternion::rot_z(0.4));
        let clutch = ClutchState::engaged_at(ctrl, ee);
        let r = run_cascade(&ctrl, &clutch, &q, &ee, chain, &FilterConfig::default());
        assert_eq!(r.stages, [Pass, Pass, Pass, Pass]);
        assert_eq!(r.command, q);
    }

    #[test]
    fn cascade_rejects_unreachable_target_at_ik_stage() {
        let m = model();
        let chain = m.arm(Side::Left);
        let q = m.neutral.left.clone();
        let ee = chain.forward_kinematics(&q).unwrap();
        let clutch = ClutchState::engaged_at(PoseSE3::identity(), ee);
        // Twice the maximum reach away from the shoulder.
        let shoulder = chain.base.position;
        let dir = (ee.position - shoulder).normalize();
        let target = shoulder + dir * (2.0 * chain.max_reach());
        let ctrl = PoseSE3::new(target - ee.position, Quaternion::IDENTITY);
        let cfg = FilterConfig {
            ee_lin_max: 10.0,
            ..FilterConfig::default()
        };
        let r = run_cascade(&ctrl, &clutch, &q, &ee, chain, &cfg);
        assert_eq!(r.stages, [Pass, Pass, StageOutcome::Rejected, Skip]);
        assert_eq!(r.command, q);
        assert_eq!(r.rejected_at(), Some(Stage::IkSolve));
        assert_eq!(r.code(), 3);
    }

    #[test]
    fn cascade_teleport_rejected_before_ik() {
        let m = model();
        let chain = m.arm(Side::Right);
        let q = m.neutral.right.clone();
        let ee = chain.forward_kinematics(&q).unwrap();
        let clutch = ClutchState::engaged_at(PoseSE3::identity(), ee);
        let ctrl = PoseSE3::from_translation(1.0, 0.0, 0.0);
        let r = run_cascade(&ctrl, &clutch, &q, &ee, chain, &FilterConfig::default());
        assert_eq!(r.stages, [Pass, StageOutcome::Rejected, Skip, Skip]);
        assert_eq!(r.command, q);
    }

    #[test]
    fn disengaged_clutch_holds() {
        let m = model();
        let chain = m.arm(Side::Right);
        let q = m.neutral.right.clone();
        let ee = chain.forward_kinematics(&q).unwrap();
        let r = run_cascade(&ee, &ClutchState::default(), &q, &ee, chain, &FilterConfig::default());
        assert_eq!(r.stages, [StageOutcome::Rejected, Skip, Skip, Skip]);
        assert_eq!(r.command, q);
        assert!(r.target.is_none());
    }

    #[test]
    fn small_motion_is_tracked() {
        let m = model();
        let mut f = ArmFilter::new(m.arm(Side::Left).clone(), m.neutral.left.clone(), FilterConfig::default());
        let start = *f.ee_pose();
        let mut ctrl = PoseSE3::identity();
        f.step_teleop(&ctrl, true);
        for _ in 0..20 {
            ctrl.position.x += 0.004;
            let r = f.step_teleop(&ctrl, true);
            assert!(r.accepted(), "{r:?}");
        }
        // Controller deltas are expressed in the robot anchor frame.
        let expected = start.orientation.rotate(&Vec3::new(0.08, 0.0, 0.0));
        let moved = f.ee_pose().position - start.position;
        assert!((moved - expected).norm() < 2e-4);
    }

    #[test]
    fn reengage_has_no_target_jump() {
        let m = model();
        let mut f = ArmFilter::new(m.arm(Side::Left).clone(), m.neutral.left.clone(), FilterConfig::default());
        let mut ctrl = PoseSE3::identity();
        f.step_teleop(&ctrl, true);
        for _ in 0..10 {
            ctrl.position.y += 0.003;
            f.step_teleop(&ctrl, true);
        }
        f.step_teleop(&ctrl, false);
        // Operator repositions arbitrarily while disengaged.
        let far = PoseSE3::new(Vec3::new(-3.0, 2.0, 5.0), Quaternion::rot_y(2.0));
        let held = f.step_teleop(&far, false);
        assert_eq!(held.rejected_at(), Some(Stage::Clutch));
        let ee_before = *f.ee_pose();
        let r = f.step_teleop(&far, true);
        let target = r.target.unwrap();
        let d = pose_delta(&ee_before, &target);
        assert_eq!(d.linear, 0.0);
        assert!(d.angular < 1e-12);
        assert!(r.accepted());
    }

    #[test]
    fn dual_filter_assembles_action() {
        let m = model();
        let mut f = DualArmFilter::new(m.clone(), m.neutral_action(), FilterConfig::default());
        let input = HandInput {
            pose: PoseSE3::identity(),
            fingers: [1.0, 1.0, 1.0, 1.0, 1.0, 2.0],
            clutch: false,
        };
        let r = f.step_teleop(&[input, input]);
        assert_eq!(r.action.arm(Side::Left), m.neutral.left.as_slice());
        assert!(r.action.hand(Side::Right).iter().all(|v| *v == 1.5));
        assert_eq!(r.outcome_byte(), 0x11);
    }

    #[test]
    fn joint_command_path() {
        let m = model();
        let mut f = DualArmFilter::new(m.clone(), m.neutral_action(), FilterConfig::default());
        let mut cmd = m.neutral_action();
        cmd.0[3] += 0.05;
        let r = f.step_joint(&cmd);
        assert!(r.left.accepted());
        assert_eq!(r.action.0[3], cmd.0[3]);
        cmd.0[3] += 1.0;
        let r = f.step_joint(&cmd);
        assert!(!r.left.accepted());
        assert_eq!(r.action.0[3], m.neutral.left[3] + 0.05);
    }

    #[test]
    fn config_validation() {
        assert!(FilterConfig::default().validate().is_ok());
        let bad = FilterConfig {
            ee_ang_max: 0.0,
            ..FilterConfig::default()
        };
        assert_eq!(bad.validate(), Err(FilterError::NonPositive("ee_ang_max")));
        let json = r#"{"joint_jump_max": 0.1, "typo": 1}"#;
        assert!(serde_json::from_str::<FilterConfig>(json).is_err());
    }

    fn random_stream(seed: u64, frames: usize) -> Vec<[HandInput; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pose = [PoseSE3::identity(); 2];
        let mut clutch = [true; 2];
        (0..frames)
            .map(|_| {
                std::array::from_fn(|h| {
                    match rng.random_range(0..100) {
                        0..=79 => {
                            let dp = Vec3::new(
                                rng.random_range(-0.01..0.01),
                                rng.random_range(-0.01..0.01),
                                rng.random_range(-0.01..0.01),
                            );
                            let dr = Vec3::new(
                                rng.random_range(-0.03..0.03),
                                rng.random_range(-0.03..0.03),
                                rng.random_range(-0.03..0.03),
                            );
                            pose[h].position += dp;
                            pose[h].orientation = pose[h].orientation * Quaternion::from_rotation_vector(&dr);
                        }
                        80..=94 => {
                            pose[h].position = Vec3::new(
                                rng.random_range(-1.0..1.0),
                                rng.random_range(-1.0..1.0),
                                rng.random_range(-1.0..1.0),
                            );
                        }
                        _ => clutch[h] = !clutch[h],
                    }
                    HandInput {
                        pose: pose[h],
                        fingers: [rng.random_range(-0.2..1.2); HAND_DOF],
                        clutch: clutch[h],
                    }
                })
            })
            .collect()
    }

    #[test]
    fn cascade_is_deterministic() {
        let m = model();
        let stream = random_stream(77, 2_000);
        let run = || {
            let mut f = DualArmFilter::new(m.clone(), m.neutral_action(), FilterConfig::default());
            stream.iter().map(|h| f.step_teleop(h)).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn short_circuit_is_observable() {
        let m = model();
        let mut f = DualArmFilter::new(m.clone(), m.neutral_action(), FilterConfig::default());
        for hands in random_stream(5, 3_000) {
            let r = f.step_teleop(&hands);
            for arm in [&r.left, &r.right] {
                if let Some(stage) = arm.rejected_at() {
                    let k = stage as usize;
                    assert!(arm.stages[k + 1..].iter().all(|s| *s == Skip));
                }
            }
        }
    }
}
