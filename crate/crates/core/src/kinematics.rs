//! Serial-chain forward kinematics and damped-least-squares IK for the
//! dual 7-DoF arm + 6-DoF hand model.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{PoseSE3, Quaternion, Vec3};

pub const ARM_DOF: usize = 7;
pub const HAND_DOF: usize = 6;
pub const ACTION_DIM: usize = 26;

const RESTART_SEED: u64 = 0x1c0f_fee5;

/// The model shipped with the crate.
pub const CANONICAL_MODEL_JSON: &str = include_str!("../assets/dual_arm_model.json");

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("expected {expected} joint values, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid robot model: {0}")]
    InvalidModel(String),
    #[error("robot model parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("io error reading robot model: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }

    pub fn other(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Left => "left",
            Side::Right => "right",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Joint {
    pub name: String,
    pub axis: Vec3,
    /// Offset from the previous joint frame (or the chain base) to this joint.
    pub origin: PoseSE3,
    pub lower: f64,
    pub upper: f64,
}

impl Joint {
    pub fn revolute(name: &str, axis: Vec3, origin: PoseSE3, lower: f64, upper: f64) -> Self {
        Joint {
            name: name.to_string(),
            axis,
            origin,
            lower,
            upper,
        }
    }

    pub fn clamp(&self, q: f64) -> f64 {
        q.clamp(self.lower, self.upper)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct KinematicChain {
    pub base: PoseSE3,
    pub joints: Vec<Joint>,
    /// End-effector (palm) frame relative to the last joint.
    #[serde(default)]
    pub tip: PoseSE3,
}

impl KinematicChain {
    pub fn new(base: PoseSE3, joints: Vec<Joint>, tip: PoseSE3) -> Result<Self, KinematicsError> {
        let chain = KinematicChain { base, joints, tip };
        chain.validate()?;
        Ok(chain)
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        for j in &self.joints {
            if !(j.lower < j.upper) {
                return Err(KinematicsError::InvalidModel(format!(
                    "joint {} has lower {} >= upper {}",
                    j.name, j.lower, j.upper
                )));
            }
            if (j.axis.norm() - 1.0).abs() > 1e-9 {
                return Err(KinematicsError::InvalidModel(format!(
                    "joint {} axis is not unit length",
                    j.name
                )));
            }
        }
        Ok(())
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    fn check_dim(&self, q: &[f64]) -> Result<(), KinematicsError> {
        if q.len() != self.joints.len() {
            return Err(KinematicsError::DimensionMismatch {
                expected: self.joints.len(),
                actual: q.len(),
            });
        }
        Ok(())
    }

    pub fn forward_kinematics(&self, q: &[f64]) -> Result<PoseSE3, KinematicsError> {
        self.check_dim(q)?;
        Ok(self.fk_unchecked(q))
    }

    fn fk_unchecked(&self, q: &[f64]) -> PoseSE3 {
        let mut t = self.base;
        for (j, &qi) in self.joints.iter().zip(q) {
            t = t
                .compose(&j.origin)
                .compose(&PoseSE3::from_rotation(Quaternion::from_axis_angle(&j.axis, qi)));
        }
        t.compose(&self.tip)
    }

    /// World-frame joint axes and positions, plus the end-effector pose.
    fn joint_frames(&self, q: &[f64]) -> (Vec<(Vec3, Vec3)>, PoseSE3) {
        let mut t = self.base;
        let mut frames = Vec::with_capacity(self.joints.len());
        for (j, &qi) in self.joints.iter().zip(q) {
            t = t.compose(&j.origin);
            frames.push((t.orientation.rotate(&j.axis), t.position));
            t = t.compose(&PoseSE3::from_rotation(Quaternion::from_axis_angle(&j.axis, qi)));
        }
        (frames, t.compose(&self.tip))
    }

    /// Geometric Jacobian (6×n): rows are world-frame linear velocity then
    /// angular velocity of the end-effector.
    pub fn jacobian(&self, q: &[f64]) -> Result<DMatrix<f64>, KinematicsError> {
        self.check_dim(q)?;
        Ok(self.jacobian_unchecked(q).0)
    }

    fn jacobian_unchecked(&self, q: &[f64]) -> (DMatrix<f64>, PoseSE3) {
        let (frames, ee) = self.joint_frames(q);
        let mut jac = DMatrix::zeros(6, q.len());
        for (c, (axis, origin)) in frames.iter().enumerate() {
            let lin = axis.cross(&(ee.position - origin));
            for r in 0..3 {
                jac[(r, c)] = lin[r];
                jac[(r + 3, c)] = axis[r];
            }
        }
        (jac, ee)
    }

    /// Central finite-difference Jacobian; the angular rows use the rotation
    /// vector of `R(q+h)·R(q-h)ᵀ`.
    pub fn jacobian_numeric(&self, q: &[f64], h: f64) -> Result<DMatrix<f64>, KinematicsError> {
        self.check_dim(q)?;
        assert!(h > 0.0, "finite-difference step must be positive");
        let mut jac = DMatrix::zeros(6, q.len());
        let mut qp = q.to_vec();
        for c in 0..q.len() {
            qp[c] = q[c] + h;
            let plus = self.fk_unchecked(&qp);
            qp[c] = q[c] - h;
            let minus = self.fk_unchecked(&qp);
            qp[c] = q[c];
            let dp = (plus.position - minus.position) / (2.0 * h);
            let dw = (plus.orientation * minus.orientation.inverse()).rotation_vector() / (2.0 * h);
            for r in 0..3 {
                jac[(r, c)] = dp[r];
                jac[(r + 3, c)] = dw[r];
            }
        }
        Ok(jac)
    }

    pub fn clamp(&self, q: &mut [f64]) {
        for (qi, j) in q.iter_mut().zip(&self.joints) {
            *qi = j.clamp(*qi);
        }
    }

    pub fn within_limits(&self, q: &[f64]) -> bool {
        q.iter()
            .zip(&self.joints)
            .all(|(&qi, j)| qi >= j.lower && qi <= j.upper)
    }

    /// Maximum straight-line distance from the first joint to the tip.
    pub fn max_reach(&self) -> f64 {
        self.joints
            .iter()
            .skip(1)
            .map(|j| j.origin.position.norm())
            .sum::<f64>()
            + self.tip.position.norm()
    }

    pub fn solve_ik(&self, target: &PoseSE3, q_init: &[f64], cfg: &IkConfig) -> Result<IkResult, KinematicsError> {
        self.check_dim(q_init)?;
        let mut best = solve_dls(self, target, q_init, cfg);
        if best.converged || cfg.restarts == 0 {
            return Ok(best);
        }
        // Deterministic restarts escape joint-limit traps around q_init.
        let mut rng = ChaCha8Rng::seed_from_u64(RESTART_SEED);
        let mut iterations = best.iterations;
        for _ in 0..cfg.restarts {
            let seed: Vec<f64> = self
                .joints
                .iter()
                .map(|j| rng.random_range(j.lower..=j.upper))
                .collect();
            let r = solve_dls(self, target, &seed, cfg);
            iterations += r.iterations;
            let better = r.converged
                || r.residual.linear + r.residual.angular < best.residual.linear + best.residual.angular;
            if better {
                best = r;
            }
            if best.converged {
                break;
            }
        }
        best.iterations = iterations;
        Ok(best)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IkConfig {
    pub damping: f64,
    pub max_iter: usize,
    pub tol_lin: f64,
    pub tol_ang: f64,
    /// Per-iteration cap on the translational error fed to the update.
    pub max_step_lin: f64,
    /// Per-iteration cap on the rotational error fed to the update.
    pub max_step_ang: f64,
    /// Extra solves from seeded configurations when the first does not converge.
    pub restarts: usize,
}

impl Default for IkConfig {
    fn default() -> Self {
        IkConfig {
            damping: 0.01,
            max_iter: 100,
            tol_lin: 1e-4,
            tol_ang: 1e-3,
            max_step_lin: 0.1,
            max_step_ang: 0.5,
            restarts: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub linear: f64,
    pub angular: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IkResult {
    pub joints: Vec<f64>,
    pub residual: Residual,
    pub iterations: usize,
    pub converged: bool,
}

/// 6-vector pose error in the world frame: translation, then the rotation
/// vector of `target · currentᵀ`.
pub fn pose_error(target: &PoseSE3, current: &PoseSE3) -> Vector6<f64> {
    let dp = target.position - current.position;
    let dw = (target.orientation * current.orientation.inverse()).rotation_vector();
    Vector6::new(dp.x, dp.y, dp.z, dw.x, dw.y, dw.z)
}

fn residual_of(e: &Vector6<f64>) -> Residual {
    Residual {
        linear: e.fixed_rows::<3>(0).norm(),
        angular: e.fixed_rows::<3>(3).norm(),
    }
}

fn solve_dls(chain: &KinematicChain, target: &PoseSE3, q_init: &[f64], cfg: &IkConfig) -> IkResult {
    let mut q = q_init.to_vec();
    let lambda2 = cfg.damping * cfg.damping;
    let mut iterations = 0;
    loop {
        let (jac, ee) = chain.jacobian_unchecked(&q);
        let e = pose_error(target, &ee);
        let residual = residual_of(&e);
        let converged = residual.linear <= cfg.tol_lin && residual.angular <= cfg.tol_ang;
        if converged || iterations >= cfg.max_iter {
            return IkResult {
                joints: q,
                residual,
                iterations,
                converged,
            };
        }
        // Δq = Jᵀ (J Jᵀ + λ² I)⁻¹ e
        let step = clamp_step(&e, cfg);
        // Joints pinned at a limit and pushed further into it drop out of the
        // Jacobian so the remaining joints take up the motion.
        let mut active = jac;
        let mut dq = None;
        for _ in 0..=q.len() {
            let Some(d) = dls_step(&active, &step, lambda2) else {
                break;
            };
            let mut blocked = false;
            for (c, (qi, j)) in q.iter().zip(&chain.joints).enumerate() {
                let pinned = (*qi <= j.lower && d[c] < 0.0) || (*qi >= j.upper && d[c] > 0.0);
                if pinned && active.column(c).iter().any(|v| *v != 0.0) {
                    active.column_mut(c).fill(0.0);
                    blocked = true;
                }
            }
            dq = Some(d);
            if !blocked {
                break;
            }
        }
        let Some(dq) = dq else {
            return IkResult {
                joints: q,
                residual,
                iterations,
                converged,
            };
        };
        for (qi, d) in q.iter_mut().zip(dq.iter()) {
            *qi += d;
        }
        chain.clamp(&mut q);
        iterations += 1;
    }
}

/// `Jᵀ (J Jᵀ + λ² I)⁻¹ e`; `None` when the system is singular (λ = 0).
fn dls_step(jac: &DMatrix<f64>, e: &Vector6<f64>, lambda2: f64) -> Option<DVector<f64>> {
    let jjt: Matrix6<f64> = (jac * jac.transpose()).fixed_view::<6, 6>(0, 0).into_owned()
        + Matrix6::identity() * lambda2;
    let y = jjt.cholesky()?.solve(e);
    Some(jac.transpose() * DVector::from_column_slice(y.as_slice()))
}

// Bounds the task-space step so a far target is approached along the
// linearization instead of overshooting it.
fn clamp_step(e: &Vector6<f64>, cfg: &IkConfig) -> Vector6<f64> {
    let mut out = *e;
    let lin = e.fixed_rows::<3>(0).norm();
    if lin > cfg.max_step_lin {
        out.fixed_rows_mut::<3>(0).scale_mut(cfg.max_step_lin / lin);
    }
    let ang = e.fixed_rows::<3>(3).norm();
    if ang > cfg.max_step_ang {
        out.fixed_rows_mut::<3>(3).scale_mut(cfg.max_step_ang / ang);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionVector26(pub [f64; ACTION_DIM]);

impl Default for ActionVector26 {
    fn default() -> Self {
        ActionVector26([0.0; ACTION_DIM])
    }
}

impl ActionVector26 {
    pub fn arm_range(side: Side) -> std::ops::Range<usize> {
        match side {
            Side::Left => 0..7,
            Side::Right => 13..20,
        }
    }

    pub fn hand_range(side: Side) -> std::ops::Range<usize> {
        match side {
            Side::Left => 7..13,
            Side::Right => 20..26,
        }
    }

    pub fn arm(&self, side: Side) -> &[f64] {
        &self.0[Self::arm_range(side)]
    }

    pub fn hand(&self, side: Side) -> &[f64] {
        &self.0[Self::hand_range(side)]
    }

    pub fn set_arm(&mut self, side: Side, q: &[f64]) {
        self.0[Self::arm_range(side)].copy_from_slice(q);
    }

    pub fn set_hand(&mut self, side: Side, q: &[f64]) {
        self.0[Self::hand_range(side)].copy_from_slice(q);
    }

    /// Rounds every component to the nearest `f32`, the storage precision.
    pub fn quantized(&self) -> Self {
        let mut out = *self;
        for v in out.0.iter_mut() {
            *v = *v as f32 as f64;
        }
        out
    }

    pub fn to_f32(&self) -> [f32; ACTION_DIM] {
        self.0.map(|v| v as f32)
    }

    pub fn from_f32(v: &[f32; ACTION_DIM]) -> Self {
        ActionVector26(v.map(f64::from))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HandJoint {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SidePair<T> {
    pub left: T,
    pub right: T,
}

impl<T> SidePair<T> {
    pub fn get(&self, side: Side) -> &T {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }
}

/// Declarative description of the dual-arm humanoid upper body.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DualArmModel {
    pub model_version: String,
    pub name: String,
    pub arms: SidePair<KinematicChain>,
    pub hands: SidePair<Vec<HandJoint>>,
    pub neutral: SidePair<Vec<f64>>,
}

impl DualArmModel {
    pub fn canonical() -> Self {
        Self::from_json(CANONICAL_MODEL_JSON).expect("bundled robot model is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, KinematicsError> {
        let model: DualArmModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self, KinematicsError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        for side in Side::BOTH {
            let arm = self.arms.get(side);
            arm.validate()?;
            if arm.dof() != ARM_DOF {
                return Err(KinematicsError::InvalidModel(format!(
                    "{side} arm has {} joints, expected {ARM_DOF}",
                    arm.dof()
                )));
            }
            let hand = self.hands.get(side);
            if hand.len() != HAND_DOF {
                return Err(KinematicsError::InvalidModel(format!(
                    "{side} hand has {} joints, expected {HAND_DOF}",
                    hand.len()
                )));
            }
            if let Some(j) = hand.iter().find(|j| !(j.lower < j.upper)) {
                return Err(KinematicsError::InvalidModel(format!(
                    "hand joint {} has lower >= upper",
                    j.name
                )));
            }
            let neutral = self.neutral.get(side);
            if neutral.len() != ARM_DOF || !arm.within_limits(neutral) {
                return Err(KinematicsError::InvalidModel(format!(
                    "{side} neutral configuration is malformed or outside limits"
                )));
            }
        }
        Ok(())
    }

    pub fn arm(&self, side: Side) -> &KinematicChain {
        self.arms.get(side)
    }

    pub fn limits(&self) -> ([f64; ACTION_DIM], [f64; ACTION_DIM]) {
        let mut lo = [0.0; ACTION_DIM];
        let mut hi = [0.0; ACTION_DIM];
        for side in Side::BOTH {
            for (i, j) in ActionVector26::arm_range(side).zip(&self.arm(side).joints) {
                lo[i] = j.lower;
                hi[i] = j.upper;
            }
            for (i, j) in ActionVector26::hand_range(side).zip(self.hands.get(side)) {
                lo[i] = j.lower;
                hi[i] = j.upper;
            }
        }
        (lo, hi)
    }

    pub fn clamp(&self, a: &mut ActionVector26) {
        let (lo, hi) = self.limits();
        for i in 0..ACTION_DIM {
            a.0[i] = a.0[i].clamp(lo[i], hi[i]);
        }
    }

    /// Neutral arms, open hands.
    pub fn neutral_action(&self) -> ActionVector26 {
        let mut a = ActionVector26::default();
        for side in Side::BOTH {
            a.set_arm(side, self.neutral.get(side));
            let open: Vec<f64> = self.hands.get(side).iter().map(|j| j.lower).collect();
            a.set_hand(side, &open);
        }
        a
    }

    /// Direct position mapping of normalized finger values in `[0, 1]`.
    pub fn fingers_to_joints(&self, side: Side, fingers: &[f64; HAND_DOF]) -> [f64; HAND_DOF] {
        let mut out = [0.0; HAND_DOF];
        for ((o, f), j) in out.iter_mut().zip(fingers).zip(self.hands.get(side)) {
            *o = j.lower + f.clamp(0.0, 1.0) * (j.upper - j.lower);
        }
        out
    }

    /// Mean normalized closure of a hand, in `[0, 1]`.
    pub fn hand_closure(&self, a: &ActionVector26, side: Side) -> f64 {
        a.hand(side)
            .iter()
            .zip(self.hands.get(side))
            .map(|(q, j)| ((q - j.lower) / (j.upper - j.lower)).clamp(0.0, 1.0))
            .sum::<f64>()
            / HAND_DOF as f64
    }

    pub fn ee_pose(&self, a: &ActionVector26, side: Side) -> PoseSE3 {
        self.arm(side).fk_unchecked(a.arm(side))
    }
}
