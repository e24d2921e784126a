//! Rigid and similarity transforms shared by every other module.
//!
//! Quaternions are stored `(w, x, y, z)`, unit-norm, with `w >= 0`, so every
//! rotation has exactly one stored representation. Lengths are meters and
//! angles radians throughout.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("quaternion has zero or non-finite norm")]
    DegenerateQuaternion,
    #[error("similarity scale must be positive and finite, got {0}")]
    NonPositiveScale(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct Quaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes and canonicalizes the given components.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeomError> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n < 1e-12 {
            return Err(GeomError::DegenerateQuaternion);
        }
        Ok(Self::renormalized(w, x, y, z))
    }

    fn canonical(w: f64, x: f64, y: f64, z: f64) -> Self {
        if w < 0.0 {
            Quaternion {
                w: -w,
                x: -x,
                y: -y,
                z: -z,
            }
        } else {
            Quaternion { w, x, y, z }
        }
    }

    // Already-unit inputs pass through untouched so stored values are stable
    // under re-parsing.
    fn renormalized(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
            return Self::canonical(w, x, y, z);
        }
        Self::canonical(w / n, x / n, y / n, z / n)
    }

    /// Rotation of `angle` radians about `axis`. A zero axis yields identity.
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n < 1e-15 {
            return Self::IDENTITY;
        }
        let (s, c) = (angle * 0.5).sin_cos();
        let a = axis / n;
        Self::renormalized(c, a.x * s, a.y * s, a.z * s)
    }

    /// Exponential map from a rotation vector (axis times angle).
    pub fn from_rotation_vector(v: &Vec3) -> Self {
        let angle = v.norm();
        if angle < 1e-15 {
            return Self::renormalized(1.0, v.x * 0.5, v.y * 0.5, v.z * 0.5);
        }
        Self::from_axis_angle(v, angle)
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::x(), angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::y(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::z(), angle)
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let r = Rotation3::from_matrix(m);
        Self::from_unit(&UnitQuaternion::from_rotation_matrix(&r))
    }

    pub fn from_unit(q: &UnitQuaternion<f64>) -> Self {
        Self::renormalized(q.w, q.i, q.j, q.k)
    }

    pub fn to_unit(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(self.w, self.x, self.y, self.z))
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn as_wxyz(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn inverse(&self) -> Self {
        Self::canonical(self.w, -self.x, -self.y, -self.z)
    }

    pub fn dot(&self, o: &Quaternion) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let v = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        2.0 * v.atan2(self.w.abs())
    }

    /// Angle of the relative rotation `self^-1 * other`, in `[0, pi]`.
    pub fn angle_to(&self, other: &Quaternion) -> f64 {
        (self.inverse() * *other).angle()
    }

    /// Logarithm map: axis times angle, angle in `[0, pi]`.
    pub fn rotation_vector(&self) -> Vec3 {
        let v = Vec3::new(self.x, self.y, self.z);
        let vn = v.norm();
        if vn < 1e-15 {
            return v * 2.0;
        }
        let angle = 2.0 * vn.atan2(self.w);
        v * (angle / vn)
    }

    pub fn rotate(&self, p: &Vec3) -> Vec3 {
        // v' = v + 2w(u x v) + 2 u x (u x v)
        let u = Vec3::new(self.x, self.y, self.z);
        let t = u.cross(p) * 2.0;
        p + t * self.w + u.cross(&t)
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Spherical interpolation along the shorter arc.
    pub fn slerp(&self, other: &Quaternion, t: f64) -> Self {
        let rel = self.inverse() * *other;
        *self * Self::from_rotation_vector(&(rel.rotation_vector() * t))
    }
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;

    fn mul(self, b: Quaternion) -> Quaternion {
        let a = self;
        Quaternion::renormalized(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }
}

impl TryFrom<[f64; 4]> for Quaternion {
    type Error = GeomError;

    fn try_from(v: [f64; 4]) -> Result<Self, GeomError> {
        Quaternion::from_wxyz(v[0], v[1], v[2], v[3])
    }
}

impl From<Quaternion> for [f64; 4] {
    fn from(q: Quaternion) -> Self {
        q.as_wxyz()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseSE3 {
    pub position: Vec3,
    pub orientation: Quaternion,
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(position: Vec3, orientation: Quaternion) -> Self {
        PoseSE3 {
            position,
            orientation,
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(Vec3::new(x, y, z), Quaternion::IDENTITY)
    }

    pub fn from_rotation(orientation: Quaternion) -> Self {
        Self::new(Vec3::zeros(), orientation)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            position: self.position + self.orientation.rotate(&other.position),
            orientation: self.orientation * other.orientation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let qi = self.orientation.inverse();
        PoseSE3 {
            position: -qi.rotate(&self.position),
            orientation: qi,
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.position + self.orientation.rotate(p)
    }

    /// 7 values `[x, y, z, qw, qx, qy, qz]`.
    pub fn to_array(&self) -> [f64; 7] {
        let q = self.orientation.as_wxyz();
        [
            self.position.x,
            self.position.y,
            self.position.z,
            q[0],
            q[1],
            q[2],
            q[3],
        ]
    }

    pub fn from_array(a: &[f64; 7]) -> Result<Self, GeomError> {
        Ok(PoseSE3 {
            position: Vec3::new(a[0], a[1], a[2]),
            orientation: Quaternion::from_wxyz(a[3], a[4], a[5], a[6])?,
        })
    }

    pub fn lerp(&self, other: &PoseSE3, t: f64) -> PoseSE3 {
        PoseSE3 {
            position: self.position + (other.position - self.position) * t,
            orientation: self.orientation.slerp(&other.orientation, t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseDelta {
    pub linear: f64,
    pub angular: f64,
}

/// Translation distance and relative rotation angle between two poses.
pub fn pose_delta(prev: &PoseSE3, next: &PoseSE3) -> PoseDelta {
    PoseDelta {
        linear: (next.position - prev.position).norm(),
        angular: prev.orientation.angle_to(&next.orientation).clamp(0.0, PI),
    }
}

/// `p -> s·R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SimilarityRepr", into = "SimilarityRepr")]
pub struct SimilarityTransform {
    scale: f64,
    rotation: Quaternion,
    translation: Vec3,
}

#[derive(Serialize, Deserialize)]
struct SimilarityRepr {
    s: f64,
    quat: Quaternion,
    t: [f64; 3],
}

impl TryFrom<SimilarityRepr> for SimilarityTransform {
    type Error = GeomError;

    fn try_from(r: SimilarityRepr) -> Result<Self, GeomError> {
        SimilarityTransform::new(r.s, r.quat, Vec3::from(r.t))
    }
}

impl From<SimilarityTransform> for SimilarityRepr {
    fn from(t: SimilarityTransform) -> Self {
        SimilarityRepr {
            s: t.scale,
            quat: t.rotation,
            t: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SimilarityTransform {
    pub fn new(scale: f64, rotation: Quaternion, translation: Vec3) -> Result<Self, GeomError> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(GeomError::NonPositiveScale(scale));
        }
        Ok(SimilarityTransform {
            scale,
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        SimilarityTransform {
            scale: 1.0,
            rotation: Quaternion::IDENTITY,
            translation: Vec3::zeros(),
        }
    }

    pub fn from_pose(pose: &PoseSE3) -> Self {
        SimilarityTransform {
            scale: 1.0,
            rotation: pose.orientation,
            translation: pose.position,
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rotation(&self) -> Quaternion {
        self.rotation
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) * self.scale + self.translation
    }

    /// `(1/s, Rᵀ, -(1/s)·Rᵀ·t)`.
    pub fn inverse(&self) -> Self {
        let ri = self.rotation.inverse();
        let si = 1.0 / self.scale;
        SimilarityTransform {
            scale: si,
            rotation: ri,
            translation: -ri.rotate(&self.translation) * si,
        }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &SimilarityTransform) -> Self {
        SimilarityTransform {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.apply(&other.translation),
        }
    }

    /// Maps a pose: rotation composed, position through `s·R·p + t`.
    pub fn apply_pose(&self, pose: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            position: self.apply(&pose.position),
            orientation: self.rotation * pose.orientation,
        }
    }
}
