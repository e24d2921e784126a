//! Similarity estimation, point-to-point ICP and camera registration.

use kdtree::distance::squared_euclidean;
use kdtree::KdTree;
use nalgebra::{DMatrix, Matrix3, Matrix3x4, Matrix6, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{PoseSE3, Quaternion, SimilarityTransform, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("point sets differ in size: {source_len} vs {target_len}")]
    SizeMismatch { source_len: usize, target_len: usize },
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("non-finite coordinate at index {0}")]
    NonFinite(usize),
    #[error("need at least {need} correspondences, got {got}")]
    InsufficientCorrespondences { need: usize, got: usize },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Points in meters with optional per-point ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub ids: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self, AlignError> {
        if points.is_empty() {
            return Err(AlignError::TooFewPoints { need: 1, got: 0 });
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(AlignError::NonFinite(i));
        }
        Ok(PointCloud { points, ids: None })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, t: &SimilarityTransform) -> Self {
        PointCloud {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            ids: self.ids.clone(),
        }
    }
}

fn centroid(ps: &[Vec3]) -> Vec3 {
    ps.iter().sum::<Vec3>() / ps.len() as f64
}

/// Least-squares `s, R, t` minimizing `Σ‖s·R·pᵢ + t − qᵢ‖²`, points paired
/// by index. Scale is fixed to 1 unless `with_scale`.
pub fn estimate_similarity(source: &[Vec3], target: &[Vec3], with_scale: bool) -> Result<SimilarityTransform, AlignError> {
    if source.len() != target.len() {
        return Err(AlignError::SizeMismatch {
            source_len: source.len(),
            target_len: target.len(),
        });
    }
    let n = source.len();
    if n < 3 {
        return Err(AlignError::TooFewPoints { need: 3, got: n });
    }
    let (ms, mt) = (centroid(source), centroid(target));
    let mut cov = Matrix3::zeros();
    let mut src_cov = Matrix3::zeros();
    let mut var = 0.0;
    for (p, q) in source.iter().zip(target) {
        let (a, b) = (p - ms, q - mt);
        cov += b * a.transpose();
        src_cov += a * a.transpose();
        var += a.norm_squared();
    }
    let nf = n as f64;
    cov /= nf;
    var /= nf;
    let sv = src_cov.symmetric_eigenvalues();
    let mut sv: Vec<f64> = sv.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0] {
        return Err(AlignError::DegenerateConfiguration(
            "source points are coincident or collinear".into(),
        ));
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("requested U"), svd.v_t.expect("requested Vᵀ"));
    let d = (u.determinant() * vt.determinant()).signum();
    let s_diag = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    let r = u * s_diag * vt;
    let scale = if with_scale {
        (svd.singular_values[0] + svd.singular_values[1] + d * svd.singular_values[2]) / var
    } else {
        1.0
    };
    let t = mt - r * ms * scale;
    SimilarityTransform::new(scale, Quaternion::from_matrix(&r), t)
        .map_err(|e| AlignError::DegenerateConfiguration(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct IcpConfig {
    pub max_iter: usize,
    /// Stop once one iteration improves the rmse by less than this.
    pub tol: f64,
    pub with_scale: bool,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_iter: 100,
            tol: 1e-10,
            with_scale: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct RegistrationResult {
    pub transform: SimilarityTransform,
    pub rmse: f64,
    pub iterations: usize,
    pub converged: bool,
    /// rmse before the first and after every accepted iteration. An
    /// iteration that would raise the rmse is counted but not applied.
    pub rmse_history: Vec<f64>,
}

struct NearestIndex {
    tree: KdTree<f64, usize, [f64; 3]>,
}

impl NearestIndex {
    fn new(points: &[Vec3]) -> Self {
        let mut tree = KdTree::with_capacity(3, points.len());
        for (i, p) in points.iter().enumerate() {
            tree.add([p.x, p.y, p.z], i).expect("finite point");
        }
        NearestIndex { tree }
    }

    fn nearest(&self, p: &Vec3) -> (f64, usize) {
        let hit = self.tree.nearest(&[p.x, p.y, p.z], 1, &squared_euclidean).expect("finite query");
        (hit[0].0, *hit[0].1)
    }
}

/// Matches every transformed source point to its nearest target point.
fn correspond(index: &NearestIndex, target: &[Vec3], source: &[Vec3], t: &SimilarityTransform) -> (f64, Vec<Vec3>) {
    let mut sq = 0.0;
    let matched = source
        .iter()
        .map(|p| {
            let (d2, j) = index.nearest(&t.apply(p));
            sq += d2;
            target[j]
        })
        .collect();
    ((sq / source.len() as f64).sqrt(), matched)
}

/// Point-to-point ICP from the identity. The rmse history is
/// non-increasing: an iteration that would raise it ends the loop.
pub fn icp_register(source: &PointCloud, target: &PointCloud, cfg: &IcpConfig) -> Result<RegistrationResult, AlignError> {
    icp_register_from(source, target, cfg, SimilarityTransform::identity())
}

pub fn icp_register_from(
    source: &PointCloud,
    target: &PointCloud,
    cfg: &IcpConfig,
    init: SimilarityTransform,
) -> Result<RegistrationResult, AlignError> {
    if source.is_empty() || target.is_empty() {
        return Err(AlignError::TooFewPoints { need: 1, got: 0 });
    }
    let index = NearestIndex::new(&target.points);
    let mut t = init;
    let (mut rmse, mut matched) = correspond(&index, &target.points, &source.points, &t);
    let mut history = vec![rmse];
    let (mut iterations, mut converged) = (0, false);
    for it in 1..=cfg.max_iter {
        let next = estimate_similarity(&source.points, &matched, cfg.with_scale)?;
        let (e, m) = correspond(&index, &target.points, &source.points, &next);
        iterations = it;
        if e > rmse {
            converged = true;
            break;
        }
        let improvement = rmse - e;
        t = next;
        rmse = e;
        matched = m;
        history.push(e);
        if improvement < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(RegistrationResult {
        transform: t,
        rmse,
        iterations,
        converged,
        rmse_history: history,
    })
}

/// Pinhole intrinsics; distortion coefficients are accepted and ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub width: u32,
    #[serde(default)]
    pub height: u32,
    #[serde(default)]
    pub distortion: Vec<f64>,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width: 0,
            height: 0,
            distortion: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), AlignError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.cx.is_finite() && self.cy.is_finite()) {
            return Err(AlignError::InvalidIntrinsics(format!(
                "fx={} fy={} must be positive",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    /// Pixel of a camera-frame point; `None` behind the camera.
    pub fn project_camera(&self, pc: &Vec3) -> Option<[f64; 2]> {
        (pc.z > 0.0).then(|| [self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy])
    }

    /// Pixel of world point `p` under the world-to-camera pose.
    pub fn project(&self, world_to_camera: &PoseSE3, p: &Vec3) -> Option<[f64; 2]> {
        self.project_camera(&world_to_camera.transform_point(p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub id: u32,
    pub point: Vec3,
    pub pixel: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct CameraRegistration {
    /// World to camera.
    pub pose: PoseSE3,
    /// Root mean of squared per-point pixel distances.
    pub rmse_px: f64,
    pub iterations: usize,
}

pub const MIN_CORRESPONDENCES: usize = 6;

/// Mean squared pixel distance; points behind the camera count as infinite.
pub fn mean_sq_reprojection(intr: &CameraIntrinsics, pose: &PoseSE3, corr: &[Correspondence]) -> f64 {
    corr.iter()
        .map(|c| match intr.project(pose, &c.point) {
            Some(px) => (px[0] - c.pixel[0]).powi(2) + (px[1] - c.pixel[1]).powi(2),
            None => f64::INFINITY,
        })
        .sum::<f64>()
        / corr.len() as f64
}

fn dlt(intr: &CameraIntrinsics, corr: &[Correspondence]) -> Result<PoseSE3, AlignError> {
    let pts: Vec<Vec3> = corr.iter().map(|c| c.point).collect();
    let c = centroid(&pts);
    let mut cov = Matrix3::zeros();
    for p in &pts {
        cov += (p - c) * (p - c).transpose();
    }
    let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[2] <= 1e-10 * ev[0] {
        return Err(AlignError::DegenerateGeometry("points are coplanar or collinear".into()));
    }
    let scale = 3f64.sqrt() / (pts.iter().map(|p| (p - c).norm()).sum::<f64>() / pts.len() as f64);
    let mut a = DMatrix::<f64>::zeros(2 * corr.len(), 12);
    for (i, cr) in corr.iter().enumerate() {
        let x = (cr.point - c) * scale;
        let xh = [x.x, x.y, x.z, 1.0];
        let u = (cr.pixel[0] - intr.cx) / intr.fx;
        let v = (cr.pixel[1] - intr.cy) / intr.fy;
        for k in 0..4 {
            a[(2 * i, k)] = xh[k];
            a[(2 * i, 8 + k)] = -u * xh[k];
            a[(2 * i + 1, 4 + k)] = xh[k];
            a[(2 * i + 1, 8 + k)] = -v * xh[k];
        }
    }
    let ata = a.transpose() * &a;
    let eig = ata.symmetric_eigen();
    let imin = eig.eigenvalues.imin();
    let p = eig.eigenvectors.column(imin);
    let mut pm = Matrix3x4::from_fn(|r, k| p[4 * r + k]);
    // Undo the point normalization: P · [s I, -s c; 0 1].
    let m = pm.fixed_view::<3, 3>(0, 0) * scale;
    let last = pm.column(3) - m * c;
    pm.fixed_view_mut::<3, 3>(0, 0).copy_from(&m);
    pm.set_column(3, &last);
    if pm.fixed_view::<3, 3>(0, 0).determinant() < 0.0 {
        pm = -pm;
    }
    let m: Matrix3<f64> = pm.fixed_view::<3, 3>(0, 0).into();
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("requested U"), svd.v_t.expect("requested Vᵀ"));
    let s = svd.singular_values.mean();
    if !(s > 0.0) {
        return Err(AlignError::DegenerateGeometry("DLT solution is singular".into()));
    }
    let r = u * vt;
    let t: Vec3 = pm.column(3) / s;
    Ok(PoseSE3::new(t, Quaternion::from_matrix(&r)))
}

fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// One Gauss-Newton step on the left-perturbed pose `exp(d) · pose`, whose
/// rotation also acts on the translation.
fn gn_step(intr: &CameraIntrinsics, pose: &PoseSE3, corr: &[Correspondence]) -> Option<Vector6<f64>> {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for c in corr {
        let pc = pose.transform_point(&c.point);
        if pc.z <= 0.0 {
            return None;
        }
        let (iz, x, y) = (1.0 / pc.z, pc.x, pc.y);
        let dproj = nalgebra::Matrix2x3::new(
            intr.fx * iz,
            0.0,
            -intr.fx * x * iz * iz,
            0.0,
            intr.fy * iz,
            -intr.fy * y * iz * iz,
        );
        let mut dp = nalgebra::Matrix3x6::zeros();
        dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&pc)));
        dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
        let j = dproj * dp;
        let r = nalgebra::Vector2::new(
            intr.fx * x * iz + intr.cx - c.pixel[0],
            intr.fy * y * iz + intr.cy - c.pixel[1],
        );
        h += j.transpose() * j;
        g += j.transpose() * r;
    }
    h.cholesky().map(|ch| -ch.solve(&g))
}

fn apply_step(pose: &PoseSE3, d: &Vector6<f64>) -> PoseSE3 {
    let q = Quaternion::from_rotation_vector(&Vec3::new(d[0], d[1], d[2]));
    PoseSE3::new(q.rotate(&pose.position) + Vec3::new(d[3], d[4], d[5]), q * pose.orientation)
}

/// World-to-camera pose from 2D-3D correspondences: DLT initialization then
/// Gauss-Newton on the reprojection error.
pub fn register_camera(intr: &CameraIntrinsics, corr: &[Correspondence]) -> Result<CameraRegistration, AlignError> {
    intr.validate()?;
    if corr.len() < MIN_CORRESPONDENCES {
        return Err(AlignError::InsufficientCorrespondences {
            need: MIN_CORRESPONDENCES,
            got: corr.len(),
        });
    }
    if let Some(i) = corr
        .iter()
        .position(|c| !(c.point.iter().chain(&c.pixel).all(|v| v.is_finite())))
    {
        return Err(AlignError::NonFinite(i));
    }
    let mut pose = dlt(intr, corr)?;
    let mut err = mean_sq_reprojection(intr, &pose, corr);
    let mut iterations = 0;
    for _ in 0..100 {
        let Some(d) = gn_step(intr, &pose, corr) else { break };
        // Backtrack so the error never increases.
        let mut step = d;
        let mut accepted = None;
        for _ in 0..20 {
            let cand = apply_step(&pose, &step);
            let e = mean_sq_reprojection(intr, &cand, corr);
            if e <= err {
                accepted = Some((cand, e));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, e)) = accepted else { break };
        iterations += 1;
        let done = d.norm() < 1e-15 || err - e <= 1e-16 * err.max(1e-30);
        pose = cand;
        err = e;
        if done {
            break;
        }
    }
    Ok(CameraRegistration {
        pose,
        rmse_px: err.sqrt(),
        iterations,
    })
}

/// Camera pose in the simulator frame from its pose in the reconstruction
/// frame and the reconstruction-to-simulator similarity.
pub fn compose_frame_chain(sim_to_recon: &SimilarityTransform, camera_in_recon: &PoseSE3) -> PoseSE3 {
    sim_to_recon.apply_pose(camera_in_recon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn identity_and_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = rand_points(&mut rng, 10);
        let t = estimate_similarity(&p, &p, true).unwrap();
        assert!((t.scale() - 1.0).abs() < 1e-12);
        assert!(t.rotation().angle() < 1e-12);
        assert!(t.translation().norm() < 1e-12);
        let q: Vec<Vec3> = p.iter().map(|x| x + Vec3::new(1.0, 2.0, 3.0)).collect();
        let t = estimate_similarity(&p, &q, false).unwrap();
        assert!((t.translation() - Vec3::new(1.0, 2.0, 3.0)).norm() < 1e-12);
        assert!(t.rotation().angle() < 1e-12);
    }

    #[test]
    fn degenerate_sources_are_rejected() {
        let line: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(
            estimate_similarity(&line, &line, true),
            Err(AlignError::DegenerateConfiguration(_))
        ));
        let same = vec![Vec3::new(1.0, 1.0, 1.0); 4];
        assert!(estimate_similarity(&same, &same, false).is_err());
        assert!(matches!(
            estimate_similarity(&line[..2], &line[..2], true),
            Err(AlignError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn coplanar_source_still_recovers_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p: Vec<Vec3> = (0..8)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0))
            .collect();
        let g = SimilarityTransform::new(1.3, Quaternion::rot_x(2.5), Vec3::new(0.1, 0.2, 0.3)).unwrap();
        let q: Vec<Vec3> = p.iter().map(|x| g.apply(x)).collect();
        let t = estimate_similarity(&p, &q, true).unwrap();
        assert!(t.rotation().angle_to(&g.rotation()) < 1e-9);
    }

    #[test]
    fn icp_on_identical_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = PointCloud::new(rand_points(&mut rng, 200)).unwrap();
        let r = icp_register(&c, &c, &IcpConfig::default()).unwrap();
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.iterations, 1);
        assert!(r.converged);
        assert!(r.transform.rotation().angle() < 1e-12 && r.transform.translation().norm() < 1e-12);
    }

    #[test]
    fn projection_anchor() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0);
        assert_eq!(k.project(&PoseSE3::identity(), &Vec3::new(0.0, 0.0, 1.0)), Some([0.0, 0.0]));
        assert_eq!(k.project(&PoseSE3::identity(), &Vec3::new(0.0, 0.0, -1.0)), None);
    }

    #[test]
    fn camera_input_checks() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0);
        let c = Correspondence { id: 0, point: Vec3::new(0.0, 0.0, 1.0), pixel: [0.0, 0.0] };
        assert!(matches!(
            register_camera(&k, &[c; 5]),
            Err(AlignError::InsufficientCorrespondences { need: 6, got: 5 })
        ));
        let planar: Vec<Correspondence> = (0..8)
            .map(|i| {
                let p = Vec3::new((i % 3) as f64 * 0.1, (i / 3) as f64 * 0.1, 2.0);
                Correspondence { id: i, point: p, pixel: k.project(&PoseSE3::identity(), &p).unwrap() }
            })
            .collect();
        assert!(matches!(register_camera(&k, &planar), Err(AlignError::DegenerateGeometry(_))));
        assert!(register_camera(&CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0), &planar).is_err());
    }

    #[test]
    fn frame_chain_examples() {
        let cam = PoseSE3::new(Vec3::new(0.3, -0.2, 1.1), Quaternion::rot_z(0.4));
        assert_eq!(compose_frame_chain(&SimilarityTransform::identity(), &cam), cam);
        let shift = SimilarityTransform::new(1.0, Quaternion::IDENTITY, Vec3::new(1.0, 2.0, 3.0)).unwrap();
        let out = compose_frame_chain(&shift, &cam);
        assert_eq!(out.position, cam.position + Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(out.orientation, cam.orientation);
        let r = Quaternion::rot_x(0.3);
        let s2 = SimilarityTransform::new(2.0, r, Vec3::new(0.5, 0.0, 0.0)).unwrap();
        let out = compose_frame_chain(&s2, &cam);
        assert!((out.position - (r.rotate(&cam.position) * 2.0 + Vec3::new(0.5, 0.0, 0.0))).norm() < 1e-15);
        assert!(out.orientation.angle_to(&(r * cam.orientation)) < 1e-12);
    }
}
