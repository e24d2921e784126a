use mirrorlink::geom::{PoseSE3, Quaternion, SimilarityTransform, Vec3};
use mirrorlink::sim2real::{
    estimate_similarity, icp_register, icp_register_from, mean_sq_reprojection, register_camera, CameraIntrinsics,
    Correspondence, IcpConfig, PointCloud,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn rand_vec(rng: &mut ChaCha8Rng, half: f64) -> Vec3 {
    Vec3::new(
        rng.random_range(-half..half),
        rng.random_range(-half..half),
        rng.random_range(-half..half),
    )
}

fn rand_rotation(rng: &mut ChaCha8Rng) -> Quaternion {
    Quaternion::from_axis_angle(&rand_vec(rng, 1.0), rng.random_range(0.0..std::f64::consts::PI))
}

/// Samples on the faces of an asymmetric box with a notch so that no
/// rotation but the identity maps it onto itself.
fn box_surface(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    let dims = [0.40, 0.25, 0.15];
    (0..n)
        .map(|i| {
            let face = i % 6;
            let axis = face / 2;
            let mut p = Vec3::new(
                rng.random_range(0.0..dims[0]),
                rng.random_range(0.0..dims[1]),
                rng.random_range(0.0..dims[2]),
            );
            p[axis] = if face % 2 == 0 { 0.0 } else { dims[axis] };
            if p.x > 0.3 && p.y > 0.15 {
                p.z *= 0.5;
            }
            p
        })
        .collect()
}

fn noise_vec(rng: &mut ChaCha8Rng, n: &Normal<f64>) -> Vec3 {
    Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn similarity_is_recovered_exactly(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = SimilarityTransform::new(rng.random_range(0.5..2.0), rand_rotation(&mut rng), rand_vec(&mut rng, 2.0)).unwrap();
        let src: Vec<Vec3> = (0..10).map(|_| rand_vec(&mut rng, 1.0)).collect();
        let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
        let est = estimate_similarity(&src, &dst, true).unwrap();
        prop_assert!((est.scale() - truth.scale()).abs() <= 1e-9);
        prop_assert!(est.rotation().angle_to(&truth.rotation()) <= 1e-9);
        prop_assert!((est.translation() - truth.translation()).norm() <= 1e-9);
    }
}

#[test]
fn icp_recovers_ten_degrees_and_five_centimetres() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let src = box_surface(&mut rng, 500);
    let truth = SimilarityTransform::new(1.0, Quaternion::rot_z(10f64.to_radians()), Vec3::new(0.05, 0.0, 0.0)).unwrap();
    let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
    let r = icp_register(&PointCloud::new(src).unwrap(), &PointCloud::new(dst).unwrap(), &IcpConfig::default()).unwrap();
    assert!(r.converged);
    assert!(r.transform.rotation().angle_to(&truth.rotation()).to_degrees() < 0.5);
    assert!((r.transform.translation() - truth.translation()).norm() < 2e-3);
}

#[test]
fn icp_rmse_never_increases() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src = box_surface(&mut rng, 400);
        let truth = SimilarityTransform::new(
            1.0,
            Quaternion::from_axis_angle(&rand_vec(&mut rng, 1.0), rng.random_range(0.0..0.35)),
            rand_vec(&mut rng, 0.05),
        )
        .unwrap();
        let noise = Normal::new(0.0, 0.002).unwrap();
        let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p) + noise_vec(&mut rng, &noise)).collect();
        let r = icp_register(&PointCloud::new(src).unwrap(), &PointCloud::new(dst).unwrap(), &IcpConfig::default()).unwrap();
        assert!(r.rmse >= 0.0);
        for w in r.rmse_history.windows(2) {
            assert!(w[1] <= w[0], "seed {seed}: {:?}", r.rmse_history);
        }
        assert_eq!(*r.rmse_history.last().unwrap(), r.rmse);
    }
}

#[test]
fn registering_aligned_clouds_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let src = box_surface(&mut rng, 500);
    let truth = SimilarityTransform::new(1.0, Quaternion::rot_y(0.1), Vec3::new(0.02, -0.01, 0.03)).unwrap();
    let noise = Normal::new(0.0, 0.001).unwrap();
    let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p) + noise_vec(&mut rng, &noise)).collect();
    let (src, dst) = (PointCloud::new(src).unwrap(), PointCloud::new(dst).unwrap());
    let first = icp_register(&src, &dst, &IcpConfig::default()).unwrap();
    let aligned = src.transformed(&first.transform);
    let second = icp_register_from(&aligned, &dst, &IcpConfig::default(), SimilarityTransform::identity()).unwrap();
    assert!(second.transform.rotation().angle() < 1e-6);
    assert!(second.transform.translation().norm() < 1e-6);
    assert!((second.transform.scale() - 1.0).abs() < 1e-6);
}

#[test]
fn translation_error_shrinks_with_more_points() {
    let noise = Normal::new(0.0, 0.01).unwrap();
    let mean_error = |n: usize| {
        let mut total = 0.0;
        for seed in 0..200u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + n as u64);
            let truth = SimilarityTransform::new(1.0, rand_rotation(&mut rng), rand_vec(&mut rng, 1.0)).unwrap();
            let src: Vec<Vec3> = (0..n).map(|_| rand_vec(&mut rng, 0.5)).collect();
            let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p) + noise_vec(&mut rng, &noise)).collect();
            let est = estimate_similarity(&src, &dst, false).unwrap();
            total += (est.translation() - truth.translation()).norm();
        }
        total / 200.0
    };
    let errors: Vec<f64> = [10, 100, 1000].into_iter().map(mean_error).collect();
    assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
    // sqrt(10) per decade with a generous margin.
    assert!(errors[0] / errors[2] > 5.0, "{errors:?}");
}

fn look_at(centre: Vec3) -> PoseSE3 {
    let z = (-centre).normalize();
    let up = if z.z.abs() > 0.9 { Vec3::x() } else { Vec3::z() };
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    let r = nalgebra::Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    PoseSE3::new(-(r * centre), Quaternion::from_matrix(&r))
}

/// Camera 1.5 to 2 m from a 1 m cube of points, 20 of which land inside a
/// 640x480 image.
fn camera_scene(rng: &mut ChaCha8Rng) -> (CameraIntrinsics, PoseSE3, Vec<Correspondence>) {
    let k = CameraIntrinsics::new(800.0, 800.0, 320.0, 240.0);
    let centre = rand_vec(rng, 1.0).normalize() * rng.random_range(1.5..2.0);
    let pose = look_at(centre);
    let mut corr = Vec::new();
    while corr.len() < 20 {
        let point = rand_vec(rng, 0.5);
        let pixel = k.project(&pose, &point).unwrap();
        if (0.0..640.0).contains(&pixel[0]) && (0.0..480.0).contains(&pixel[1]) {
            corr.push(Correspondence { id: corr.len() as u32, point, pixel });
        }
    }
    (k, pose, corr)
}

#[test]
fn noise_free_camera_pose_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..50 {
        let (k, pose, corr) = camera_scene(&mut rng);
        let r = register_camera(&k, &corr).unwrap();
        assert!((r.pose.position - pose.position).norm() < 1e-6);
        assert!(r.pose.orientation.angle_to(&pose.orientation) < 1e-6);
        assert!(r.rmse_px < 1e-8, "{}", r.rmse_px);
    }
}

fn noisy_scene(seed: u64) -> (CameraIntrinsics, PoseSE3, Vec<Correspondence>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, pose, mut corr) = camera_scene(&mut rng);
    let noise = Normal::new(0.0, 0.5).unwrap();
    for c in &mut corr {
        c.pixel[0] += noise.sample(&mut rng);
        c.pixel[1] += noise.sample(&mut rng);
    }
    (k, pose, corr)
}

#[test]
fn half_pixel_noise_gives_sub_pixel_reprojection() {
    let mut sq = 0.0;
    for seed in 0..100 {
        let (k, pose, corr) = noisy_scene(seed);
        let r = register_camera(&k, &corr).unwrap();
        sq += r.rmse_px * r.rmse_px;
        assert!((r.pose.position - pose.position).norm() < 5e-3, "seed {seed}");
        // The refined pose fits the noisy pixels at least as well as the truth.
        assert!(r.rmse_px <= mean_sq_reprojection(&k, &pose, &corr).sqrt() + 1e-9);
    }
    let pooled = (sq / 100.0).sqrt();
    assert!((0.3..=0.8).contains(&pooled), "pooled rmse {pooled}");
}

#[test]
fn refined_pose_is_a_local_minimum() {
    for seed in 0..20 {
        let (k, _, corr) = noisy_scene(seed);
        let r = register_camera(&k, &corr).unwrap();
        let best = mean_sq_reprojection(&k, &r.pose, &corr);
        for axis in 0..6 {
            for sign in [-1.0, 1.0] {
                let mut d = Vec3::zeros();
                d[axis % 3] = sign * 1e-4;
                let probe = if axis < 3 {
                    PoseSE3::new(r.pose.position + d, r.pose.orientation)
                } else {
                    PoseSE3::new(r.pose.position, Quaternion::from_rotation_vector(&d) * r.pose.orientation)
                };
                let e = mean_sq_reprojection(&k, &probe, &corr);
                assert!(e > best, "seed {seed} axis {axis} sign {sign}: {e} <= {best}");
            }
        }
    }
}
