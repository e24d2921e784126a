//! Browser bindings for three interactive operations: arm IK reach, temporal
//! ensembling weights, and ICP registration of a synthetic cloud.
//!
//! Every export returns plain numbers or a JSON string so the page needs no
//! generated TypeScript types.

use mirrorlink::geom::{PoseSE3, Quaternion, SimilarityTransform, Vec3};
use mirrorlink::kinematics::{ActionVector26, DualArmModel, IkConfig, Side, ACTION_DIM};
use mirrorlink::policy::ensemble;
use mirrorlink::sim2real::{icp_register, IcpConfig, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn side(name: &str) -> Result<Side, String> {
    match name {
        "left" => Ok(Side::Left),
        "right" => Ok(Side::Right),
        _ => Err(format!("side must be left or right, got {name:?}")),
    }
}

/// Solves IK for the palm at `(x, y, z)` in the world frame, keeping the
/// neutral palm orientation. Starts from the neutral configuration.
pub fn ik_reach_json(side_name: &str, x: f64, y: f64, z: f64) -> Result<String, String> {
    let side = side(side_name)?;
    let model = DualArmModel::canonical();
    let neutral = model.neutral_action();
    let chain = model.arm(side);
    let home = model.ee_pose(&neutral, side);
    let target = PoseSE3::new(Vec3::new(x, y, z), home.orientation);
    let cfg = IkConfig {
        max_iter: 300,
        restarts: 4,
        ..IkConfig::default()
    };
    let r = chain.solve_ik(&target, neutral.arm(side), &cfg).map_err(|e| e.to_string())?;
    let reached = chain.forward_kinematics(&r.joints).map_err(|e| e.to_string())?;
    let base = chain.forward_kinematics(&vec![0.0; chain.dof()]).map_err(|e| e.to_string())?;
    Ok(json!({
        "joints": r.joints,
        "converged": r.converged,
        "iterations": r.iterations,
        "residualLinear": r.residual.linear,
        "residualAngular": r.residual.angular,
        "reached": [reached.position.x, reached.position.y, reached.position.z],
        "home": [home.position.x, home.position.y, home.position.z],
        "zeroPose": [base.position.x, base.position.y, base.position.z],
        "maxReach": chain.max_reach(),
    })
    .to_string())
}

/// Normalized weights of `n` overlapping predictions, oldest first.
pub fn ensemble_weights(decay: f64, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|k| (-decay * k as f64).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Ensembled value of scalar predictions given oldest first; NaN when empty.
pub fn ensemble_scalar(values: &[f64], decay: f64) -> f64 {
    let preds: Vec<ActionVector26> = values.iter().map(|&v| ActionVector26([v; ACTION_DIM])).collect();
    ensemble(&preds, decay).map_or(f64::NAN, |a| a.0[0])
}

/// Registers a seeded random cloud against a rotated, shifted and noisy copy
/// of itself. Reports the rmse history and the pose error of the result.
pub fn icp_demo_json(seed: u64, points: usize, angle_deg: f64, offset_m: f64, noise_m: f64) -> Result<String, String> {
    if points < 3 {
        return Err("need at least 3 points".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src: Vec<Vec3> = (0..points)
        .map(|_| Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.2..0.2), rng.random_range(0.0..0.15)))
        .collect();
    let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0);
    let dir = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let truth = SimilarityTransform::new(
        1.0,
        Quaternion::from_axis_angle(&axis, angle_deg.to_radians()),
        dir.normalize() * offset_m,
    )
    .map_err(|e| e.to_string())?;
    let noise = Normal::new(0.0, noise_m.max(0.0)).map_err(|e| e.to_string())?;
    let dst: Vec<Vec3> = src
        .iter()
        .map(|p| truth.apply(p) + Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)))
        .collect();
    let (s, t) = (
        PointCloud::new(src.clone()).map_err(|e| e.to_string())?,
        PointCloud::new(dst.clone()).map_err(|e| e.to_string())?,
    );
    let r = icp_register(&s, &t, &IcpConfig::default()).map_err(|e| e.to_string())?;
    let flat = |v: &[Vec3]| v.iter().flat_map(|p| [p.x, p.y, p.z]).collect::<Vec<f64>>();
    Ok(json!({
        "rmseHistory": r.rmse_history,
        "rmse": r.rmse,
        "iterations": r.iterations,
        "converged": r.converged,
        "rotationErrorDeg": r.transform.rotation().angle_to(&truth.rotation()).to_degrees(),
        "translationErrorMm": (r.transform.translation() - truth.translation()).norm() * 1e3,
        "source": flat(&src),
        "target": flat(&dst),
        "aligned": flat(&s.transformed(&r.transform).points),
    })
    .to_string())
}

#[wasm_bindgen(js_name = ikReach)]
pub fn ik_reach(side: &str, x: f64, y: f64, z: f64) -> Result<String, JsError> {
    ik_reach_json(side, x, y, z).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = ensembleWeights)]
pub fn ensemble_weights_js(decay: f64, n: usize) -> Vec<f64> {
    ensemble_weights(decay, n)
}

#[wasm_bindgen(js_name = ensembleScalar)]
pub fn ensemble_scalar_js(values: &[f64], decay: f64) -> f64 {
    ensemble_scalar(values, decay)
}

#[wasm_bindgen(js_name = icpDemo)]
pub fn icp_demo(seed: u64, points: usize, angle_deg: f64, offset_m: f64, noise_m: f64) -> Result<String, JsError> {
    icp_demo_json(seed, points, angle_deg, offset_m, noise_m).map_err(|e| JsError::new(&e))
}
