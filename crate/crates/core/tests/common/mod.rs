#![allow(dead_code)]

use dh_core::geometry::{CameraIntrinsics, PoseTransform};
use dh_core::scene::{make_synthetic_background, ObjectBoard, PlacementSampler, SceneSource};
use dh_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 64x32 stereo rig whose background plane sits at exactly 2 px disparity.
pub const PLANE_DEPTH: f64 = 16.2;
pub const BASELINE: f64 = 0.54;

pub fn camera() -> CameraIntrinsics {
    CameraIntrinsics::centered(60.0, 64, 32).unwrap()
}

pub fn board() -> ObjectBoard {
    ObjectBoard::procedural(7, 32, 24, 1.6)
}

pub fn source(n: u64, distance: (f64, f64), seed: u64) -> SceneSource {
    let k = camera();
    let pose = PoseTransform::stereo(BASELINE);
    let bgs = (0..n)
        .map(|s| make_synthetic_background(100 + s, &k, &pose, PLANE_DEPTH, 2.0).unwrap())
        .collect();
    let yaw = 30f64.to_radians();
    SceneSource::new(k, bgs, PlacementSampler::new(distance, (-yaw, yaw), seed).unwrap()).unwrap()
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}
