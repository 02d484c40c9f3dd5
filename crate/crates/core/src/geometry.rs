//! Pinhole projection and the planar object-board model.
//!
//! Camera frame: +x right, +y down, +z forward. Image pixel (col, row) has its
//! center at continuous coordinate (col, row).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels with the principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx >= 0.0
            && self.cy >= 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid camera intrinsics {self:?}")))
        }
    }
}

/// Rigid transform mapping points from the target camera frame to the source
/// camera frame: `p_s = R p_t + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl PoseTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(orth <= 1e-9 && (det - 1.0).abs() <= 1e-9) || !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Config(format!(
                "pose rotation is not a proper rotation (|R^T R - I| = {orth:e}, det = {det})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Horizontal stereo rig: the source camera sits `baseline` meters to the
    /// right of the target camera, so target-frame points shift by -baseline in x.
    pub fn stereo(baseline: f64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::new(-baseline, 0.0, 0.0),
        }
    }

    pub fn from_row_major(rotation: [f64; 9], translation: [f64; 3]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(&rotation), Vector3::from(translation))
    }

    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vector3::zeros()
    }
}

/// Where the object board stands relative to the target camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoardPlacement {
    /// Camera to board-center distance along the optical axis, meters.
    pub distance: f64,
    /// Yaw of the board about the vertical axis, radians.
    pub yaw: f64,
    pub width_m: f64,
    pub height_m: f64,
    pub width_px: f64,
    pub height_px: f64,
}

impl BoardPlacement {
    pub fn validate(&self) -> Result<()> {
        let ok = self.distance > 0.0
            && self.yaw.abs() < std::f64::consts::FRAC_PI_2
            && self.width_m > 0.0
            && self.height_m > 0.0
            && self.width_px > 0.0
            && self.height_px > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid board placement {self:?}")))
        }
    }
}

/// Board pixel `(u_a, v_a)` to a 3-D point in the target camera frame.
pub fn board_to_camera(p: &BoardPlacement, u_a: f64, v_a: f64) -> Point3 {
    let x = p.width_m / p.width_px * u_a - p.width_m / 2.0;
    let y = p.height_m / p.height_px * v_a - p.height_m / 2.0;
    let (s, c) = p.yaw.sin_cos();
    Vector3::new(c * x, y, s * x + p.distance)
}

/// Project a camera-frame point; returns `(u, v, depth)`.
pub fn camera_to_pixel(k: &CameraIntrinsics, pt: &Point3) -> Result<(f64, f64, f64)> {
    if !(pt.z > 0.0) {
        return Err(Error::Geometry(format!("point {pt:?} is not in front of the camera")));
    }
    Ok((k.fx * pt.x / pt.z + k.cx, k.fy * pt.y / pt.z + k.cy, pt.z))
}

pub fn transform_point(t: &PoseTransform, pt: &Point3) -> Point3 {
    t.rotation * pt + t.translation
}

/// Lift pixel `(u, v)` at `depth` back to the camera frame.
pub fn pixel_to_camera(k: &CameraIntrinsics, u: f64, v: f64, depth: f64) -> Result<Point3> {
    if !(depth > 0.0) {
        return Err(Error::Geometry(format!("depth must be positive, got {depth}")));
    }
    Ok(Vector3::new(
        (u - k.cx) / k.fx * depth,
        (v - k.cy) / k.fy * depth,
        depth,
    ))
}

/// Intersection of the viewing ray through pixel `(u, v)` of a camera (whose
/// frame is reached from the target frame by `view`) with the board plane.
/// Returns board pixel coordinates and the hit depth in that camera, or `None`
/// when the ray misses the plane or hits behind the camera. The board extent
/// is not checked.
pub fn board_hit(
    k: &CameraIntrinsics,
    view: &PoseTransform,
    p: &BoardPlacement,
    u: f64,
    v: f64,
) -> Option<(f64, f64, f64)> {
    let (s, c) = p.yaw.sin_cos();
    let origin = view.rotation * Vector3::new(0.0, 0.0, p.distance) + view.translation;
    let ex = view.rotation * Vector3::new(c, 0.0, s);
    let ey = view.rotation * Vector3::new(0.0, 1.0, 0.0);
    let ray = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
    let m = Matrix3::from_columns(&[ray, -ex, -ey]);
    let sol = m.lu().solve(&origin)?;
    let (depth, x, y) = (sol[0], sol[1], sol[2]);
    if !(depth > 0.0) || !x.is_finite() || !y.is_finite() {
        return None;
    }
    let u_a = (x + p.width_m / 2.0) * p.width_px / p.width_m;
    let v_a = (y + p.height_m / 2.0) * p.height_px / p.height_m;
    Some((u_a, v_a, depth))
}
