//! Viewpoint and weak-perspective projection.
//!
//! Conventions used by every module:
//! - rotation is intrinsic X-Y-Z Euler, `R = Rx(pitch) · Ry(yaw) · Rz(roll)`;
//! - 3D space is y-up, the camera looks down −z;
//! - image rows grow downward, `depth = −z′` so larger depth is farther away.

use nalgebra::{Matrix3, Point2, Vector3};

use crate::landmarks::Landmarks;
use crate::model::{landmark_positions, CoefficientVector, ModelError, MorphableModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    /// Pitch, yaw, roll in radians.
    pub rotation: Vector3<f64>,
    /// Millimeters.
    pub translation: Vector3<f64>,
    /// Pixels per millimeter.
    pub scale: f64,
}

impl CameraPose {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>, scale: f64) -> Self {
        Self {
            rotation,
            translation,
            scale,
        }
    }

    pub fn identity(scale: f64) -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros(), scale)
    }

    pub fn is_valid(&self) -> bool {
        self.scale > 0.0
            && self.scale.is_finite()
            && self.rotation.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotation_from_euler(&self.rotation)
    }

    /// `(r1, r2, r3, t1, t2, t3, s)`.
    pub fn to_array(&self) -> [f64; 7] {
        [
            self.rotation.x,
            self.rotation.y,
            self.rotation.z,
            self.translation.x,
            self.translation.y,
            self.translation.z,
            self.scale,
        ]
    }

    pub fn from_array(v: [f64; 7]) -> Self {
        Self::new(Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5]), v[6])
    }
}

/// A projected point: pixel coordinates and camera depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Projected {
    pub fn pixel(&self) -> Point2<f64> {
        Point2::new(self.u, self.v)
    }
}

pub fn rotation_from_euler(r: &Vector3<f64>) -> Matrix3<f64> {
    let (sx, cx) = r.x.sin_cos();
    let (sy, cy) = r.y.sin_cos();
    let (sz, cz) = r.z.sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rz = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
    rx * ry * rz
}

/// `p′ = R·p + t` for every point.
pub fn transform_points(pose: &CameraPose, points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let rot = pose.rotation_matrix();
    points.iter().map(|p| rot * p + pose.translation).collect()
}

/// Projects camera-space points.
pub fn project_camera_points(scale: f64, points: &[Vector3<f64>], width: usize, height: usize) -> Vec<Projected> {
    let cx = width as f64 / 2.0;
    let cy = height as f64 / 2.0;
    points
        .iter()
        .map(|p| Projected {
            u: scale * p.x + cx,
            v: cy - scale * p.y,
            depth: -p.z,
        })
        .collect()
}

/// Transforms model-space points by `pose` and projects them.
pub fn project(pose: &CameraPose, points: &[Vector3<f64>], width: usize, height: usize) -> Vec<Projected> {
    project_camera_points(pose.scale, &transform_points(pose, points), width, height)
}

/// Inverse of [`project`] for a pixel position and depth.
pub fn back_project(pose: &CameraPose, u: f64, v: f64, depth: f64, width: usize, height: usize) -> Vector3<f64> {
    let camera = Vector3::new(
        (u - width as f64 / 2.0) / pose.scale,
        (height as f64 / 2.0 - v) / pose.scale,
        -depth,
    );
    pose.rotation_matrix().transpose() * (camera - pose.translation)
}

/// The 2×68 landmark projection `L_face` for given coefficients and pose.
pub fn project_landmarks(
    model: &MorphableModel,
    coeffs: &CoefficientVector,
    pose: &CameraPose,
    width: usize,
    height: usize,
) -> Result<Landmarks, ModelError> {
    let mesh = model.evaluate_geometry(coeffs)?;
    let points = landmark_positions(&mesh, model);
    Ok(Landmarks::new(
        project(pose, &points, width, height)
            .iter()
            .map(Projected::pixel)
            .collect(),
    ))
}
