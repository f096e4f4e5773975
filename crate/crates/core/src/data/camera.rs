use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{DecaError, Result};

/// Distance of the front and free cameras from the body center.
pub const FRONT_DISTANCE_M: f64 = 3.0;
/// Height of the front camera and the point every free camera looks at.
pub const BODY_CENTER_Z: f64 = 0.9;
/// Top camera height above the standing head.
pub const TOP_CLEARANCE_M: f64 = 2.5;
pub const STANDING_HEAD_Z: f64 = 1.72;
/// Focal length as a multiple of the image extent.
pub const FOCAL_FACTOR: f64 = 1.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewTag {
    Front,
    Top,
    Free,
}

impl ViewTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ViewTag::Front => "front",
            ViewTag::Top => "top",
            ViewTag::Free => "free",
        }
    }
}

impl fmt::Display for ViewTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ViewTag {
    type Err = DecaError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "front" => Ok(ViewTag::Front),
            "top" => Ok(ViewTag::Top),
            "free" => Ok(ViewTag::Free),
            _ => Err(DecaError::Config(format!("unknown view {s:?} (expected front, top or free)"))),
        }
    }
}

/// Parses a comma-separated view list such as `front,top`.
pub fn parse_views(s: &str) -> Result<Vec<ViewTag>> {
    let mut v = s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect::<Result<Vec<_>>>()?;
    v.dedup();
    if v.is_empty() {
        return Err(DecaError::Config("no views given".into()));
    }
    Ok(v)
}

/// Pinhole camera. A world point maps to the camera frame as `R·p + t`
/// (x right, y down, z forward).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    #[serde(skip)]
    pub tag: Option<ViewTag>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(rename = "R")]
    pub rotation: [[f64; 3]; 3],
    #[serde(rename = "t")]
    pub translation: [f64; 3],
}

impl CameraView {
    fn with_pose(tag: ViewTag, width: usize, height: usize, rot: Matrix3<f64>, center: Vector3<f64>) -> Self {
        let t = -(rot * center);
        let mut rotation = [[0.0; 3]; 3];
        for (r, row) in rotation.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = rot[(r, c)];
            }
        }
        Self {
            tag: Some(tag),
            fx: FOCAL_FACTOR * width as f64,
            fy: FOCAL_FACTOR * height as f64,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation,
            translation: [t.x, t.y, t.z],
        }
    }

    /// Camera looking from `center` at `target` with world z as up.
    fn look_at(tag: ViewTag, width: usize, height: usize, center: Vector3<f64>, target: Vector3<f64>) -> Self {
        let z = (target - center).normalize();
        let x = z.cross(&Vector3::z()).normalize();
        let y = z.cross(&x);
        let rot = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self::with_pose(tag, width, height, rot, center)
    }

    pub fn front(width: usize, height: usize) -> Self {
        let rot = Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        Self::with_pose(ViewTag::Front, width, height, rot, Vector3::new(0.0, -FRONT_DISTANCE_M, BODY_CENTER_Z))
    }

    pub fn top(width: usize, height: usize) -> Self {
        let rot = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        let center = Vector3::new(0.0, 0.0, STANDING_HEAD_Z + TOP_CLEARANCE_M);
        Self::with_pose(ViewTag::Top, width, height, rot, center)
    }

    /// Camera on the sphere of radius [`FRONT_DISTANCE_M`] around the body
    /// center. Azimuth 0 and elevation 0 reproduce the front camera.
    pub fn free(width: usize, height: usize, azimuth: f64, elevation: f64) -> Result<Self> {
        if elevation.abs() > 80f64.to_radians() {
            return Err(DecaError::Geometry(format!(
                "free camera elevation {:.1} deg is too steep",
                elevation.to_degrees()
            )));
        }
        let target = Vector3::new(0.0, 0.0, BODY_CENTER_Z);
        let dir = Vector3::new(
            elevation.cos() * azimuth.sin(),
            -elevation.cos() * azimuth.cos(),
            elevation.sin(),
        );
        Ok(Self::look_at(ViewTag::Free, width, height, target + FRONT_DISTANCE_M * dir, target))
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.rotation[r][c])
    }

    pub fn world_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotation_matrix() * Vector3::from(p) + Vector3::from(self.translation);
        [q.x, q.y, q.z]
    }

    pub fn camera_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotation_matrix().transpose() * (Vector3::from(p) - Vector3::from(self.translation));
        [q.x, q.y, q.z]
    }

    /// Checks `RᵀR = I` within `tol` and `det R = +1`.
    pub fn check_rotation(&self, tol: f64) -> Result<()> {
        let r = self.rotation_matrix();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > tol || (r.determinant() - 1.0).abs() > tol {
            return Err(DecaError::Geometry(format!(
                "camera rotation is not a proper rotation (orthonormality error {err:e})"
            )));
        }
        Ok(())
    }

    /// Pixel coordinates `(fx·x/z + cx, fy·y/z + cy)`.
    pub fn project_pixel(&self, p: [f64; 3]) -> Result<[f64; 2]> {
        if !(p[2] > 0.0) {
            return Err(DecaError::Geometry(format!("point {p:?} is not in front of the camera")));
        }
        Ok([self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy])
    }

    /// Camera-frame joints to image coordinates normalized by `(W, H)`.
    pub fn project(&self, joints: &[[f64; 3]]) -> Result<Vec<[f64; 2]>> {
        joints
            .iter()
            .map(|&p| {
                let [u, v] = self.project_pixel(p)?;
                Ok([u / self.width as f64, v / self.height as f64])
            })
            .collect()
    }
}
