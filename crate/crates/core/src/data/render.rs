use super::camera::CameraView;
use crate::error::{DecaError, Result};

/// Depth assigned to pixels that see no body part.
pub const FAR_PLANE_M: f64 = 10.0;
/// Every joint must lie at least this far in front of the camera.
pub const MIN_DEPTH_M: f64 = 0.1;

/// Flat per-bone colors for the RGB mode.
const PALETTE: [[u8; 3]; 14] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [128, 0, 0],
];

pub fn bone_color(bone: usize) -> [u8; 3] {
    PALETTE[bone % PALETTE.len()]
}

/// Body parts in camera coordinates: one capsule per bone.
#[derive(Clone, Debug)]
pub struct Capsules<'a> {
    pub joints: &'a [[f64; 3]],
    pub bones: &'a [(usize, usize)],
    pub radii: &'a [f64],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    /// Row-major `H×W`, meters along the optical axis.
    pub depth: Vec<f64>,
    /// Bone seen at each pixel.
    pub bone: Vec<Option<usize>>,
}

impl Rendered {
    /// Row-major `H×W×3` flat-colored image, black background.
    pub fn rgb(&self) -> Vec<u8> {
        self.bone
            .iter()
            .flat_map(|b| b.map_or([0, 0, 0], bone_color))
            .collect()
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Nearest positive hit of the unit ray `o + t·d` with a sphere.
fn ray_sphere(o: [f64; 3], d: [f64; 3], c: [f64; 3], r: f64) -> Option<f64> {
    let oc = sub(o, c);
    let b = dot(d, oc);
    let h = b * b - (dot(oc, oc) - r * r);
    if h < 0.0 {
        return None;
    }
    let t = -b - h.sqrt();
    (t > 0.0).then_some(t)
}

/// Nearest positive hit of the unit ray `o + t·d` with the capsule around
/// segment `a–b`: the union of the open cylinder and both end spheres.
pub fn ray_capsule(o: [f64; 3], d: [f64; 3], a: [f64; 3], b: [f64; 3], r: f64) -> Option<f64> {
    let mut best = ray_sphere(o, d, a, r);
    if let Some(t) = ray_sphere(o, d, b, r) {
        best = Some(best.map_or(t, |u: f64| u.min(t)));
    }
    let ba = sub(b, a);
    let oa = sub(o, a);
    let baba = dot(ba, ba);
    let bard = dot(ba, d);
    let baoa = dot(ba, oa);
    let qa = baba - bard * bard;
    if baba > 0.0 && qa > 1e-12 * baba {
        let qb = baba * dot(d, oa) - baoa * bard;
        let qc = baba * dot(oa, oa) - baoa * baoa - r * r * baba;
        let h = qb * qb - qa * qc;
        if h >= 0.0 {
            let t = (-qb - h.sqrt()) / qa;
            let y = baoa + t * bard;
            if t > 0.0 && y > 0.0 && y < baba {
                best = Some(best.map_or(t, |u| u.min(t)));
            }
        }
    }
    best
}

/// Z-buffer render of `parts` seen by `cam`. Depth is the camera-frame z of
/// the first surface hit along each pixel-center ray; pixels that miss get
/// [`FAR_PLANE_M`].
pub fn render_depth(parts: &Capsules<'_>, cam: &CameraView) -> Result<Rendered> {
    if let Some(p) = parts.joints.iter().find(|p| !(p[2] > MIN_DEPTH_M)) {
        return Err(DecaError::Geometry(format!(
            "joint {p:?} is closer than {MIN_DEPTH_M} m to the camera plane"
        )));
    }
    if parts.bones.len() != parts.radii.len() {
        return Err(DecaError::Contract("one radius per bone required".into()));
    }
    let (w, h) = (cam.width, cam.height);
    let mut depth = vec![FAR_PLANE_M; w * h];
    let mut bone = vec![None; w * h];
    for v in 0..h {
        for u in 0..w {
            let ray = [
                (u as f64 + 0.5 - cam.cx) / cam.fx,
                (v as f64 + 0.5 - cam.cy) / cam.fy,
                1.0,
            ];
            let n = dot(ray, ray).sqrt();
            let dir = [ray[0] / n, ray[1] / n, ray[2] / n];
            let mut zbest = FAR_PLANE_M;
            for (k, (&(i, j), &r)) in parts.bones.iter().zip(parts.radii).enumerate() {
                if let Some(t) = ray_capsule([0.0; 3], dir, parts.joints[i], parts.joints[j], r) {
                    let z = t * dir[2];
                    if z < zbest {
                        zbest = z;
                        bone[v * w + u] = Some(k);
                    }
                }
            }
            depth[v * w + u] = zbest;
        }
    }
    Ok(Rendered { depth, bone })
}
