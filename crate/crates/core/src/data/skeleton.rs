use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DecaError, Result};

/// The 15-joint ITOP skeleton in its usual index order.
pub const ITOP_JOINTS: [&str; 15] = [
    "head",
    "neck",
    "r_shoulder",
    "l_shoulder",
    "r_elbow",
    "l_elbow",
    "r_hand",
    "l_hand",
    "torso",
    "r_hip",
    "l_hip",
    "r_knee",
    "l_knee",
    "r_foot",
    "l_foot",
];

const TORSO: usize = 8;

/// `(parent, offset from parent in the standing pose, bone radius)`, indexed
/// like [`ITOP_JOINTS`]. World frame is z-up, the subject faces −y and its
/// right side points to −x.
const CANONICAL: [(Option<usize>, [f64; 3], f64); 15] = [
    (Some(1), [0.0, 0.0, 0.22], 0.10),
    (Some(TORSO), [0.0, 0.0, 0.40], 0.14),
    (Some(1), [-0.19, 0.0, -0.05], 0.06),
    (Some(1), [0.19, 0.0, -0.05], 0.06),
    (Some(2), [0.0, 0.0, -0.29], 0.05),
    (Some(3), [0.0, 0.0, -0.29], 0.05),
    (Some(4), [0.0, 0.0, -0.27], 0.04),
    (Some(5), [0.0, 0.0, -0.27], 0.04),
    (None, [0.0, 0.0, 1.10], 0.0),
    (Some(TORSO), [-0.10, 0.0, -0.18], 0.09),
    (Some(TORSO), [0.10, 0.0, -0.18], 0.09),
    (Some(9), [0.0, 0.0, -0.45], 0.07),
    (Some(10), [0.0, 0.0, -0.45], 0.07),
    (Some(11), [0.0, 0.0, -0.43], 0.05),
    (Some(12), [0.0, 0.0, -0.43], 0.05),
];

/// Parents before children, used to pick joint subsets.
const TOPO_ORDER: [usize; 15] = [8, 1, 0, 2, 3, 4, 5, 6, 7, 9, 10, 11, 12, 13, 14];

/// Pose sampler ranges, in degrees and meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerParams {
    pub limb_deg: f64,
    pub spine_deg: f64,
    pub yaw_deg: f64,
    pub root_shift_m: f64,
}

impl Default for SamplerParams {
    fn default() -> Self {
        Self {
            limb_deg: 45.0,
            spine_deg: 15.0,
            yaw_deg: 20.0,
            root_shift_m: 0.1,
        }
    }
}

/// A posed skeleton in world coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub names: Vec<&'static str>,
    pub joints: Vec<[f64; 3]>,
    /// Parent/child index pairs.
    pub bones: Vec<(usize, usize)>,
    pub radii: Vec<f64>,
}

/// ITOP indices of the joints kept for a `j`-joint skeleton, in ITOP order.
pub fn joint_subset(j: usize) -> Result<Vec<usize>> {
    if j == 0 || j > ITOP_JOINTS.len() {
        return Err(DecaError::Config(format!(
            "synthetic skeleton supports 1..=15 joints, got {j}"
        )));
    }
    let mut keep: Vec<usize> = TOPO_ORDER[..j].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

pub fn joint_names(j: usize) -> Result<Vec<&'static str>> {
    Ok(joint_subset(j)?.into_iter().map(|i| ITOP_JOINTS[i]).collect())
}

impl Skeleton {
    pub fn empty() -> Self {
        Self {
            names: Vec::new(),
            joints: Vec::new(),
            bones: Vec::new(),
            radii: Vec::new(),
        }
    }

    pub fn canonical(j: usize) -> Result<Self> {
        Self::from_rotations(j, &[Rotation3::identity(); 15], Rotation3::identity(), [0.0; 3])
    }

    /// Random articulation: every joint rotates its outgoing bones by
    /// uniform Euler angles within `limb_deg` (`spine_deg` for the torso
    /// and neck), the whole body yaws within `yaw_deg` and shifts within
    /// `root_shift_m` on the floor plane.
    pub fn sample<R: Rng + ?Sized>(j: usize, params: &SamplerParams, rng: &mut R) -> Result<Self> {
        let mut local = [Rotation3::identity(); 15];
        for (i, r) in local.iter_mut().enumerate() {
            let lim = if i == TORSO || i == 1 { params.spine_deg } else { params.limb_deg }.to_radians();
            let mut ang = || if lim > 0.0 { rng.gen_range(-lim..=lim) } else { 0.0 };
            let (a, b, c) = (ang(), ang(), ang());
            *r = Rotation3::from_euler_angles(a, b, c);
        }
        let yl = params.yaw_deg.to_radians();
        let yaw = if yl > 0.0 { rng.gen_range(-yl..=yl) } else { 0.0 };
        let sl = params.root_shift_m;
        let mut shift = [0.0; 3];
        for s in shift.iter_mut().take(2) {
            *s = if sl > 0.0 { rng.gen_range(-sl..=sl) } else { 0.0 };
        }
        Self::from_rotations(j, &local, Rotation3::from_axis_angle(&Vector3::z_axis(), yaw), shift)
    }

    fn from_rotations(j: usize, local: &[Rotation3<f64>; 15], yaw: Rotation3<f64>, shift: [f64; 3]) -> Result<Self> {
        let keep = joint_subset(j)?;
        let mut global = [Rotation3::identity(); 15];
        let mut pos = [Vector3::zeros(); 15];
        for &i in &TOPO_ORDER {
            let (parent, off, _) = CANONICAL[i];
            let off = Vector3::from(off);
            match parent {
                None => {
                    pos[i] = Vector3::from(shift) + off;
                    global[i] = yaw * local[i];
                }
                Some(p) => {
                    // hips hang from the pelvis, which only yaws
                    let frame = if p == TORSO && (i == 9 || i == 10) { yaw } else { global[p] };
                    pos[i] = pos[p] + frame * off;
                    global[i] = global[p] * local[i];
                }
            }
        }
        let index_of = |orig: usize| keep.iter().position(|&k| k == orig);
        let mut bones = Vec::new();
        let mut radii = Vec::new();
        for &c in &keep {
            if let (Some(p), _, r) = CANONICAL[c] {
                if let (Some(pi), Some(ci)) = (index_of(p), index_of(c)) {
                    bones.push((pi, ci));
                    radii.push(r);
                }
            }
        }
        Ok(Self {
            names: keep.iter().map(|&i| ITOP_JOINTS[i]).collect(),
            joints: keep.iter().map(|&i| [pos[i].x, pos[i].y, pos[i].z]).collect(),
            bones,
            radii,
        })
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    /// Diameter of the smallest sphere about the joint centroid that holds
    /// every joint.
    pub fn bounding_sphere_diameter(&self) -> f64 {
        bounding_sphere_diameter(&self.joints)
    }
}

pub fn bounding_sphere_diameter(joints: &[[f64; 3]]) -> f64 {
    if joints.is_empty() {
        return 0.0;
    }
    let n = joints.len() as f64;
    let c: Vec<f64> = (0..3).map(|k| joints.iter().map(|p| p[k]).sum::<f64>() / n).collect();
    let r = joints
        .iter()
        .map(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt())
        .fold(0.0, f64::max);
    2.0 * r
}
