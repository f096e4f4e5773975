use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::camera::{CameraView, ViewTag};
use super::render::{render_depth, Capsules, FAR_PLANE_M, MIN_DEPTH_M};
use super::skeleton::{joint_names, SamplerParams, Skeleton};
use crate::error::{DecaError, Result};
use crate::model::Domain;
use crate::tensor::Tensor;

pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub stem: String,
    pub pose_id: usize,
    pub view: ViewTag,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub joint_names: Vec<String>,
    pub domain: Domain,
    /// `[H, W]`.
    pub resolution: [usize; 2],
    pub far_plane_m: f64,
    pub seed: u64,
    pub num_poses: usize,
    pub views: Vec<ViewTag>,
    pub test_fraction: f64,
    pub sampler: SamplerParams,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn channels(&self) -> usize {
        self.domain.channels()
    }
}

/// Per-sample metadata written next to the image files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub pose_id: usize,
    pub view: ViewTag,
    /// Meters, camera frame.
    pub joints3d: Vec<[f64; 3]>,
    /// Normalized image coordinates.
    pub joints2d: Vec<[f64; 2]>,
    pub camera: CameraView,
    pub split: Split,
}

/// One loaded sample. `image` is `[C, H, W]` in raw units: meters for
/// depth, 0–255 for RGB.
#[derive(Clone, Debug)]
pub struct PoseSample {
    pub stem: String,
    pub pose_id: usize,
    pub view: ViewTag,
    pub split: Split,
    pub camera: CameraView,
    pub image: Tensor<f32>,
    pub joints3d: Vec<[f64; 3]>,
    pub joints2d: Vec<[f64; 2]>,
    /// `H×W` depth in meters, present for RGB samples.
    pub depth_gt: Option<Vec<f32>>,
}

impl PoseSample {
    pub fn joints_world(&self) -> Vec<[f64; 3]> {
        self.joints3d.iter().map(|&p| self.camera.camera_to_world(p)).collect()
    }

    /// Depth map in meters: the image itself for depth samples.
    pub fn depth(&self) -> Option<&[f32]> {
        match &self.depth_gt {
            Some(d) => Some(d),
            None if self.image.shape()[0] == 1 => Some(self.image.data()),
            None => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub samples: Vec<PoseSample>,
}

impl Dataset {
    /// Indices of samples matching the optional view and split filters.
    pub fn select(&self, view: Option<ViewTag>, split: Option<Split>) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| view.map_or(true, |v| s.view == v) && split.map_or(true, |p| s.split == p))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Generation settings for [`generate_synthetic`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub num: usize,
    pub views: Vec<ViewTag>,
    pub joints: usize,
    /// `[H, W]`.
    pub resolution: [usize; 2],
    pub domain: Domain,
    pub seed: u64,
    pub test_fraction: f64,
    pub sampler: SamplerParams,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            num: 10,
            views: vec![ViewTag::Front, ViewTag::Top],
            joints: 15,
            resolution: [64, 64],
            domain: Domain::Depth,
            seed: 0,
            test_fraction: 0.2,
            sampler: SamplerParams::default(),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> DecaError {
    DecaError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| io_err(path, e))
}

pub fn f32_to_le_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn f32_from_le_bytes(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

pub fn camera_for<R: Rng + ?Sized>(tag: ViewTag, width: usize, height: usize, rng: &mut R) -> Result<CameraView> {
    match tag {
        ViewTag::Front => Ok(CameraView::front(width, height)),
        ViewTag::Top => Ok(CameraView::top(width, height)),
        ViewTag::Free => {
            let az = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let el = rng.gen_range(0.0..60f64.to_radians());
            CameraView::free(width, height, az, el)
        }
    }
}

/// Samples `num` articulated poses, renders each from every requested view
/// and writes the dataset to `out_dir`. Splits are assigned per pose, so
/// all views of a pose share a split.
pub fn generate_synthetic(params: &GenParams, out_dir: &Path) -> Result<DatasetManifest> {
    if params.num == 0 {
        return Err(DecaError::Config("need at least one pose".into()));
    }
    if params.views.is_empty() {
        return Err(DecaError::Config("need at least one view".into()));
    }
    if !(0.0..1.0).contains(&params.test_fraction) {
        return Err(DecaError::Config("test_fraction must lie in [0,1)".into()));
    }
    let [h, w] = params.resolution;
    if h == 0 || w == 0 {
        return Err(DecaError::Config("resolution must be positive".into()));
    }
    let names = joint_names(params.joints)?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let mut split_rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x5bd1_e995);
    let mut order: Vec<usize> = (0..params.num).collect();
    order.shuffle(&mut split_rng);
    let n_test = (params.num as f64 * params.test_fraction).round() as usize;
    let mut split = vec![Split::Train; params.num];
    for &p in &order[..n_test] {
        split[p] = Split::Test;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut samples = Vec::new();
    for (pose_id, &split) in split.iter().enumerate() {
        let skel = Skeleton::sample(params.joints, &params.sampler, &mut rng)?;
        for &tag in &params.views {
            let cam = camera_for(tag, w, h, &mut rng)?;
            let joints3d: Vec<[f64; 3]> = skel.joints.iter().map(|&p| cam.world_to_camera(p)).collect();
            if joints3d.iter().any(|p| p[2] <= MIN_DEPTH_M) {
                return Err(DecaError::Geometry(format!("pose {pose_id} is behind the {tag} camera")));
            }
            let parts = Capsules {
                joints: &joints3d,
                bones: &skel.bones,
                radii: &skel.radii,
            };
            let r = render_depth(&parts, &cam)?;
            let stem = format!("{pose_id:06}_{tag}");
            let depth: Vec<f32> = r.depth.iter().map(|&d| d as f32).collect();
            write_file(&out_dir.join(format!("{stem}.depth.f32")), &f32_to_le_bytes(&depth))?;
            if params.domain == Domain::Rgb {
                write_file(&out_dir.join(format!("{stem}.rgb.u8")), &r.rgb())?;
            }
            let meta = SampleMeta {
                pose_id,
                view: tag,
                joints2d: cam.project(&joints3d)?,
                joints3d,
                camera: cam,
                split,
            };
            write_file(&out_dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&meta)?.as_bytes())?;
            samples.push(SampleRecord {
                stem,
                pose_id,
                view: tag,
                split,
            });
        }
    }
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        joint_names: names.iter().map(|s| s.to_string()).collect(),
        domain: params.domain,
        resolution: params.resolution,
        far_plane_m: FAR_PLANE_M,
        seed: params.seed,
        num_poses: params.num,
        views: params.views.clone(),
        test_fraction: params.test_fraction,
        sampler: params.sampler.clone(),
        samples,
    };
    let path = out_dir.join("manifest.json");
    write_file(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let m: DatasetManifest = serde_json::from_slice(&read_file(&path)?)
        .map_err(|e| DecaError::Data(format!("{}: {e}", path.display())))?;
    if m.version != DATASET_VERSION {
        return Err(DecaError::Data(format!(
            "dataset version {} is not supported (expected {DATASET_VERSION})",
            m.version
        )));
    }
    Ok(m)
}

/// Reads one sample following the on-disk contract.
pub fn load_sample(dir: &Path, manifest: &DatasetManifest, rec: &SampleRecord) -> Result<PoseSample> {
    let [h, w] = manifest.resolution;
    let meta_path = dir.join(format!("{}.json", rec.stem));
    let meta: SampleMeta = serde_json::from_slice(&read_file(&meta_path)?)
        .map_err(|e| DecaError::Data(format!("{}: {e}", meta_path.display())))?;
    let j = manifest.joints();
    if meta.joints3d.len() != j || meta.joints2d.len() != j {
        return Err(DecaError::Data(format!("{}: expected {j} joints", rec.stem)));
    }
    if meta.pose_id != rec.pose_id || meta.view != rec.view || meta.split != rec.split {
        return Err(DecaError::Data(format!("{}: metadata disagrees with the manifest", rec.stem)));
    }
    let depth_path = dir.join(format!("{}.depth.f32", rec.stem));
    let depth = f32_from_le_bytes(&read_file(&depth_path)?);
    if depth.len() != h * w {
        return Err(DecaError::Data(format!(
            "{}: {} depth values for a {h}x{w} image",
            depth_path.display(),
            depth.len()
        )));
    }
    let (image, depth_gt) = match manifest.domain {
        Domain::Depth => (Tensor::new(&[1, h, w], depth)?, None),
        Domain::Rgb => {
            let rgb_path = dir.join(format!("{}.rgb.u8", rec.stem));
            let rgb = read_file(&rgb_path)?;
            if rgb.len() != 3 * h * w {
                return Err(DecaError::Data(format!("{}: wrong byte count {}", rgb_path.display(), rgb.len())));
            }
            let mut planar = vec![0f32; 3 * h * w];
            for (p, px) in rgb.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    planar[c * h * w + p] = px[c] as f32;
                }
            }
            (Tensor::new(&[3, h, w], planar)?, Some(depth))
        }
    };
    let mut camera = meta.camera;
    camera.tag = Some(rec.view);
    Ok(PoseSample {
        stem: rec.stem.clone(),
        pose_id: rec.pose_id,
        view: rec.view,
        split: rec.split,
        camera,
        image,
        joints3d: meta.joints3d,
        joints2d: meta.joints2d,
        depth_gt,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut train_ids = std::collections::HashSet::new();
    let mut test_ids = std::collections::HashSet::new();
    for r in &manifest.samples {
        match r.split {
            Split::Train => train_ids.insert(r.pose_id),
            Split::Test => test_ids.insert(r.pose_id),
        };
    }
    if let Some(p) = train_ids.intersection(&test_ids).next() {
        return Err(DecaError::Data(format!("pose {p} appears in both splits")));
    }
    let samples = manifest
        .samples
        .iter()
        .map(|r| load_sample(dir, &manifest, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        root: dir.to_path_buf(),
        manifest,
        samples,
    })
}

/// Maps raw input to `[0,1]`: depth `d / far_plane` (clamped), RGB `v / 255`.
pub fn normalize_input(sample: &PoseSample, far_plane: f64) -> Result<Vec<f32>> {
    let data = sample.image.data();
    if sample.image.shape()[0] == 3 {
        return Ok(data.iter().map(|&v| v / 255.0).collect());
    }
    normalize_depth(data, far_plane)
}

pub fn normalize_depth(depth: &[f32], far_plane: f64) -> Result<Vec<f32>> {
    if let Some(d) = depth.iter().find(|d| !(**d >= 0.0)) {
        return Err(DecaError::Data(format!("invalid depth value {d}")));
    }
    let inv = 1.0 / far_plane;
    Ok(depth.iter().map(|&d| ((d as f64 * inv).clamp(0.0, 1.0)) as f32).collect())
}

pub fn denormalize_depth(x: &[f32], far_plane: f64) -> Vec<f32> {
    x.iter().map(|&v| (v as f64 * far_plane) as f32).collect()
}

/// Depth-map target at `[H', W']`: height above the far plane
/// (`far − depth`, zero on background) averaged over each source block.
pub fn depth_map_target(depth: &[f32], src: [usize; 2], dst: [usize; 2], far_plane: f64) -> Result<Vec<f32>> {
    let ([h, w], [rh, rw]) = (src, dst);
    if depth.len() != h * w || rh == 0 || rw == 0 || h % rh != 0 || w % rw != 0 {
        return Err(DecaError::Config(format!(
            "cannot pool a {h}x{w} depth map onto {rh}x{rw}"
        )));
    }
    let (bh, bw) = (h / rh, w / rw);
    let mut out = vec![0f32; rh * rw];
    for y in 0..rh {
        for x in 0..rw {
            let mut s = 0.0;
            for dy in 0..bh {
                for dx in 0..bw {
                    s += far_plane - depth[(y * bh + dy) * w + x * bw + dx] as f64;
                }
            }
            out[y * rw + x] = (s / (bh * bw) as f64) as f32;
        }
    }
    Ok(out)
}

/// One Gaussian bump per joint on a `[J, H', W']` grid, with `sigma` scaled
/// from 2 px at 64 px width.
pub fn heatmap_target(joints2d: &[[f64; 2]], dst: [usize; 2]) -> Vec<f32> {
    let [rh, rw] = dst;
    let sigma = 2.0 * rw as f64 / 64.0;
    let mut out = vec![0f32; joints2d.len() * rh * rw];
    for (j, p) in joints2d.iter().enumerate() {
        let (px, py) = (p[0] * rw as f64, p[1] * rh as f64);
        for y in 0..rh {
            for x in 0..rw {
                let d2 = (x as f64 + 0.5 - px).powi(2) + (y as f64 + 0.5 - py).powi(2);
                out[(j * rh + y) * rw + x] = (-d2 / (2.0 * sigma * sigma)).exp() as f32;
            }
        }
    }
    out
}
