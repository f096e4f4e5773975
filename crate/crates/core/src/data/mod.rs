//! Synthetic multi-view pose data: an articulated stick-figure skeleton,
//! pinhole cameras, a capsule z-buffer renderer and the on-disk dataset
//! format.

pub mod camera;
pub mod dataset;
pub mod render;
pub mod skeleton;

pub use camera::{parse_views, CameraView, ViewTag};
pub use dataset::{
    depth_map_target, generate_synthetic, heatmap_target, load_dataset, normalize_depth, normalize_input, Dataset,
    DatasetManifest, GenParams, PoseSample, Split,
};
pub use render::FAR_PLANE_M;
pub use skeleton::{joint_names, Skeleton, SamplerParams, ITOP_JOINTS};
