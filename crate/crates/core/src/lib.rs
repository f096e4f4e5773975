//! Matrix-capsule autoencoder engine for viewpoint-equivariant 3D human pose
//! estimation.

pub mod autodiff;
pub mod capsules;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod real;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{DecaError, Result};
pub use real::Real;
pub use tensor::{ParamId, ParamStore, Parameter, Tensor};
