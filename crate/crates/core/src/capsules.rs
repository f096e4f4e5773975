//! Matrix capsules with Gaussian-mixture routing.
//!
//! Every capsule carries an activation in (0,1) and a 4×4 pose matrix,
//! stored flattened row-major as 16 values. Lower capsules vote for upper
//! capsules through learned 4×4 transforms (`V = M · W`), and routing fits
//! one diagonal Gaussian per upper capsule to the votes it receives.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, GATHER_PAD};
use crate::error::{DecaError, Result};
use crate::nn::{xavier_bound, Conv2dLayer};
use crate::real::Real;
use crate::tensor::{ParamId, ParamStore, Tensor};

pub const POSE_DIM: usize = 16;

/// Numerical floor added to denominators of the routing statistics.
const TINY: f64 = 1e-9;
/// Floor on routed variances.
const VAR_FLOOR: f64 = 1e-6;
/// Routing instances whose lower activations all fall below this are
/// rejected.
pub const MIN_ACTIVATION: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingConfig {
    pub iterations: usize,
    /// Pseudo-count pulling each variance estimate toward 1.
    pub prior_strength: f64,
    /// Inverse temperature per iteration.
    pub inv_temperature_schedule: Vec<f64>,
    /// Add scaled grid coordinates to the class-layer votes.
    pub coordinate_addition: bool,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            prior_strength: 1.0,
            inv_temperature_schedule: vec![1.0, 2.0, 3.0],
            coordinate_addition: false,
        }
    }
}

impl RoutingConfig {
    pub fn with_iterations(iterations: usize) -> Self {
        Self {
            iterations,
            inv_temperature_schedule: (1..=iterations).map(|t| t as f64).collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(DecaError::Config("routing needs at least one iteration".into()));
        }
        if self.inv_temperature_schedule.len() != self.iterations {
            return Err(DecaError::Config(format!(
                "inverse temperature schedule has {} entries for {} iterations",
                self.inv_temperature_schedule.len(),
                self.iterations
            )));
        }
        if self.inv_temperature_schedule.iter().any(|&l| !(l > 0.0))
            || self.inv_temperature_schedule.windows(2).any(|w| w[1] < w[0])
        {
            return Err(DecaError::Config(
                "inverse temperatures must be positive and non-decreasing".into(),
            ));
        }
        if !(self.prior_strength >= 0.0) {
            return Err(DecaError::Config("prior_strength must be >= 0".into()));
        }
        Ok(())
    }
}

/// Spatial arrangement of a convolutional capsule layer. Capsules are
/// ordered `(row, col, type)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CapsuleGrid {
    pub height: usize,
    pub width: usize,
    pub types: usize,
}

impl CapsuleGrid {
    pub fn len(&self) -> usize {
        self.height * self.width * self.types
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Batched activations `[B, N]` and flattened poses `[B, N, 16]`.
#[derive(Clone, Copy, Debug)]
pub struct CapsuleState<'g, T: Real> {
    pub activations: Var<'g, T>,
    pub poses: Var<'g, T>,
    pub grid: Option<CapsuleGrid>,
}

impl<'g, T: Real> CapsuleState<'g, T> {
    pub fn batch(&self) -> usize {
        self.poses.shape()[0]
    }

    pub fn count(&self) -> usize {
        self.poses.shape()[1]
    }
}

/// Learned `[lower_types, upper, 4, 4]` transforms; lower capsule `i` uses
/// slot `i % lower_types`.
#[derive(Clone, Debug)]
pub struct TransformWeights {
    pub param: ParamId,
    pub lower_types: usize,
    pub upper: usize,
}

impl TransformWeights {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        lower_types: usize,
        upper: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if lower_types == 0 || upper == 0 {
            return Err(DecaError::Config(format!(
                "{name}: capsule layer needs lower and upper capsules"
            )));
        }
        let param = store.add(format!("{name}.transforms"), random_4x4_blocks(lower_types * upper, &[lower_types, upper, 4, 4], rng)?)?;
        Ok(Self {
            param,
            lower_types,
            upper,
        })
    }
}

fn random_4x4_blocks<T: Real, R: Rng + ?Sized>(blocks: usize, shape: &[usize], rng: &mut R) -> Result<Tensor<T>> {
    // each 4×4 block is its own fan-in/fan-out pair
    let a = xavier_bound(4, 4);
    let data = (0..blocks * 16).map(|_| T::from_f64(rng.gen_range(-a..=a))).collect();
    Tensor::new(shape, data)
}

/// One learnable 4×4 matrix per class capsule, trained toward the inverse
/// of that capsule's incoming transforms.
#[derive(Clone, Debug)]
pub struct InverseGraphicsMatrix {
    pub param: ParamId,
    pub classes: usize,
}

impl InverseGraphicsMatrix {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, classes: usize, rng: &mut R) -> Result<Self> {
        let param = store.add(format!("{name}.inverse_graphics"), random_4x4_blocks(classes, &[classes, 4, 4], rng)?)?;
        Ok(Self { param, classes })
    }
}

/// Trainable activation-cost offsets of one routing layer.
#[derive(Clone, Debug)]
pub struct RoutingParams {
    pub beta_a: ParamId,
    pub beta_u: ParamId,
}

impl RoutingParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str) -> Result<Self> {
        Ok(Self {
            beta_a: store.add(format!("{name}.beta_a"), Tensor::scalar(T::zero()))?,
            beta_u: store.add(format!("{name}.beta_u"), Tensor::scalar(T::one()))?,
        })
    }
}

/// Votes `V[p,i,j] = M[p,i] · W[i mod lower_types, j]` as `[P, N_i, N_j, 4, 4]`.
pub fn compute_votes<'g, T: Real>(
    poses: Var<'g, T>,
    weights: &TransformWeights,
    store: &ParamStore<T>,
) -> Result<Var<'g, T>> {
    let shape = poses.shape();
    if shape.len() != 3 || shape[2] != POSE_DIM {
        return Err(DecaError::Dimension(format!(
            "votes expect poses [P, N, 16], got {shape:?}"
        )));
    }
    let (p, n) = (shape[0], shape[1]);
    let lt = weights.lower_types;
    if n % lt != 0 {
        return Err(DecaError::Dimension(format!(
            "{n} lower capsules do not tile {lt} transform types"
        )));
    }
    let g = poses.graph();
    let w = g.param(store, weights.param);
    let m = poses.reshape(&[p, n / lt, lt, 1, 4, 4])?;
    let v = m.matmul(w)?;
    v.reshape(&[p, n, weights.upper, 4, 4])
}

/// Result of one routing call.
#[derive(Clone, Debug)]
pub struct RoutingOutput<'g, T: Real> {
    /// `[P, N_j, 16]` Gaussian means.
    pub poses: Var<'g, T>,
    /// `[P, N_j]`.
    pub activations: Var<'g, T>,
    /// Responsibilities `[P, N_i, N_j]` after each E-step.
    pub responsibilities: Vec<Var<'g, T>>,
}

/// Iterative Gaussian-mixture routing of `votes: [P, N_i, N_j, 16]`
/// weighted by `a_lower: [P, N_i]`.
///
/// Starting from uniform responsibilities, each iteration runs an M-step
/// (weighted mean, pseudo-count regularized diagonal variance, activation
/// from the expected negative log-likelihood) and, except after the last
/// M-step, an E-step that reassigns each vote across upper capsules in
/// proportion to `a_j · N(v; μ_j, σ²_j)`. The whole loop is recorded on the
/// graph, so gradients flow through every iteration.
pub fn vb_routing<'g, T: Real>(
    a_lower: Var<'g, T>,
    votes: Var<'g, T>,
    cfg: &RoutingConfig,
    beta_a: Var<'g, T>,
    beta_u: Var<'g, T>,
) -> Result<RoutingOutput<'g, T>> {
    cfg.validate()?;
    let vs = votes.shape();
    let as_ = a_lower.shape();
    if vs.len() != 4 || as_.len() != 2 || as_[0] != vs[0] || as_[1] != vs[1] {
        return Err(DecaError::Dimension(format!(
            "routing expects a [P,N_i] and votes [P,N_i,N_j,D], got {as_:?} and {vs:?}"
        )));
    }
    let (p, ni, nj, d) = (vs[0], vs[1], vs[2], vs[3]);
    if nj == 0 {
        return Err(DecaError::Config("routing needs at least one upper capsule".into()));
    }
    a_lower.with_data(|a| {
        for (pi, row) in a.chunks(ni).enumerate() {
            if row.iter().all(|&v| v.as_f64() < MIN_ACTIVATION) {
                return Err(DecaError::Degenerate(format!(
                    "routing instance {pi}: every lower activation is below {MIN_ACTIVATION:e}"
                )));
            }
        }
        Ok(())
    })?;

    let g = votes.graph();
    let c = T::from_f64;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let k = cfg.prior_strength;

    let a4 = a_lower.reshape(&[p, ni, 1, 1])?;
    let mean_support = a4.sum_axis(1)?.scale(c(1.0 / nj as f64)).add_scalar(c(TINY));
    let mut r = g.constant(Tensor::full(&[1, 1, nj, 1], c(1.0 / nj as f64)));
    let mut trace = Vec::new();
    let mut out = None;
    for (t, &lambda) in cfg.inv_temperature_schedule.iter().enumerate() {
        // M-step
        let w = r.mul(a4)?;
        let sw = w.sum_axis(1)?;
        let mu = w.mul(votes)?.sum_axis(1)?.div(sw.add_scalar(c(TINY)))?;
        let diff = votes.sub(mu)?;
        let d2 = diff.square();
        let var = w
            .mul(d2)?
            .sum_axis(1)?
            .add_scalar(c(k))
            .div(sw.add_scalar(c(k + TINY)))?
            .add_scalar(c(VAR_FLOOR));
        let log_var = var.ln();
        let nll = log_var
            .scale(c(0.5))
            .add_scalar(c(0.5 * (1.0 + ln_2pi)))
            .sum_axis(3)?
            .scale(c(1.0 / d as f64));
        let cost = sw.div(mean_support)?.mul(nll)?;
        let beta_term = beta_a.sub(beta_u.mul(cost)?)?;
        let logit = beta_term.scale(c(lambda));
        let act = logit.sigmoid();
        if t + 1 == cfg.iterations {
            out = Some((mu, act));
            break;
        }
        // E-step
        let log_p = d2
            .div(var)?
            .add(log_var)?
            .add_scalar(c(ln_2pi))
            .sum_axis(3)?
            .scale(c(-0.5));
        let logits = logit.log_sigmoid().add(log_p)?;
        r = logits.softmax(2)?;
        trace.push(r.reshape(&[p, ni, nj])?);
    }
    let (mu, act) = out.expect("at least one iteration");
    Ok(RoutingOutput {
        poses: mu.reshape(&[p, nj, d])?,
        activations: act.reshape(&[p, nj])?,
        responsibilities: trace,
    })
}

/// 1×1 convolution turning features into `types` capsules per position.
#[derive(Clone, Debug)]
pub struct PrimaryCapsules {
    pub conv: Conv2dLayer,
    pub types: usize,
}

impl PrimaryCapsules {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        types: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if types == 0 || in_channels < (POSE_DIM + 1) * types {
            return Err(DecaError::Config(format!(
                "primary capsules need at least {} input channels for {types} types, got {in_channels}",
                (POSE_DIM + 1) * types
            )));
        }
        let conv = Conv2dLayer::new(store, name, in_channels, (POSE_DIM + 1) * types, 1, 1, 0, rng)?;
        Ok(Self { conv, types })
    }

    pub fn forward<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        features: Var<'g, T>,
    ) -> Result<CapsuleState<'g, T>> {
        let shape = features.shape();
        if shape.len() != 4 || shape[1] != self.conv.in_channels {
            return Err(DecaError::Config(format!(
                "primary capsules expect [B,{},H,W] features, got {shape:?}",
                self.conv.in_channels
            )));
        }
        let (b, h, w) = (shape[0], shape[2], shape[3]);
        let y = self.conv.forward(g, store, features)?;
        let n = h * w * self.types;
        let y = y.permute(&[0, 2, 3, 1])?.reshape(&[b, n, POSE_DIM + 1])?;
        let poses = y.narrow(2, 0, POSE_DIM)?;
        let activations = y.narrow(2, POSE_DIM, 1)?.sigmoid().reshape(&[b, n])?;
        Ok(CapsuleState {
            activations,
            poses,
            grid: Some(CapsuleGrid {
                height: h,
                width: w,
                types: self.types,
            }),
        })
    }
}

/// Convolutional capsule layer: each output position routes the capsules
/// in its `kernel × kernel` window. Padding slots carry zero activation.
#[derive(Clone, Debug)]
pub struct ConvCapsules {
    pub weights: TransformWeights,
    pub routing: RoutingParams,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub types_in: usize,
    pub types_out: usize,
}

impl ConvCapsules {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        types_in: usize,
        types_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weights = TransformWeights::new(store, name, kernel * kernel * types_in, types_out, rng)?;
        let routing = RoutingParams::new(store, name)?;
        Ok(Self {
            weights,
            routing,
            kernel,
            stride,
            padding,
            types_in,
            types_out,
        })
    }

    pub fn output_grid(&self, grid: CapsuleGrid) -> CapsuleGrid {
        CapsuleGrid {
            height: (grid.height + 2 * self.padding - self.kernel) / self.stride + 1,
            width: (grid.width + 2 * self.padding - self.kernel) / self.stride + 1,
            types: self.types_out,
        }
    }

    fn window_index(&self, batch: usize, grid: CapsuleGrid, out: CapsuleGrid, inner: usize) -> Vec<usize> {
        let k = self.kernel;
        let mut idx = Vec::with_capacity(batch * out.height * out.width * k * k * grid.types * inner);
        for b in 0..batch {
            for oh in 0..out.height {
                for ow in 0..out.width {
                    for kh in 0..k {
                        for kw in 0..k {
                            let ih = (oh * self.stride + kh) as isize - self.padding as isize;
                            let iw = (ow * self.stride + kw) as isize - self.padding as isize;
                            let inside = ih >= 0
                                && iw >= 0
                                && (ih as usize) < grid.height
                                && (iw as usize) < grid.width;
                            for t in 0..grid.types {
                                for e in 0..inner {
                                    idx.push(if inside {
                                        let cap = ((b * grid.height + ih as usize) * grid.width + iw as usize)
                                            * grid.types
                                            + t;
                                        cap * inner + e
                                    } else {
                                        GATHER_PAD
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        idx
    }

    pub fn forward<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        lower: CapsuleState<'g, T>,
        cfg: &RoutingConfig,
    ) -> Result<CapsuleState<'g, T>> {
        let grid = lower
            .grid
            .ok_or_else(|| DecaError::Config("convolutional capsules need a capsule grid".into()))?;
        if grid.types != self.types_in {
            return Err(DecaError::Dimension(format!(
                "conv capsules built for {} types, got {}",
                self.types_in, grid.types
            )));
        }
        if grid.height + 2 * self.padding < self.kernel || grid.width + 2 * self.padding < self.kernel {
            return Err(DecaError::Config(format!(
                "capsule grid {}x{} smaller than kernel {}",
                grid.height, grid.width, self.kernel
            )));
        }
        let b = lower.batch();
        let out = self.output_grid(grid);
        let positions = b * out.height * out.width;
        let window = self.kernel * self.kernel * grid.types;
        let pose_idx = Rc::new(self.window_index(b, grid, out, POSE_DIM));
        let act_idx = Rc::new(self.window_index(b, grid, out, 1));
        let poses = lower.poses.gather(&[positions, window, POSE_DIM], pose_idx)?;
        let acts = lower.activations.gather(&[positions, window], act_idx)?;
        let votes = compute_votes(poses, &self.weights, store)?.reshape(&[positions, window, self.types_out, POSE_DIM])?;
        let beta_a = g.param(store, self.routing.beta_a);
        let beta_u = g.param(store, self.routing.beta_u);
        let routed = vb_routing(acts, votes, cfg, beta_a, beta_u)?;
        let n = out.height * out.width * self.types_out;
        Ok(CapsuleState {
            activations: routed.activations.reshape(&[b, n])?,
            poses: routed.poses.reshape(&[b, n, POSE_DIM])?,
            grid: Some(out),
        })
    }
}

/// Output of the class-capsule layer.
#[derive(Clone, Debug)]
pub struct ClassOutput<'g, T: Real> {
    pub state: CapsuleState<'g, T>,
    /// `[J, 4, 4]` inverse-graphics matrices.
    pub inverse_graphics: Var<'g, T>,
    pub responsibilities: Vec<Var<'g, T>>,
}

/// Fully connected capsule layer onto one capsule per joint. Its final
/// routing iteration is the class-routing step.
#[derive(Clone, Debug)]
pub struct ClassCapsules {
    pub weights: TransformWeights,
    pub inverse_graphics: InverseGraphicsMatrix,
    pub routing: RoutingParams,
    pub classes: usize,
}

impl ClassCapsules {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        types_in: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(DecaError::Config("class capsules need at least one class".into()));
        }
        let weights = TransformWeights::new(store, name, types_in, classes, rng)?;
        let inverse_graphics = InverseGraphicsMatrix::new(store, name, classes, rng)?;
        let routing = RoutingParams::new(store, name)?;
        Ok(Self {
            weights,
            inverse_graphics,
            routing,
            classes,
        })
    }

    pub fn forward<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        lower: CapsuleState<'g, T>,
        cfg: &RoutingConfig,
    ) -> Result<ClassOutput<'g, T>> {
        let (b, n) = (lower.batch(), lower.count());
        if let Some(grid) = lower.grid {
            if grid.types != self.weights.lower_types {
                return Err(DecaError::Dimension(format!(
                    "class capsules built for {} types, got {}",
                    self.weights.lower_types, grid.types
                )));
            }
        }
        let mut votes = compute_votes(lower.poses, &self.weights, store)?.reshape(&[b, n, self.classes, POSE_DIM])?;
        if cfg.coordinate_addition {
            let grid = lower
                .grid
                .ok_or_else(|| DecaError::Config("coordinate addition needs a capsule grid".into()))?;
            let mut offs = vec![T::zero(); n * POSE_DIM];
            for h in 0..grid.height {
                for w in 0..grid.width {
                    for t in 0..grid.types {
                        let i = (h * grid.width + w) * grid.types + t;
                        offs[i * POSE_DIM + 3] = T::from_f64((w as f64 + 0.5) / grid.width as f64);
                        offs[i * POSE_DIM + 7] = T::from_f64((h as f64 + 0.5) / grid.height as f64);
                    }
                }
            }
            votes = votes.add(g.input(&[1, n, 1, POSE_DIM], offs)?)?;
        }
        let beta_a = g.param(store, self.routing.beta_a);
        let beta_u = g.param(store, self.routing.beta_u);
        let routed = vb_routing(lower.activations, votes, cfg, beta_a, beta_u)?;
        Ok(ClassOutput {
            state: CapsuleState {
                activations: routed.activations,
                poses: routed.poses,
                grid: None,
            },
            inverse_graphics: g.param(store, self.inverse_graphics.param),
            responsibilities: routed.responsibilities,
        })
    }
}

/// Splits a flattened latent feature vector into `joints` contiguous
/// entities of 16 values each.
pub fn extract_entities<T: Real>(feature_vector: &[T], joints: usize) -> Result<Tensor<T>> {
    let l = feature_vector.len();
    if joints == 0 || l % joints != 0 || l / joints != POSE_DIM {
        return Err(DecaError::Contract(format!(
            "feature vector of length {l} does not split into {joints} entities of {POSE_DIM}"
        )));
    }
    Tensor::new(&[joints, POSE_DIM], feature_vector.to_vec())
}
