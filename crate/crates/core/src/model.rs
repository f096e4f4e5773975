//! The DECA autoencoder: a convolutional stem feeding a matrix-capsule
//! stack whose class capsules (one per joint) are decoded by independent
//! task heads.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::capsules::{ClassCapsules, ConvCapsules, PrimaryCapsules, RoutingConfig, POSE_DIM};
use crate::error::{DecaError, Result};
use crate::nn::{dropout, Conv2dLayer, InstanceNormLayer, LinearLayer, Mode};
use crate::real::Real;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Total stride of the convolutional stem.
pub const ENCODER_STRIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "T3D")]
    Pose3d,
    #[serde(rename = "T2D")]
    Pose2d,
    #[serde(rename = "DM")]
    DepthMap,
    #[serde(rename = "DM_J")]
    JointHeatmaps,
    #[serde(rename = "W")]
    InverseGraphics,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::Pose3d,
        Task::Pose2d,
        Task::DepthMap,
        Task::JointHeatmaps,
        Task::InverseGraphics,
    ];

    /// Short key used in parameter names and logs.
    pub fn key(self) -> &'static str {
        match self {
            Task::Pose3d => "3d",
            Task::Pose2d => "2d",
            Task::DepthMap => "dm",
            Task::JointHeatmaps => "dm_j",
            Task::InverseGraphics => "w",
        }
    }

    pub fn has_head(self) -> bool {
        self != Task::InverseGraphics
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "depth")]
    Depth,
    #[serde(rename = "rgb")]
    Rgb,
}

impl Domain {
    pub fn channels(self) -> usize {
        match self {
            Domain::Depth => 1,
            Domain::Rgb => 3,
        }
    }
}

impl FromStr for Domain {
    type Err = DecaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(Domain::Depth),
            "rgb" => Ok(Domain::Rgb),
            _ => Err(DecaError::Config(format!("unknown domain {s:?} (expected depth or rgb)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    D1,
    D2,
    D3,
    R4,
    H4,
}

impl Variant {
    pub fn tasks(self) -> &'static [Task] {
        use Task::*;
        match self {
            Variant::D1 => &[Pose3d],
            Variant::D2 => &[Pose3d, InverseGraphics],
            Variant::D3 => &[Pose3d, Pose2d, InverseGraphics],
            Variant::R4 => &[Pose3d, Pose2d, DepthMap, InverseGraphics],
            Variant::H4 => &[Pose3d, Pose2d, JointHeatmaps, InverseGraphics],
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            Variant::D1 | Variant::D2 | Variant::D3 => Domain::Depth,
            Variant::R4 | Variant::H4 => Domain::Rgb,
        }
    }
}

impl FromStr for Variant {
    type Err = DecaError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "D1" => Ok(Variant::D1),
            "D2" => Ok(Variant::D2),
            "D3" => Ok(Variant::D3),
            "R4" => Ok(Variant::R4),
            "H4" => Ok(Variant::H4),
            _ => Err(DecaError::Config(format!("unknown variant {s:?}"))),
        }
    }
}

/// Everything needed to rebuild a model. The task set is a function of
/// the variant and is not stored separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecaConfig {
    pub variant: Variant,
    pub joints: usize,
    pub input_channels: usize,
    /// `[H, W]`.
    pub input_resolution: [usize; 2],
    /// `[H', W']` of the depth-map and heatmap heads.
    pub recon_resolution: [usize; 2],
    pub routing: RoutingConfig,
    pub capsule_types: usize,
    pub encoder_channels: [usize; 4],
    pub decoder_hidden: usize,
    pub dropout: f64,
}

impl Default for DecaConfig {
    fn default() -> Self {
        Self {
            variant: Variant::D1,
            joints: 15,
            input_channels: 1,
            input_resolution: [64, 64],
            recon_resolution: [32, 32],
            routing: RoutingConfig::default(),
            capsule_types: 8,
            encoder_channels: [64, 128, 256, 256],
            decoder_hidden: 128,
            dropout: 0.5,
        }
    }
}

impl DecaConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            variant,
            input_channels: variant.domain().channels(),
            ..Self::default()
        }
    }

    /// Full-sized network: 256×256 input and 256 hidden decoder units.
    pub fn full_scale(variant: Variant) -> Self {
        Self {
            input_resolution: [256, 256],
            recon_resolution: [64, 64],
            decoder_hidden: 256,
            ..Self::for_variant(variant)
        }
    }

    pub fn tasks(&self) -> &'static [Task] {
        self.variant.tasks()
    }

    pub fn has_task(&self, t: Task) -> bool {
        self.tasks().contains(&t)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(DecaError::Config(m));
        if self.joints == 0 {
            return cfg("joints must be positive".into());
        }
        let want = self.variant.domain().channels();
        if self.input_channels != want {
            return cfg(format!(
                "variant {:?} works on {:?} input with {want} channel(s), got {}",
                self.variant,
                self.variant.domain(),
                self.input_channels
            ));
        }
        let [h, w] = self.input_resolution;
        if h == 0 || w == 0 || h % ENCODER_STRIDE != 0 || w % ENCODER_STRIDE != 0 {
            return cfg(format!(
                "input resolution {h}x{w} must be a positive multiple of {ENCODER_STRIDE}"
            ));
        }
        if h < 2 * ENCODER_STRIDE || w < 2 * ENCODER_STRIDE {
            return cfg(format!(
                "input resolution {h}x{w} leaves a 1x1 map for instance normalization, which zeroes it; use at least {0}x{0}",
                2 * ENCODER_STRIDE
            ));
        }
        if self.recon_resolution.contains(&0) {
            return cfg("recon_resolution must be positive".into());
        }
        if self.encoder_channels.contains(&0) || self.capsule_types == 0 || self.decoder_hidden == 0 {
            return cfg("layer widths must be positive".into());
        }
        if self.encoder_channels[3] < (POSE_DIM + 1) * self.capsule_types {
            return cfg(format!(
                "last encoder width {} cannot feed {} primary capsule types (needs {})",
                self.encoder_channels[3],
                self.capsule_types,
                (POSE_DIM + 1) * self.capsule_types
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return cfg(format!("dropout {} outside [0,1)", self.dropout));
        }
        self.routing.validate()
    }

    pub fn output_size(&self, task: Task) -> usize {
        let [rh, rw] = self.recon_resolution;
        match task {
            Task::Pose3d => 3 * self.joints,
            Task::Pose2d => 2 * self.joints,
            Task::DepthMap => rh * rw,
            Task::JointHeatmaps => self.joints * rh * rw,
            Task::InverseGraphics => 0,
        }
    }
}

/// One decoder: Dropout → Linear → GELU → Linear.
#[derive(Clone, Debug)]
pub struct DecoderHead {
    pub task: Task,
    pub hidden: LinearLayer,
    pub output: LinearLayer,
}

impl DecoderHead {
    fn forward<'g, T: Real, R: Rng + ?Sized>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
        p: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var<'g, T>> {
        let x = dropout(x, p, mode, rng)?;
        let h = self.hidden.forward(g, store, x)?.gelu();
        self.output.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub convs: Vec<Conv2dLayer>,
    pub norms: Vec<InstanceNormLayer>,
    pub primary: PrimaryCapsules,
    pub conv_capsules: Vec<ConvCapsules>,
    pub class_capsules: ClassCapsules,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput<'g, T: Real> {
    /// `[B, J, 16]` class-capsule poses.
    pub entities: Var<'g, T>,
    /// `[B, J]`.
    pub class_activations: Var<'g, T>,
    /// `[J, 4, 4]`.
    pub inverse_graphics: Var<'g, T>,
    /// `[T_in, J, 4, 4]` class-layer transforms.
    pub class_transforms: Var<'g, T>,
}

#[derive(Clone, Debug)]
pub struct Predictions<'g, T: Real> {
    /// `[B, J, 3]` meters, camera frame.
    pub y3d: Var<'g, T>,
    /// `[B, J, 2]` normalized image coordinates.
    pub y2d: Option<Var<'g, T>>,
    /// `[B, H', W']` depth map, or `[B, J, H', W']` heatmaps for H4.
    pub ydm: Option<Var<'g, T>>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput<'g, T: Real> {
    pub encoded: EncoderOutput<'g, T>,
    pub predictions: Predictions<'g, T>,
}

/// Parameter handles for a DECA network. The values live in a
/// [`ParamStore`] so the same layout serves 32- and 64-bit runs.
#[derive(Clone, Debug)]
pub struct Deca {
    pub config: DecaConfig,
    pub encoder: Encoder,
    pub heads: BTreeMap<Task, DecoderHead>,
    /// Self-balancing weight `s_τ` per enabled task.
    pub loss_weights: BTreeMap<Task, ParamId>,
}

impl Deca {
    /// Builds the network, registering parameters in `store` in a fixed
    /// order. The same `(config, seed)` always yields the same values.
    pub fn new<T: Real>(config: DecaConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = config.encoder_channels;
        let ins = [config.input_channels, ch[0], ch[1], ch[2]];
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for i in 0..4 {
            convs.push(Conv2dLayer::without_bias(
                store,
                &format!("encoder.conv{i}"),
                ins[i],
                ch[i],
                3,
                2,
                1,
                &mut rng,
            )?);
            norms.push(InstanceNormLayer::new(store, &format!("encoder.norm{i}"), ch[i])?);
        }
        let types = config.capsule_types;
        let primary = PrimaryCapsules::new(store, "encoder.primary", ch[3], types, &mut rng)?;
        let conv_capsules = (0..2)
            .map(|i| ConvCapsules::new(store, &format!("encoder.convcaps{i}"), types, types, 3, 2, 1, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let class_capsules = ClassCapsules::new(store, "encoder.class", types, config.joints, &mut rng)?;

        let feat = POSE_DIM * config.joints;
        let mut heads = BTreeMap::new();
        for &task in config.tasks().iter().filter(|t| t.has_head()) {
            let name = format!("decoder.{}", task.key());
            let hidden = LinearLayer::new(store, &format!("{name}.fc0"), feat, config.decoder_hidden, &mut rng)?;
            let output = LinearLayer::new(
                store,
                &format!("{name}.fc1"),
                config.decoder_hidden,
                config.output_size(task),
                &mut rng,
            )?;
            heads.insert(task, DecoderHead { task, hidden, output });
        }
        let mut loss_weights = BTreeMap::new();
        for &task in config.tasks() {
            let id = store.add(format!("loss.s_{}", task.key()), Tensor::scalar(T::one()))?;
            loss_weights.insert(task, id);
        }
        Ok(Self {
            config,
            encoder: Encoder {
                convs,
                norms,
                primary,
                conv_capsules,
                class_capsules,
            },
            heads,
            loss_weights,
        })
    }

    /// Checks that `shape` is a batch of inputs this model accepts.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [h, w] = self.config.input_resolution;
        if shape.len() != 4 || shape[1] != self.config.input_channels || shape[2] != h || shape[3] != w {
            return Err(DecaError::Dimension(format!(
                "model expects input [B,{},{h},{w}], got {shape:?}",
                self.config.input_channels
            )));
        }
        Ok(())
    }

    pub fn encode<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
    ) -> Result<EncoderOutput<'g, T>> {
        self.check_input(&x.shape())?;
        let enc = &self.encoder;
        let mut h = x;
        for (conv, norm) in enc.convs.iter().zip(&enc.norms) {
            h = norm.forward(g, store, conv.forward(g, store, h)?)?.gelu();
        }
        let mut caps = enc.primary.forward(g, store, h)?;
        for layer in &enc.conv_capsules {
            caps = layer.forward(g, store, caps, &self.config.routing)?;
        }
        let class = enc.class_capsules.forward(g, store, caps, &self.config.routing)?;
        Ok(EncoderOutput {
            entities: class.state.poses,
            class_activations: class.state.activations,
            inverse_graphics: class.inverse_graphics,
            class_transforms: g.param(store, enc.class_capsules.weights.param),
        })
    }

    pub fn decode<'g, T: Real, R: Rng + ?Sized>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        entities: Var<'g, T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Predictions<'g, T>> {
        let shape = entities.shape();
        let j = self.config.joints;
        if shape.len() != 3 || shape[1] != j || shape[2] != POSE_DIM {
            return Err(DecaError::Dimension(format!(
                "decoder expects entities [B,{j},16], got {shape:?}"
            )));
        }
        let b = shape[0];
        let flat = entities.reshape(&[b, j * POSE_DIM])?;
        let [rh, rw] = self.config.recon_resolution;
        let mut run = |task: Task, out_shape: &[usize]| -> Result<Option<Var<'g, T>>> {
            match self.heads.get(&task) {
                None => Ok(None),
                Some(head) => Ok(Some(
                    head.forward(g, store, flat, self.config.dropout, mode, rng)?
                        .reshape(out_shape)?,
                )),
            }
        };
        let y3d = run(Task::Pose3d, &[b, j, 3])?
            .ok_or_else(|| DecaError::Config("every variant needs the 3D head".into()))?;
        let y2d = run(Task::Pose2d, &[b, j, 2])?;
        let ydm = match run(Task::DepthMap, &[b, rh, rw])? {
            Some(v) => Some(v),
            None => run(Task::JointHeatmaps, &[b, j, rh, rw])?,
        };
        Ok(Predictions { y3d, y2d, ydm })
    }

    pub fn forward<'g, T: Real, R: Rng + ?Sized>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ModelOutput<'g, T>> {
        let encoded = self.encode(g, store, x)?;
        let predictions = self.decode(g, store, encoded.entities, mode, rng)?;
        Ok(ModelOutput { encoded, predictions })
    }

    /// Parameters of the decoder head for `task`, if enabled.
    pub fn head_params(&self, task: Task) -> Vec<ParamId> {
        self.heads.get(&task).map_or_else(Vec::new, |h| {
            vec![h.hidden.weight, h.hidden.bias, h.output.weight, h.output.bias]
        })
    }
}
