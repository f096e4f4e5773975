//! Neural building blocks: convolution, instance normalization, GELU,
//! linear maps, dropout and Xavier initialization.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{DecaError, Result};
use crate::real::Real;
use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Glorot/Xavier fans: conv weights `[out, in, k, k]` fold the kernel area
/// into both fans.
pub fn xavier_fans(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        return Err(DecaError::Contract(format!(
            "xavier initialization needs at least 2 dims, got {shape:?}"
        )));
    }
    let receptive: usize = shape[2..].iter().product();
    Ok((shape[1] * receptive, shape[0] * receptive))
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn xavier_uniform_init<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor<T>> {
    let (fi, fo) = xavier_fans(shape)?;
    let a = xavier_bound(fi, fo);
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(-a..=a))).collect();
    Tensor::new(shape, data)
}

pub fn gelu<'g, T: Real>(x: Var<'g, T>) -> Var<'g, T> {
    x.gelu()
}

/// Inverted dropout: in training each element is zeroed with probability
/// `p` and survivors are scaled by `1/(1−p)`. Evaluation is the identity.
pub fn dropout<'g, T: Real, R: Rng + ?Sized>(
    x: Var<'g, T>,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var<'g, T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(DecaError::Contract(format!("dropout probability {p} outside [0, 1)")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let scale = T::from_f64(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.numel())
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { scale })
        .collect();
    let m = x.graph().input(&x.shape(), mask)?;
    x.mul(m)
}

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: ParamId,
    /// Absent when the layer feeds a normalization that would cancel it.
    pub bias: Option<ParamId>,
}

impl Conv2dLayer {
    /// Xavier-uniform weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layer =
            Self::without_bias(store, name, in_channels, out_channels, kernel, stride, padding, rng)?;
        layer.bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]))?);
        Ok(layer)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn without_bias<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = xavier_uniform_init(&[out_channels, in_channels, kernel, kernel], rng)?;
        let weight = store.add(format!("{name}.weight"), w)?;
        let bias = None;
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
        })
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward<'g, T: Real>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(DecaError::Dimension(format!(
                "conv expects [B,{},H,W], got {shape:?}",
                self.in_channels
            )));
        }
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        x.conv2d(w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct InstanceNormLayer {
    pub channels: usize,
    pub eps: f64,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl InstanceNormLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?;
        Ok(Self {
            channels,
            eps: 1e-5,
            gamma,
            beta,
        })
    }

    pub fn forward<'g, T: Real>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(DecaError::Dimension(format!(
                "instance norm expects [B,{},H,W], got {shape:?}",
                self.channels
            )));
        }
        let y = x.instance_norm(T::from_f64(self.eps))?;
        let gamma = g.param(store, self.gamma).reshape(&[1, self.channels, 1, 1])?;
        let beta = g.param(store, self.beta).reshape(&[1, self.channels, 1, 1])?;
        y.mul(gamma)?.add(beta)
    }
}

#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = xavier_uniform_init(&[out_features, in_features], rng)?;
        let weight = store.add(format!("{name}.weight"), w)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]))?;
        Ok(Self {
            in_features,
            out_features,
            weight,
            bias,
        })
    }

    /// `x · Wᵀ + b` for `x` of shape `[B, in]`.
    pub fn forward<'g, T: Real>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.in_features {
            return Err(DecaError::Dimension(format!(
                "linear expects [B,{}], got {shape:?}",
                self.in_features
            )));
        }
        let wt = g.param(store, self.weight).permute(&[1, 0])?;
        let b = g.param(store, self.bias);
        x.matmul(wt)?.add(b)
    }
}
