//! Parameter registry and the small set of layers the network is built from.
//!
//! Every trainable tensor and every running statistic is created through a
//! [`ParamStore`] under a dotted name (`encoder.stem.conv.weight`). The names
//! are the keys of the weight archive, so they must stay stable.

use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::broadcast;
use crate::conv::{conv2d, conv_transpose2x2};

/// Dense activation array laid out as (batch, channels, height, width).
pub type FeatureMap = Tensor;

/// Forward-pass mode. `Train` normalises with batch statistics and updates
/// running averages; `Eval` uses the stored running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Relu => x.relu()?,
            Activation::Identity => x.clone(),
        })
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::Config(format!(
                "unknown activation `{other}` (expected relu | identity)"
            ))),
        }
    }
}

/// Border handling for same-size convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    #[default]
    Zero,
    Reflect,
}

impl std::str::FromStr for PadMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(PadMode::Zero),
            "reflect" => Ok(PadMode::Reflect),
            other => Err(Error::Config(format!(
                "unknown padding mode `{other}` (expected zero | reflect)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// He normal with the given fan-in.
    Kaiming { fan_in: usize },
    /// Uniform in `[-bound, bound]`.
    Uniform { bound: f64 },
    Const(f64),
}

struct Registry {
    rng: ChaCha8Rng,
    params: Vec<(String, Var)>,
    buffers: Vec<(String, Var)>,
}

/// Owns the seeded initialiser and the list of every tensor created by a model.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    inner: Mutex<Registry>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            dtype,
            device: device.clone(),
            inner: Mutex::new(Registry {
                rng: ChaCha8Rng::seed_from_u64(seed),
                params: Vec::new(),
                buffers: Vec::new(),
            }),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> ParamPath<'_> {
        ParamPath {
            store: self,
            prefix: String::new(),
        }
    }

    /// Trainable parameters in creation order.
    pub fn params(&self) -> Vec<(String, Var)> {
        self.inner.lock().unwrap().params.clone()
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<(String, Var)> {
        self.inner.lock().unwrap().buffers.clone()
    }

    /// Parameters followed by buffers.
    pub fn all(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().unwrap();
        inner
            .params
            .iter()
            .chain(inner.buffers.iter())
            .cloned()
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.all()
            .into_iter()
            .find_map(|(n, v)| (n == name).then_some(v))
    }

    fn create(&self, name: String, shape: &[usize], init: Init, trainable: bool) -> Result<Var> {
        let mut inner = self.inner.lock().unwrap();
        if inner
            .params
            .iter()
            .chain(inner.buffers.iter())
            .any(|(n, _)| *n == name)
        {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Kaiming { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| normal.sample(&mut inner.rng)).collect()
            }
            Init::Uniform { bound } => {
                let uniform = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| uniform.sample(&mut inner.rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        if trainable {
            inner.params.push((name, var.clone()));
        } else {
            inner.buffers.push((name, var.clone()));
        }
        Ok(var)
    }
}

/// A name prefix into a [`ParamStore`].
#[derive(Clone)]
pub struct ParamPath<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> ParamPath<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> ParamPath<'a> {
        ParamPath {
            store: self.store,
            prefix: self.join(name.as_ref()),
        }
    }

    fn join(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.store.create(self.join(name), shape, init, true)
    }

    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.store.create(self.join(name), shape, init, false)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

fn add_channel_bias(x: &Tensor, bias: Option<&Var>) -> Result<Tensor> {
    match bias {
        Some(b) => broadcast::add(x, &b.as_tensor().reshape((1, b.dim(0)?, 1, 1))?),
        None => Ok(x.clone()),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
    pub pad_mode: PadMode,
}

impl ConvSpec {
    /// Stride-1 convolution that preserves spatial size.
    pub fn same(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            padding: kernel / 2,
            dilation: 1,
            bias: true,
            pad_mode: PadMode::Zero,
        }
    }

    /// Same-size dilated convolution: padding = dilation · (kernel − 1) / 2.
    pub fn dilated(kernel: usize, dilation: usize) -> Self {
        Self {
            padding: dilation * (kernel - 1) / 2,
            dilation,
            ..Self::same(kernel)
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn pad_mode(mut self, mode: PadMode) -> Self {
        self.pad_mode = mode;
        self
    }
}

pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new(p: &ParamPath, in_ch: usize, out_ch: usize, spec: ConvSpec) -> Result<Self> {
        let k = spec.kernel;
        let fan_in = in_ch * k * k;
        let weight = p.param("weight", &[out_ch, in_ch, k, k], Init::Kaiming { fan_in })?;
        let bias = if spec.bias {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Some(p.param("bias", &[out_ch], Init::Uniform { bound })?)
        } else {
            None
        };
        Ok(Self { weight, bias, spec })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = &self.spec;
        let c_in = x.dim(1)?;
        if c_in != self.in_channels() {
            return Err(Error::Config(format!(
                "convolution expects {} input channels, got {c_in}",
                self.in_channels()
            )));
        }
        let y = match s.pad_mode {
            PadMode::Zero => conv2d(x, &self.weight, s.stride, s.padding, s.dilation)?,
            PadMode::Reflect => conv2d(&reflect_pad(x, s.padding)?, &self.weight, s.stride, 0, s.dilation)?,
        };
        add_channel_bias(&y, self.bias.as_ref())
    }
}

/// Kernel-2, stride-2 transposed convolution: doubles height and width.
pub struct ConvTranspose2d {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl ConvTranspose2d {
    pub fn new(p: &ParamPath, in_ch: usize, out_ch: usize) -> Result<Self> {
        let fan_in = in_ch;
        let weight = p.param("weight", &[in_ch, out_ch, 2, 2], Init::Kaiming { fan_in })?;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let bias = Some(p.param("bias", &[out_ch], Init::Uniform { bound })?);
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv_transpose2x2(x, &self.weight)?;
        add_channel_bias(&y, self.bias.as_ref())
    }
}

pub struct BatchNorm2d {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub const EPS: f64 = 1e-5;

    pub fn new(p: &ParamPath, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: p.param("weight", &[channels], Init::Const(1.0))?,
            beta: p.param("bias", &[channels], Init::Const(0.0))?,
            running_mean: p.buffer("running_mean", &[channels], Init::Const(0.0))?,
            running_var: p.buffer("running_var", &[channels], Init::Const(1.0))?,
            eps: Self::EPS,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let per_channel = [1, c, 1, 1];
        let gamma = self.gamma.as_tensor().reshape(&per_channel[..])?;
        let beta = self.beta.as_tensor().reshape(&per_channel[..])?;
        if mode.is_train() {
            let count = n * h * w;
            let mean = (broadcast::sum_to(x, &per_channel)? / count as f64)?;
            let centered = broadcast::add(x, &mean.neg()?)?;
            let var = (broadcast::sum_to(&centered.sqr()?, &per_channel)? / count as f64)?;
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.detach().flatten_all()? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                + (var.detach().flatten_all()? * (m * unbias))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            let scale = (gamma * (var + self.eps)?.sqrt()?.recip()?)?;
            broadcast::add(&broadcast::mul(&centered, &scale)?, &beta)
        } else {
            let mean = self.running_mean.as_tensor().reshape(&per_channel[..])?;
            let var = self.running_var.as_tensor().reshape(&per_channel[..])?;
            let scale = (gamma * (var + self.eps)?.sqrt()?.recip()?)?;
            let centered = broadcast::add(x, &mean.neg()?)?;
            broadcast::add(&broadcast::mul(&centered, &scale)?, &beta)
        }
    }
}

/// Convolution (no bias) → batch norm → ReLU.
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(p: &ParamPath, in_ch: usize, out_ch: usize, spec: ConvSpec) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&p.pp("conv"), in_ch, out_ch, spec.no_bias())?,
            bn: BatchNorm2d::new(&p.pp("bn"), out_ch)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, mode)?.relu()?)
    }
}

/// Fully connected layer over the last dimension of a (batch, features) tensor.
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(p: &ParamPath, in_features: usize, out_features: usize) -> Result<Self> {
        let bound = 1.0 / (in_features as f64).sqrt();
        Ok(Self {
            weight: p.param(
                "weight",
                &[out_features, in_features],
                Init::Kaiming {
                    fan_in: in_features,
                },
            )?,
            bias: p.param("bias", &[out_features], Init::Uniform { bound })?,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Index of `i` (which may lie outside `0..n`) under mirror reflection
/// without repeating the edge sample.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

fn reflect_indices(n: usize, before: usize, after: usize, device: &Device) -> Result<Tensor> {
    let idx: Vec<u32> = (-(before as isize)..(n + after) as isize)
        .map(|i| reflect_index(i, n) as u32)
        .collect();
    Ok(Tensor::from_vec(idx, n + before + after, device)?)
}

/// Reflect-pad height and width by `pad` on every side.
pub fn reflect_pad(x: &Tensor, pad: usize) -> Result<Tensor> {
    reflect_pad_sides(x, pad, pad, pad, pad)
}

/// Reflect-pad with independent amounts per side.
pub fn reflect_pad_sides(
    x: &Tensor,
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
) -> Result<Tensor> {
    if top + bottom + left + right == 0 {
        return Ok(x.clone());
    }
    let (_, _, h, w) = x.dims4()?;
    let rows = reflect_indices(h, top, bottom, x.device())?;
    let cols = reflect_indices(w, left, right, x.device())?;
    Ok(x.index_select(&rows, 2)?.index_select(&cols, 3)?)
}

/// Keep every other row and column starting at index 0. Height and width must be even.
fn subsample2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let y = x
        .reshape((n, c, h / 2, 2, w / 2, 2))?
        .narrow(3, 0, 1)?
        .narrow(5, 0, 1)?;
    Ok(y.reshape((n, c, h / 2, w / 2))?)
}

/// 3×3 max pool, stride 2, padding 1 (ResNet stem pool). Height and width must be even.
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "stride-2 max pool needs even spatial dims, got {h}x{w}"
        )));
    }
    let fill = |shape: (usize, usize, usize, usize)| -> Result<Tensor> {
        Ok(Tensor::full(f32::NEG_INFINITY, shape, x.device())?.to_dtype(x.dtype())?)
    };
    // Pad one row/col on top/left and one on bottom/right with -inf.
    let padded = Tensor::cat(&[&fill((n, c, 1, w))?, x, &fill((n, c, 1, w))?], 2)?;
    let padded = Tensor::cat(
        &[&fill((n, c, h + 2, 1))?, &padded, &fill((n, c, h + 2, 1))?],
        3,
    )?;
    let mut out: Option<Tensor> = None;
    for dy in 0..3 {
        for dx in 0..3 {
            let win = subsample2(&padded.narrow(2, dy, h)?.narrow(3, dx, w)?)?;
            out = Some(match out {
                None => win,
                Some(acc) => acc.maximum(&win)?,
            });
        }
    }
    Ok(out.expect("nine windows"))
}

/// Per-channel spatial mean, shape (batch, channels).
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

/// Per-channel spatial max, shape (batch, channels).
pub fn global_max_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, _, _) = x.dims4()?;
    Ok(max_keepdim(&x.flatten_from(2)?, 2)?.reshape((n, c))?)
}

/// Max over `dim`, kept as size 1. Tied maxima share the gradient equally,
/// so a broadcast-constant input gets the derivative of its source.
pub fn max_keepdim(x: &Tensor, dim: usize) -> Result<Tensor> {
    let m = x.detach().max_keepdim(dim)?;
    let hit = x.detach().broadcast_eq(&m)?.to_dtype(x.dtype())?;
    let share = hit.broadcast_div(&hit.sum_keepdim(dim)?)?;
    Ok((x.broadcast_sub(&m)? * share)?.sum_keepdim(dim)?.broadcast_add(&m)?)
}

/// Nearest-neighbour ×2 upsample built from broadcast + reshape so that the
/// backward pass is plain summation.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let y = x
        .reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .contiguous()?;
    Ok(y.reshape((n, c, 2 * h, 2 * w))?)
}

/// Bilinear ×2 upsample with half-pixel centres and edge clamping.
pub fn upsample_bilinear2x(x: &Tensor) -> Result<Tensor> {
    let y = bilinear2x_along(x, 2)?;
    bilinear2x_along(&y, 3)
}

fn bilinear2x_along(x: &Tensor, dim: usize) -> Result<Tensor> {
    let n = x.dim(dim)?;
    let prev = if n > 1 {
        Tensor::cat(&[&x.narrow(dim, 0, 1)?, &x.narrow(dim, 0, n - 1)?], dim)?
    } else {
        x.clone()
    };
    let next = if n > 1 {
        Tensor::cat(&[&x.narrow(dim, 1, n - 1)?, &x.narrow(dim, n - 1, 1)?], dim)?
    } else {
        x.clone()
    };
    let even = ((x * 0.75)? + (prev * 0.25)?)?;
    let odd = ((x * 0.75)? + (next * 0.25)?)?;
    // Interleave along `dim`.
    let stacked = Tensor::stack(&[&even, &odd], dim + 1)?;
    let mut dims = x.dims().to_vec();
    dims[dim] *= 2;
    Ok(stacked.reshape(dims)?)
}

/// Returns an error naming the first non-finite value position class.
pub fn ensure_finite(x: &Tensor, what: &str) -> Result<()> {
    let s = x
        .to_dtype(DType::F64)?
        .abs()?
        .flatten_all()?
        .max(0)?
        .to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} contains NaN or Inf")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(values: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(values.to_vec(), shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-5, 1), 0);
    }

    #[test]
    fn max_pool_matches_window_max() {
        let vals: Vec<f64> = (0..16).map(|v| ((v * 7) % 16) as f64).collect();
        let x = t(&vals, &[1, 1, 4, 4]);
        let y = max_pool_3x3_s2(&x).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 2]);
        let got = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let at = |r: isize, c: isize| -> f64 {
            if (0..4).contains(&r) && (0..4).contains(&c) {
                vals[(r * 4 + c) as usize]
            } else {
                f64::NEG_INFINITY
            }
        };
        for oy in 0..2 {
            for ox in 0..2 {
                let mut m = f64::NEG_INFINITY;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        m = m.max(at(2 * oy + dy, 2 * ox + dx));
                    }
                }
                assert_eq!(got[(oy * 2 + ox) as usize], m);
            }
        }
    }

    #[test]
    fn nearest_upsample_replicates() {
        let x = t(&[1., 2., 3., 4.], &[1, 1, 2, 2]);
        let y = upsample_nearest2x(&x).unwrap();
        assert_eq!(
            y.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            vec![1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn bilinear_upsample_of_ramp() {
        let x = t(&[0., 1., 2.], &[1, 1, 1, 3]);
        let y = bilinear2x_along(&x, 3).unwrap();
        assert_eq!(
            y.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            vec![0., 0.25, 0.75, 1.25, 1.75, 2.]
        );
    }

    #[test]
    fn reflect_pad_sizes() {
        let x = Tensor::zeros((1, 2, 3, 5), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(reflect_pad(&x, 3).unwrap().dims(), &[1, 2, 9, 11]);
        assert_eq!(
            reflect_pad_sides(&x, 0, 1, 0, 3).unwrap().dims(),
            &[1, 2, 4, 8]
        );
    }

    #[test]
    fn duplicate_names_rejected() {
        let store = ParamStore::new(0, DType::F64, &Device::Cpu);
        let root = store.root();
        root.param("a", &[2], Init::Const(0.0)).unwrap();
        assert!(root.param("a", &[2], Init::Const(0.0)).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let make = |seed| {
            let s = ParamStore::new(seed, DType::F64, &Device::Cpu);
            let v = s
                .root()
                .param("w", &[16], Init::Kaiming { fan_in: 4 })
                .unwrap();
            v.as_tensor().to_vec1::<f64>().unwrap()
        };
        assert_eq!(make(3), make(3));
        assert_ne!(make(3), make(4));
    }

    #[test]
    fn batch_norm_train_normalises() {
        let store = ParamStore::new(0, DType::F64, &Device::Cpu);
        let bn = BatchNorm2d::new(&store.root(), 1).unwrap();
        let x = t(&[1., 2., 3., 4.], &[1, 1, 2, 2]);
        let y = bn.forward(&x, Mode::Train).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        // running mean moved 10% of the way to 2.5
        let rm = bn.running_mean.as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((rm - 0.25).abs() < 1e-12);
    }
}
