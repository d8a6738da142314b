//! Convolutional block attention: a channel gate followed by a spatial gate.
//!
//! Channel gate: `M_C(F) = σ(MLP(avgpool(F)) + MLP(maxpool(F)))` with one
//! two-layer MLP shared by both pooled descriptors.
//! Spatial gate: `M_S(F) = σ(conv7x7([mean_c(F); max_c(F)]))`.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::broadcast;
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_max_pool, max_keepdim, sigmoid, Activation, Conv2d, ConvSpec, FeatureMap, Linear,
    PadMode, ParamPath,
};

pub const SPATIAL_KERNEL: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CbamConfig {
    /// MLP reduction ratio r: hidden width is `max(1, channels / r)`.
    pub reduction: usize,
    /// Nonlinearity between the two MLP layers.
    pub activation: Activation,
    pub spatial_padding: PadMode,
}

impl Default for CbamConfig {
    fn default() -> Self {
        Self {
            reduction: 16,
            activation: Activation::Relu,
            spatial_padding: PadMode::Zero,
        }
    }
}

impl CbamConfig {
    pub fn hidden_width(&self, channels: usize) -> usize {
        (channels / self.reduction.max(1)).max(1)
    }
}

pub struct Cbam {
    pub fc1: Linear,
    pub fc2: Linear,
    pub spatial: Conv2d,
    activation: Activation,
}

impl Cbam {
    pub fn new(p: &ParamPath, channels: usize, cfg: &CbamConfig) -> Result<Self> {
        if cfg.reduction == 0 {
            return Err(Error::Config("CBAM reduction ratio must be ≥ 1".into()));
        }
        let hidden = cfg.hidden_width(channels);
        let spec = ConvSpec::same(SPATIAL_KERNEL).pad_mode(cfg.spatial_padding);
        Ok(Self {
            fc1: Linear::new(&p.pp("mlp.fc1"), channels, hidden)?,
            fc2: Linear::new(&p.pp("mlp.fc2"), hidden, channels)?,
            spatial: Conv2d::new(&p.pp("spatial"), 2, 1, spec)?,
            activation: cfg.activation,
        })
    }

    pub fn channels(&self) -> usize {
        self.fc1.in_features()
    }

    fn mlp(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.activation.apply(&self.fc1.forward(x)?)?;
        self.fc2.forward(&h)
    }

    fn check(&self, f: &FeatureMap) -> Result<()> {
        let (_, c, h, w) = f.dims4()?;
        if h == 0 || w == 0 {
            return Err(Error::InvalidInput(format!(
                "attention input has empty spatial extent {h}x{w}"
            )));
        }
        if c != self.channels() {
            return Err(Error::Config(format!(
                "attention block built for {} channels, input has {c}",
                self.channels()
            )));
        }
        Ok(())
    }

    /// Per-channel weights, shape (batch, channels), each in (0, 1).
    pub fn channel_attention(&self, f: &FeatureMap) -> Result<Tensor> {
        self.check(f)?;
        let avg = self.mlp(&global_avg_pool(f)?)?;
        let max = self.mlp(&global_max_pool(f)?)?;
        sigmoid(&(avg + max)?)
    }

    /// Spatial weights, shape (batch, 1, height, width), each in (0, 1).
    pub fn spatial_attention(&self, f: &FeatureMap) -> Result<Tensor> {
        self.check(f)?;
        let avg = f.mean_keepdim(1)?;
        let max = max_keepdim(f, 1)?;
        let stacked = Tensor::cat(&[&avg, &max], 1)?;
        sigmoid(&self.spatial.forward(&stacked)?)
    }

    /// Channel gate then spatial gate; output has the input's shape.
    pub fn forward(&self, f: &FeatureMap) -> Result<FeatureMap> {
        let mc = self.channel_attention(f)?;
        let refined = broadcast::mul(f, &mc.unsqueeze(D::Minus1)?.unsqueeze(D::Minus1)?)?;
        let ms = self.spatial_attention(&refined)?;
        broadcast::mul(&refined, &ms)
    }
}
