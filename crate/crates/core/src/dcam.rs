//! Dilated convolution attention module.
//!
//! One cascade of same-size dilated 3×3 conv-BN-ReLU layers (rates 1, 2, 4 by
//! default). Each cascade tap is one branch; a fourth branch carries a global
//! average-pooled, image-level descriptor. Every branch goes through its own
//! CBAM, the branches are concatenated and a 1×1 convolution maps them back to
//! the input channel count.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::attention::{Cbam, CbamConfig};
use crate::error::{Error, Result};
use crate::nn::{Activation, Conv2d, ConvBnRelu, ConvSpec, FeatureMap, Mode, ParamPath};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcamConfig {
    /// Input and output channel count.
    pub channels: usize,
    pub dilation_rates: Vec<usize>,
    pub kernel_size: usize,
    pub cbam: CbamConfig,
    /// Nonlinearity after the 1×1 convolution of the pooling branch.
    pub gap_activation: Activation,
}

impl DcamConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            dilation_rates: vec![1, 2, 4],
            kernel_size: 3,
            cbam: CbamConfig::default(),
            gap_activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("DCAM channel count must be ≥ 1".into()));
        }
        if self.dilation_rates.is_empty() {
            return Err(Error::Config("DCAM needs at least one dilation rate".into()));
        }
        if self.dilation_rates[0] == 0 || self.dilation_rates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "dilation rates must be positive and strictly increasing, got {:?}",
                self.dilation_rates
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "DCAM kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// Receptive field of each cascade tap.
    pub fn tap_receptive_fields(&self) -> Result<Vec<usize>> {
        (1..=self.dilation_rates.len())
            .map(|k| branch_receptive_field(&self.dilation_rates[..k], self.kernel_size))
            .collect()
    }
}

/// Receptive field of a cascade of stride-1 dilated convolutions:
/// `1 + (kernel − 1) · Σ rates`.
pub fn branch_receptive_field(rates: &[usize], kernel_size: usize) -> Result<usize> {
    if kernel_size % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "kernel size must be odd, got {kernel_size}"
        )));
    }
    Ok(1 + (kernel_size - 1) * rates.iter().sum::<usize>())
}

/// Image-level branch: spatial mean → 1×1 conv → activation → broadcast.
pub struct GapBranch {
    pub conv: Conv2d,
    activation: Activation,
}

impl GapBranch {
    pub fn new(p: &ParamPath, channels: usize, activation: Activation) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&p.pp("conv"), channels, channels, ConvSpec::same(1))?,
            activation,
        })
    }

    pub fn forward(&self, f: &FeatureMap) -> Result<FeatureMap> {
        let pooled = f.mean_keepdim(2)?.mean_keepdim(3)?;
        let y = self.activation.apply(&self.conv.forward(&pooled)?)?;
        Ok(y.broadcast_as(f.shape())?.contiguous()?)
    }
}

pub struct Dcam {
    pub cascade: Vec<ConvBnRelu>,
    pub attention: Vec<Cbam>,
    pub gap: GapBranch,
    pub reduce: Conv2d,
    channels: usize,
}

impl Dcam {
    pub fn new(p: &ParamPath, cfg: &DcamConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let cascade = cfg
            .dilation_rates
            .iter()
            .enumerate()
            .map(|(i, &rate)| {
                ConvBnRelu::new(
                    &p.pp(format!("cascade.{i}")),
                    c,
                    c,
                    ConvSpec::dilated(cfg.kernel_size, rate),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let branches = cfg.dilation_rates.len() + 1;
        let attention = (0..branches)
            .map(|i| Cbam::new(&p.pp(format!("attention.{i}")), c, &cfg.cbam))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cascade,
            attention,
            gap: GapBranch::new(&p.pp("gap"), c, cfg.gap_activation)?,
            reduce: Conv2d::new(&p.pp("reduce"), branches * c, c, ConvSpec::same(1))?,
            channels: c,
        })
    }

    pub fn forward(&self, f: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        let c = f.dim(1)?;
        if c != self.channels {
            return Err(Error::Config(format!(
                "DCAM configured for {} channels, input has {c}",
                self.channels
            )));
        }
        let mut branches = Vec::with_capacity(self.attention.len());
        let mut tap = f.clone();
        for (conv, attn) in self.cascade.iter().zip(&self.attention) {
            tap = conv.forward(&tap, mode)?;
            branches.push(attn.forward(&tap)?);
        }
        let gap = self.gap.forward(f)?;
        branches.push(self.attention[self.cascade.len()].forward(&gap)?);
        self.reduce.forward(&Tensor::cat(&branches, 1)?)
    }
}
