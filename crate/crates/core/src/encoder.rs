//! ResNet-style encoder with five stride-2 reductions.
//!
//! Stage outputs (strides 2, 4, 8, 16, 32):
//! 1. stem conv 7×7/2 + BN + ReLU
//! 2. 3×3/2 max pool + `layer1`
//! 3. `layer2` (first block strided)
//! 4. `layer3`
//! 5. `layer4`
//!
//! Parameter names follow the usual torchvision layout (`conv1`, `bn1`,
//! `layerN.i.convK`, `layerN.i.downsample.{0,1}`) so converted ImageNet
//! checkpoints load by name.

use std::path::PathBuf;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    max_pool_3x3_s2, BatchNorm2d, Conv2d, ConvSpec, FeatureMap, Mode, ParamPath,
};

/// Input height and width must be a multiple of this.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DepthPreset {
    /// Bottleneck blocks, depths [3, 4, 6, 3], stage widths 64/256/512/1024/2048.
    #[default]
    Resnet50,
    /// Basic blocks, one per stage, stage widths 64/64/128/256/512.
    Small,
}

impl std::str::FromStr for DepthPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet50" | "resnet50-like" | "resnet50_like" => Ok(DepthPreset::Resnet50),
            "small" => Ok(DepthPreset::Small),
            other => Err(Error::Config(format!(
                "unknown depth preset `{other}` (expected resnet50 | small)"
            ))),
        }
    }
}

impl DepthPreset {
    fn blocks(self) -> [usize; 4] {
        match self {
            DepthPreset::Resnet50 => [3, 4, 6, 3],
            DepthPreset::Small => [1, 1, 1, 1],
        }
    }

    /// Unscaled output channels of the five stages.
    pub fn base_channels(self) -> [usize; 5] {
        match self {
            DepthPreset::Resnet50 => [64, 256, 512, 1024, 2048],
            DepthPreset::Small => [64, 64, 128, 256, 512],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depth: DepthPreset,
    pub width_multiplier: f64,
    pub pretrained: Option<PathBuf>,
    /// Keep batch-norm layers of the encoder in inference mode while training.
    pub freeze_bn: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: DepthPreset::Resnet50,
            width_multiplier: 1.0,
            pretrained: None,
            freeze_bn: false,
        }
    }
}

impl EncoderConfig {
    pub fn small(width_multiplier: f64) -> Self {
        Self {
            depth: DepthPreset::Small,
            width_multiplier,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(Error::Config(format!(
                "width multiplier must be positive, got {}",
                self.width_multiplier
            )));
        }
        Ok(())
    }

    pub fn scale(&self, channels: usize) -> usize {
        scale_width(channels, self.width_multiplier)
    }

    /// Output channel count of each of the five stages.
    pub fn stage_channels(&self) -> [usize; 5] {
        self.depth.base_channels().map(|c| self.scale(c))
    }
}

pub(crate) fn scale_width(channels: usize, multiplier: f64) -> usize {
    ((channels as f64 * multiplier).round() as usize).max(1)
}

/// The five stage outputs, ordered by increasing stride.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub stages: Vec<FeatureMap>,
}

impl FeaturePyramid {
    /// Stage `k` in 1..=5 (stride 2^k).
    pub fn stage(&self, k: usize) -> &FeatureMap {
        &self.stages[k - 1]
    }

    /// Stride-32 output feeding the attention module.
    pub fn deepest(&self) -> &FeatureMap {
        self.stage(5)
    }

    pub fn spatial_sizes(&self) -> Vec<(usize, usize)> {
        self.stages
            .iter()
            .map(|s| (s.dims()[2], s.dims()[3]))
            .collect()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.dims()[1]).collect()
    }
}

struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new(
        p: &ParamPath,
        conv_name: &str,
        bn_name: &str,
        in_ch: usize,
        out_ch: usize,
        spec: ConvSpec,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&p.pp(conv_name), in_ch, out_ch, spec.no_bias())?,
            bn: BatchNorm2d::new(&p.pp(bn_name), out_ch)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?, mode)
    }
}

fn conv3x3(stride: usize) -> ConvSpec {
    ConvSpec::same(3).stride(stride)
}

fn conv1x1(stride: usize) -> ConvSpec {
    ConvSpec::same(1).stride(stride)
}

enum Block {
    Basic {
        c1: ConvBn,
        c2: ConvBn,
        down: Option<ConvBn>,
    },
    Bottleneck {
        c1: ConvBn,
        c2: ConvBn,
        c3: ConvBn,
        down: Option<ConvBn>,
    },
}

impl Block {
    fn basic(p: &ParamPath, in_ch: usize, out_ch: usize, stride: usize) -> Result<Self> {
        let down = if stride != 1 || in_ch != out_ch {
            Some(ConvBn::new(p, "downsample.0", "downsample.1", in_ch, out_ch, conv1x1(stride))?)
        } else {
            None
        };
        Ok(Block::Basic {
            c1: ConvBn::new(p, "conv1", "bn1", in_ch, out_ch, conv3x3(stride))?,
            c2: ConvBn::new(p, "conv2", "bn2", out_ch, out_ch, conv3x3(1))?,
            down,
        })
    }

    fn bottleneck(
        p: &ParamPath,
        in_ch: usize,
        mid: usize,
        out_ch: usize,
        stride: usize,
    ) -> Result<Self> {
        let down = if stride != 1 || in_ch != out_ch {
            Some(ConvBn::new(p, "downsample.0", "downsample.1", in_ch, out_ch, conv1x1(stride))?)
        } else {
            None
        };
        Ok(Block::Bottleneck {
            c1: ConvBn::new(p, "conv1", "bn1", in_ch, mid, conv1x1(1))?,
            c2: ConvBn::new(p, "conv2", "bn2", mid, mid, conv3x3(stride))?,
            c3: ConvBn::new(p, "conv3", "bn3", mid, out_ch, conv1x1(1))?,
            down,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (body, down) = match self {
            Block::Basic { c1, c2, down } => {
                let y = c1.forward(x, mode)?.relu()?;
                (c2.forward(&y, mode)?, down)
            }
            Block::Bottleneck { c1, c2, c3, down } => {
                let y = c1.forward(x, mode)?.relu()?;
                let y = c2.forward(&y, mode)?.relu()?;
                (c3.forward(&y, mode)?, down)
            }
        };
        let shortcut = match down {
            Some(d) => d.forward(x, mode)?,
            None => x.clone(),
        };
        Ok((body + shortcut)?.relu()?)
    }
}

pub struct Encoder {
    stem: ConvBn,
    layers: Vec<Vec<Block>>,
    cfg: EncoderConfig,
}

impl Encoder {
    pub fn new(p: &ParamPath, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.stage_channels();
        let stem = ConvBn::new(p, "conv1", "bn1", 3, ch[0], ConvSpec::same(7).stride(2))?;
        let mut layers = Vec::with_capacity(4);
        let mut in_ch = ch[0];
        for (li, &n_blocks) in cfg.depth.blocks().iter().enumerate() {
            let out_ch = ch[li + 1];
            let mut blocks = Vec::with_capacity(n_blocks);
            for bi in 0..n_blocks {
                let stride = if li > 0 && bi == 0 { 2 } else { 1 };
                let bp = p.pp(format!("layer{}.{bi}", li + 1));
                let block = match cfg.depth {
                    DepthPreset::Small => Block::basic(&bp, in_ch, out_ch, stride)?,
                    DepthPreset::Resnet50 => {
                        let mid = cfg.scale(64 << li);
                        Block::bottleneck(&bp, in_ch, mid, out_ch, stride)?
                    }
                };
                blocks.push(block);
                in_ch = out_ch;
            }
            layers.push(blocks);
        }
        Ok(Self {
            stem,
            layers,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn encode(&self, image: &FeatureMap, mode: Mode) -> Result<FeaturePyramid> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!(
                "encoder expects a 3-channel image, got {c} channels"
            )));
        }
        if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            return Err(Error::Shape(format!(
                "image size {h}x{w} must be a nonzero multiple of {INPUT_MULTIPLE} in both dimensions"
            )));
        }
        let mode = if self.cfg.freeze_bn { Mode::Eval } else { mode };
        let mut stages = Vec::with_capacity(5);
        let s1 = self.stem.forward(image, mode)?.relu()?;
        let mut x = max_pool_3x3_s2(&s1)?;
        stages.push(s1);
        for layer in &self.layers {
            for block in layer {
                x = block.forward(&x, mode)?;
            }
            stages.push(x.clone());
        }
        Ok(FeaturePyramid { stages })
    }
}
