//! The two decoders and the fusion head.
//!
//! * The large decoder starts from the attention-module output (stride 32) and
//!   climbs four ×2 stages, merging encoder stages 4, 3, 2, 1 by concatenation
//!   followed by a 3×3 conv-BN-ReLU. It ends at stride 2.
//! * The small decoder lifts the stride-8 encoder stage by two ×2 stages, also
//!   ending at stride 2.
//! * The head concatenates both, mixes them with a 1×1 conv-BN-ReLU into the
//!   fused map, upsamples once more and emits one logit channel at input
//!   resolution.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{
    upsample_bilinear2x, BatchNorm2d, Conv2d, ConvBnRelu, ConvSpec, ConvTranspose2d, FeatureMap,
    Mode, ParamPath,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    /// 2×2 stride-2 transposed convolution.
    #[default]
    Transposed,
    /// Fixed bilinear ×2 followed by a learned 3×3 convolution.
    BilinearConv,
}

impl std::str::FromStr for UpsampleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transposed" | "transposed-conv" | "transposed_conv" => Ok(UpsampleMode::Transposed),
            "bilinear" | "bilinear+conv" | "bilinear_conv" => Ok(UpsampleMode::BilinearConv),
            other => Err(Error::Config(format!(
                "unknown upsample mode `{other}` (expected transposed | bilinear)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Output widths of the large decoder's stages at strides 16, 8, 4, 2.
    pub large_widths: [usize; 4],
    /// Output widths of the small decoder's stages at strides 4, 2.
    pub small_widths: [usize; 2],
    pub fused_channels: usize,
    /// Width of the final ×2 upsample in the head.
    pub head_channels: usize,
    pub upsample: UpsampleMode,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::scaled(1.0)
    }
}

impl DecoderConfig {
    /// Widths halve per up-stage; every count scales with `width`.
    pub fn scaled(width: f64) -> Self {
        let s = |c| crate::encoder::scale_width(c, width);
        Self {
            large_widths: [s(512), s(256), s(128), s(64)],
            small_widths: [s(128), s(64)],
            fused_channels: s(256),
            head_channels: s(64),
            upsample: UpsampleMode::Transposed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .large_widths
            .iter()
            .chain(&self.small_widths)
            .chain([&self.fused_channels, &self.head_channels]);
        if all.into_iter().any(|&c| c == 0) {
            return Err(Error::Config("decoder widths must be ≥ 1".into()));
        }
        Ok(())
    }
}

pub enum Upsampler {
    Transposed(ConvTranspose2d),
    BilinearConv(Conv2d),
}

impl Upsampler {
    pub fn new(p: &ParamPath, in_ch: usize, out_ch: usize, mode: UpsampleMode) -> Result<Self> {
        Ok(match mode {
            UpsampleMode::Transposed => Upsampler::Transposed(ConvTranspose2d::new(p, in_ch, out_ch)?),
            UpsampleMode::BilinearConv => {
                Upsampler::BilinearConv(Conv2d::new(p, in_ch, out_ch, ConvSpec::same(3))?)
            }
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Upsampler::Transposed(t) => t.forward(x),
            Upsampler::BilinearConv(c) => c.forward(&upsample_bilinear2x(x)?),
        }
    }
}

fn spatial(x: &Tensor) -> Result<(usize, usize)> {
    let (_, _, h, w) = x.dims4()?;
    Ok((h, w))
}

pub struct UpStage {
    pub up: Upsampler,
    pub merge: ConvBnRelu,
}

impl UpStage {
    fn new(
        p: &ParamPath,
        in_ch: usize,
        skip_ch: usize,
        out_ch: usize,
        mode: UpsampleMode,
    ) -> Result<Self> {
        Ok(Self {
            up: Upsampler::new(&p.pp("up"), in_ch, out_ch, mode)?,
            merge: ConvBnRelu::new(&p.pp("merge"), out_ch + skip_ch, out_ch, ConvSpec::same(3))?,
        })
    }

    fn forward(&self, x: &Tensor, skip: Option<&Tensor>, mode: Mode) -> Result<Tensor> {
        let up = self.up.forward(x)?.relu()?;
        let merged = match skip {
            Some(s) => Tensor::cat(&[&up, s], 1)?,
            None => up,
        };
        self.merge.forward(&merged, mode)
    }
}

pub struct LargeDecoder {
    pub stages: Vec<UpStage>,
    in_channels: usize,
}

impl LargeDecoder {
    /// `stage_channels` are the encoder's five stage widths.
    pub fn new(p: &ParamPath, stage_channels: [usize; 5], cfg: &DecoderConfig) -> Result<Self> {
        let mut in_ch = stage_channels[4];
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let skip_ch = stage_channels[3 - i];
            let out_ch = cfg.large_widths[i];
            stages.push(UpStage::new(&p.pp(format!("stage.{i}")), in_ch, skip_ch, out_ch, cfg.upsample)?);
            in_ch = out_ch;
        }
        Ok(Self {
            stages,
            in_channels: stage_channels[4],
        })
    }

    pub fn out_channels(&self) -> usize {
        self.stages[3].merge.bn.gamma.dim(0).unwrap_or(0)
    }

    pub fn forward(
        &self,
        pyramid: &FeaturePyramid,
        deep: &FeatureMap,
        mode: Mode,
    ) -> Result<FeatureMap> {
        if deep.dims() != pyramid.deepest().dims() {
            return Err(Error::Shape(format!(
                "large decoder input {:?} does not match encoder stage 5 {:?}",
                deep.dims(),
                pyramid.deepest().dims()
            )));
        }
        if deep.dim(1)? != self.in_channels {
            return Err(Error::Config(format!(
                "large decoder built for {} input channels, got {}",
                self.in_channels,
                deep.dim(1)?
            )));
        }
        let mut x = deep.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            let k = 4 - i;
            let skip = pyramid.stage(k);
            let (h, w) = spatial(&x)?;
            if spatial(skip)? != (2 * h, 2 * w) {
                return Err(Error::Shape(format!(
                    "encoder stage {k} is {:?}, expected {}x{} to merge after upsampling",
                    spatial(skip)?,
                    2 * h,
                    2 * w
                )));
            }
            x = stage.forward(&x, Some(skip), mode)?;
        }
        Ok(x)
    }
}

pub struct SmallDecoder {
    pub stages: Vec<UpStage>,
    in_channels: usize,
    out_channels: usize,
}

impl SmallDecoder {
    pub fn new(p: &ParamPath, in_channels: usize, cfg: &DecoderConfig) -> Result<Self> {
        let mut in_ch = in_channels;
        let mut stages = Vec::with_capacity(2);
        for (i, &out_ch) in cfg.small_widths.iter().enumerate() {
            stages.push(UpStage::new(&p.pp(format!("stage.{i}")), in_ch, 0, out_ch, cfg.upsample)?);
            in_ch = out_ch;
        }
        Ok(Self {
            stages,
            in_channels,
            out_channels: cfg.small_widths[1],
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Lifts the stride-8 stage of `pyramid` to stride 2.
    pub fn forward(&self, pyramid: &FeaturePyramid, mode: Mode) -> Result<FeatureMap> {
        let tap = pyramid.stage(3);
        let (h1, w1) = spatial(pyramid.stage(1))?;
        let (h3, w3) = spatial(tap)?;
        if (4 * h3, 4 * w3) != (h1, w1) {
            return Err(Error::Shape(format!(
                "small decoder needs the stride-8 stage ({}x{}), got {h3}x{w3}",
                h1 / 4,
                w1 / 4
            )));
        }
        self.forward_tap(tap, mode)
    }

    /// Two ×2 stages on a bare feature map: output spatial size is 4× the input.
    pub fn forward_tap(&self, tap: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        if tap.dim(1)? != self.in_channels {
            return Err(Error::Config(format!(
                "small decoder built for {} input channels, got {}",
                self.in_channels,
                tap.dim(1)?
            )));
        }
        let mut x = tap.clone();
        for stage in &self.stages {
            x = stage.forward(&x, None, mode)?;
        }
        Ok(x)
    }
}

/// Output of [`FuseHead::forward`].
pub struct HeadOutput {
    /// Fused features at stride 2, `fused_channels` wide.
    pub fused: FeatureMap,
    /// Single-channel logits at input resolution.
    pub logits: FeatureMap,
}

pub struct FuseHead {
    pub fuse: Conv2d,
    pub fuse_bn: BatchNorm2d,
    pub up: Upsampler,
    pub out: Conv2d,
    large_channels: usize,
    small_channels: usize,
}

impl FuseHead {
    /// `small_channels` is 0 when the model has no small decoder.
    pub fn new(
        p: &ParamPath,
        large_channels: usize,
        small_channels: usize,
        cfg: &DecoderConfig,
    ) -> Result<Self> {
        let in_ch = large_channels + small_channels;
        Ok(Self {
            fuse: Conv2d::new(&p.pp("fuse"), in_ch, cfg.fused_channels, ConvSpec::same(1).no_bias())?,
            fuse_bn: BatchNorm2d::new(&p.pp("fuse_bn"), cfg.fused_channels)?,
            up: Upsampler::new(&p.pp("up"), cfg.fused_channels, cfg.head_channels, cfg.upsample)?,
            out: Conv2d::new(&p.pp("out"), cfg.head_channels, 1, ConvSpec::same(3))?,
            large_channels,
            small_channels,
        })
    }

    pub fn forward(
        &self,
        large: &FeatureMap,
        small: Option<&FeatureMap>,
        mode: Mode,
    ) -> Result<HeadOutput> {
        let input = match (small, self.small_channels) {
            (Some(s), c) if c > 0 => {
                if spatial(s)? != spatial(large)? {
                    return Err(Error::Shape(format!(
                        "decoder outputs disagree spatially: large {:?}, small {:?}",
                        spatial(large)?,
                        spatial(s)?
                    )));
                }
                Tensor::cat(&[large, s], 1)?
            }
            (None, 0) => large.clone(),
            (Some(_), _) => {
                return Err(Error::Config(
                    "head built without a small-decoder input".into(),
                ))
            }
            (None, _) => {
                return Err(Error::Config("head expects small-decoder features".into()))
            }
        };
        let c = input.dim(1)?;
        if c != self.large_channels + self.small_channels {
            return Err(Error::Config(format!(
                "head expects {} input channels, got {c}",
                self.large_channels + self.small_channels
            )));
        }
        let fused = self.fuse_bn.forward(&self.fuse.forward(&input)?, mode)?.relu()?;
        let up = self.up.forward(&fused)?.relu()?;
        let logits = self.out.forward(&up)?;
        Ok(HeadOutput { fused, logits })
    }
}
