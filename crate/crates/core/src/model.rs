//! The assembled network: encoder → attention module → dual decoder → head.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::archive::{self, LoadReport};
use crate::attention::CbamConfig;
use crate::dcam::{Dcam, DcamConfig};
use crate::decoder::{DecoderConfig, FuseHead, LargeDecoder, SmallDecoder, UpsampleMode};
use crate::encoder::{Encoder, EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Activation, FeatureMap, Mode, ParamStore};

/// Full architecture description. Channel widths not overridden here follow
/// the encoder's width multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub dilation_rates: Vec<usize>,
    pub dcam_kernel_size: usize,
    pub cbam: CbamConfig,
    pub gap_activation: Activation,
    pub upsample: UpsampleMode,
    pub fused_channels: Option<usize>,
    pub head_channels: Option<usize>,
    pub use_dcam: bool,
    pub use_small_decoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            dilation_rates: vec![1, 2, 4],
            dcam_kernel_size: 3,
            cbam: CbamConfig::default(),
            gap_activation: Activation::Relu,
            upsample: UpsampleMode::Transposed,
            fused_channels: None,
            head_channels: None,
            use_dcam: true,
            use_small_decoder: true,
        }
    }
}

/// The three architectures compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// ResNet-encoder U-Net: no attention module, no small decoder.
    Baseline,
    WithDcam,
    WithDcamDualDecoder,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::WithDcam, Variant::WithDcamDualDecoder];

    pub fn flags(self) -> (bool, bool) {
        match self {
            Variant::Baseline => (false, false),
            Variant::WithDcam => (true, false),
            Variant::WithDcamDualDecoder => (true, true),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "U-Net",
            Variant::WithDcam => "U-Net + DCAM",
            Variant::WithDcamDualDecoder => "U-Net + DCAM + Dual Decoder",
        }
    }
}

impl ModelConfig {
    /// Small-preset model at the given width, used for desk-scale runs.
    pub fn small(width: f64) -> Self {
        Self {
            encoder: EncoderConfig::small(width),
            ..Default::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        let (dcam, small) = variant.flags();
        self.use_dcam = dcam;
        self.use_small_decoder = small;
        self
    }

    pub fn dcam_config(&self) -> DcamConfig {
        DcamConfig {
            channels: self.encoder.stage_channels()[4],
            dilation_rates: self.dilation_rates.clone(),
            kernel_size: self.dcam_kernel_size,
            cbam: self.cbam,
            gap_activation: self.gap_activation,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        let mut cfg = DecoderConfig::scaled(self.encoder.width_multiplier);
        cfg.upsample = self.upsample;
        if let Some(c) = self.fused_channels {
            cfg.fused_channels = c;
        }
        if let Some(c) = self.head_channels {
            cfg.head_channels = c;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.dcam_config().validate()?;
        self.decoder_config().validate()
    }
}

/// Intermediate maps of one forward pass.
pub struct ForwardTaps {
    pub pyramid: FeaturePyramid,
    pub dcam_out: FeatureMap,
    pub large: FeatureMap,
    pub small: Option<FeatureMap>,
    pub fused: FeatureMap,
    pub logits: FeatureMap,
}

pub struct DduNet {
    cfg: ModelConfig,
    store: ParamStore,
    pub encoder: Encoder,
    pub dcam: Option<Dcam>,
    pub large_decoder: LargeDecoder,
    pub small_decoder: Option<SmallDecoder>,
    pub head: FuseHead,
}

impl DduNet {
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(seed, dtype, device);
        let root = store.root();
        let stage_ch = cfg.encoder.stage_channels();
        let dec_cfg = cfg.decoder_config();
        let encoder = Encoder::new(&root.pp("encoder"), &cfg.encoder)?;
        let dcam = if cfg.use_dcam {
            Some(Dcam::new(&root.pp("dcam"), &cfg.dcam_config())?)
        } else {
            None
        };
        let large_decoder = LargeDecoder::new(&root.pp("large_decoder"), stage_ch, &dec_cfg)?;
        let small_decoder = if cfg.use_small_decoder {
            Some(SmallDecoder::new(&root.pp("small_decoder"), stage_ch[2], &dec_cfg)?)
        } else {
            None
        };
        let small_ch = small_decoder.as_ref().map_or(0, |s| s.out_channels());
        let head = FuseHead::new(&root.pp("head"), dec_cfg.large_widths[3], small_ch, &dec_cfg)?;
        let model = Self {
            cfg: cfg.clone(),
            store,
            encoder,
            dcam,
            large_decoder,
            small_decoder,
            head,
        };
        if let Some(path) = &cfg.encoder.pretrained {
            let report = model.load_pretrained_encoder(path)?;
            log::info!(
                "pretrained encoder: {} matched, {} missing, {} unused",
                report.matched.len(),
                report.missing.len(),
                report.unexpected.len()
            );
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn forward(&self, image: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        Ok(self.forward_taps(image, mode)?.logits)
    }

    pub fn forward_taps(&self, image: &FeatureMap, mode: Mode) -> Result<ForwardTaps> {
        let image = image.to_dtype(self.dtype())?;
        let pyramid = self.encoder.encode(&image, mode)?;
        let dcam_out = match &self.dcam {
            Some(d) => d.forward(pyramid.deepest(), mode)?,
            None => pyramid.deepest().clone(),
        };
        let large = self.large_decoder.forward(&pyramid, &dcam_out, mode)?;
        let small = match &self.small_decoder {
            Some(s) => Some(s.forward(&pyramid, mode)?),
            None => None,
        };
        let head = self.head.forward(&large, small.as_ref(), mode)?;
        Ok(ForwardTaps {
            pyramid,
            dcam_out,
            large,
            small,
            fused: head.fused,
            logits: head.logits,
        })
    }

    /// Copy matching tensors from a weight archive into the encoder.
    pub fn load_pretrained_encoder(&self, path: &std::path::Path) -> Result<LoadReport> {
        let targets: Vec<(String, candle_core::Var)> = self
            .store
            .all()
            .into_iter()
            .filter_map(|(n, v)| n.strip_prefix("encoder.").map(|s| (s.to_string(), v)))
            .collect();
        let tensors = archive::read(path)?
            .into_iter()
            .map(|(n, t)| (n.strip_prefix("encoder.").map(str::to_string).unwrap_or(n), t))
            .collect();
        archive::assign(&targets, tensors)
    }
}

/// Binary road mask: 1 where `sigmoid(logit) ≥ threshold` (ties are road).
pub fn predict_mask(logits: &Tensor, threshold: f64) -> Result<Tensor> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let dims = logits.dims();
    if dims.len() != 4 || dims[1] != 1 {
        return Err(Error::InvalidArgument(format!(
            "logits must be (batch, 1, H, W), got {dims:?}"
        )));
    }
    // sigmoid(z) ≥ t  ⇔  z ≥ logit(t); comparing in logit space keeps the tie exact.
    let cut = (threshold / (1.0 - threshold)).ln();
    let z = logits.to_dtype(DType::F64)?;
    Ok(z.ge(cut)?)
}

/// Road probabilities from logits.
pub fn probabilities(logits: &Tensor) -> Result<Tensor> {
    sigmoid(logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_threshold_rules() {
        let z = Tensor::from_vec(vec![-1.0f64, 0.0, 1.0], (1, 1, 1, 3), &Device::Cpu).unwrap();
        let m = predict_mask(&z, 0.5).unwrap();
        assert_eq!(m.flatten_all().unwrap().to_vec1::<u8>().unwrap(), vec![0, 1, 1]);
        let neg = Tensor::full(-10.0f64, (1, 1, 2, 2), &Device::Cpu).unwrap();
        let m = predict_mask(&neg, 0.5).unwrap();
        assert_eq!(m.sum_all().unwrap().to_dtype(DType::U32).unwrap().to_scalar::<u32>().unwrap(), 0);
        assert!(predict_mask(&z, 0.0).is_err());
        assert!(predict_mask(&z, 1.0).is_err());
    }

    #[test]
    fn variant_flags() {
        let base = ModelConfig::small(0.25);
        let a = base.clone().with_variant(Variant::Baseline);
        let b = base.clone().with_variant(Variant::WithDcam);
        assert!(!a.use_dcam && !a.use_small_decoder);
        assert!(b.use_dcam && !b.use_small_decoder);
        let c = base.with_variant(Variant::WithDcamDualDecoder);
        assert!(c.use_dcam && c.use_small_decoder);
    }

    #[test]
    fn end_to_end_shape_small() {
        let model = DduNet::new(&ModelConfig::small(0.25), 0, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::zeros((2, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(model.forward(&x, Mode::Train).unwrap().dims(), &[2, 1, 64, 64]);
    }
}
