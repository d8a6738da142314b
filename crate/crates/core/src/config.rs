//! Training configuration and its flat `key = value` file format.
//!
//! ```text
//! # comment
//! initial_lr = 0.001
//! model.depth = small
//! model.dilation_rates = 1,2,4
//! dataset = synthetic
//! ```
//!
//! Unknown keys are rejected. [`TrainConfig::to_flat`] writes every key, and
//! parsing its output reproduces the configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{SynthParams, DEFAULT_MASK_THRESHOLD};
use crate::encoder::DepthPreset;
use crate::error::{Error, Result};
use crate::loss::FocalConfig;
use crate::model::ModelConfig;
use crate::optim::AdamConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSpec {
    Synthetic,
    Directory(PathBuf),
}

impl Display for DatasetSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatasetSpec::Synthetic => f.write_str("synthetic"),
            DatasetSpec::Directory(p) => write!(f, "{}", p.display()),
        }
    }
}

impl FromStr for DatasetSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "synthetic" => DatasetSpec::Synthetic,
            "" => return Err(Error::Config("dataset must be `synthetic` or a path".into())),
            path => DatasetSpec::Directory(PathBuf::from(path)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> candle_core::DType {
        match self {
            Precision::F32 => candle_core::DType::F32,
            Precision::F64 => candle_core::DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    pub size: usize,
    pub params: SynthParams,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train_samples: 64,
            val_samples: 8,
            test_samples: 8,
            size: 128,
            params: SynthParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub poly_power: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional cap on optimisation steps; the schedule spans the capped length.
    pub max_steps: Option<usize>,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub grad_clip: Option<f64>,
    pub focal: FocalConfig,
    pub model: ModelConfig,
    pub seed: u64,
    pub precision: Precision,
    pub dataset: DatasetSpec,
    pub synthetic: SyntheticConfig,
    pub tile_size: usize,
    pub tile_stride: usize,
    pub mask_threshold: u8,
    pub augment: bool,
    /// Probability cut for binary masks during evaluation.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-3,
            poly_power: 0.9,
            adam: AdamConfig::default(),
            batch_size: 4,
            epochs: 50,
            max_steps: None,
            grad_clip: None,
            focal: FocalConfig::default(),
            model: ModelConfig::default(),
            seed: 0,
            precision: Precision::F32,
            dataset: DatasetSpec::Synthetic,
            synthetic: SyntheticConfig::default(),
            tile_size: 512,
            tile_stride: 484,
            mask_threshold: DEFAULT_MASK_THRESHOLD,
            augment: false,
            threshold: 0.5,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    match value {
        "none" | "" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn opt_str<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |v| v.to_string())
}

fn lower<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

impl TrainConfig {
    /// Desk-scale defaults: small encoder at the given width on synthetic data.
    pub fn desk(width: f64) -> Self {
        Self {
            model: ModelConfig::small(width),
            ..Default::default()
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "optimizer" => {
                if value != "adam" {
                    return Err(Error::Config(format!("unsupported optimizer `{value}`")));
                }
            }
            "schedule" => {
                if value != "poly" {
                    return Err(Error::Config(format!("unsupported schedule `{value}`")));
                }
            }
            "initial_lr" => self.initial_lr = parse(key, value)?,
            "poly_power" => self.poly_power = parse(key, value)?,
            "weight_decay" => self.adam.weight_decay = parse(key, value)?,
            "decoupled_weight_decay" => self.adam.decoupled_weight_decay = parse_bool(key, value)?,
            "adam.beta1" => self.adam.beta1 = parse(key, value)?,
            "adam.beta2" => self.adam.beta2 = parse(key, value)?,
            "adam.eps" => self.adam.eps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "max_steps" => self.max_steps = parse_opt(key, value)?,
            "grad_clip" => self.grad_clip = parse_opt(key, value)?,
            "focal.gamma" => self.focal.gamma = parse(key, value)?,
            "focal.probability_floor" => self.focal.probability_floor = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("bad precision `{value}`"))),
                }
            }
            "dataset" => self.dataset = value.parse()?,
            "synthetic.train_samples" => self.synthetic.train_samples = parse(key, value)?,
            "synthetic.val_samples" => self.synthetic.val_samples = parse(key, value)?,
            "synthetic.test_samples" => self.synthetic.test_samples = parse(key, value)?,
            "synthetic.size" => self.synthetic.size = parse(key, value)?,
            "synthetic.min_roads" => self.synthetic.params.min_roads = parse(key, value)?,
            "synthetic.max_roads" => self.synthetic.params.max_roads = parse(key, value)?,
            "synthetic.min_width" => self.synthetic.params.min_width = parse(key, value)?,
            "synthetic.max_width" => self.synthetic.params.max_width = parse(key, value)?,
            "synthetic.max_road_fraction" => {
                self.synthetic.params.max_road_fraction = parse(key, value)?
            }
            "synthetic.occlusion_probability" => {
                self.synthetic.params.occlusion_probability = parse(key, value)?
            }
            "synthetic.max_occluders" => self.synthetic.params.max_occluders = parse(key, value)?,
            "synthetic.low_contrast_probability" => {
                self.synthetic.params.low_contrast_probability = parse(key, value)?
            }
            "tile_size" => self.tile_size = parse(key, value)?,
            "tile_stride" => self.tile_stride = parse(key, value)?,
            "mask_threshold" => self.mask_threshold = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "model.depth" => m.encoder.depth = value.parse::<DepthPreset>()?,
            "model.width" => m.encoder.width_multiplier = parse(key, value)?,
            "model.pretrained" => m.encoder.pretrained = parse_opt(key, value)?,
            "model.freeze_encoder_bn" => m.encoder.freeze_bn = parse_bool(key, value)?,
            "model.use_dcam" => m.use_dcam = parse_bool(key, value)?,
            "model.use_small_decoder" => m.use_small_decoder = parse_bool(key, value)?,
            "model.dilation_rates" => {
                m.dilation_rates = value
                    .split(',')
                    .map(|r| parse(key, r.trim()))
                    .collect::<Result<_>>()?
            }
            "model.dcam_kernel_size" => m.dcam_kernel_size = parse(key, value)?,
            "model.cbam_reduction" => m.cbam.reduction = parse(key, value)?,
            "model.cbam_activation" => m.cbam.activation = value.parse()?,
            "model.spatial_padding" => m.cbam.spatial_padding = value.parse()?,
            "model.gap_activation" => m.gap_activation = value.parse()?,
            "model.upsample" => m.upsample = value.parse()?,
            "model.fused_channels" => m.fused_channels = parse_opt(key, value)?,
            "model.head_channels" => m.head_channels = parse_opt(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn to_flat(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let s = &self.synthetic;
        vec![
            ("optimizer", "adam".into()),
            ("schedule", "poly".into()),
            ("initial_lr", self.initial_lr.to_string()),
            ("poly_power", self.poly_power.to_string()),
            ("weight_decay", self.adam.weight_decay.to_string()),
            ("decoupled_weight_decay", self.adam.decoupled_weight_decay.to_string()),
            ("adam.beta1", self.adam.beta1.to_string()),
            ("adam.beta2", self.adam.beta2.to_string()),
            ("adam.eps", self.adam.eps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("max_steps", opt_str(&self.max_steps)),
            ("grad_clip", opt_str(&self.grad_clip)),
            ("focal.gamma", self.focal.gamma.to_string()),
            ("focal.probability_floor", self.focal.probability_floor.to_string()),
            ("seed", self.seed.to_string()),
            ("precision", lower(&self.precision)),
            ("dataset", self.dataset.to_string()),
            ("synthetic.train_samples", s.train_samples.to_string()),
            ("synthetic.val_samples", s.val_samples.to_string()),
            ("synthetic.test_samples", s.test_samples.to_string()),
            ("synthetic.size", s.size.to_string()),
            ("synthetic.min_roads", s.params.min_roads.to_string()),
            ("synthetic.max_roads", s.params.max_roads.to_string()),
            ("synthetic.min_width", s.params.min_width.to_string()),
            ("synthetic.max_width", s.params.max_width.to_string()),
            ("synthetic.max_road_fraction", s.params.max_road_fraction.to_string()),
            ("synthetic.occlusion_probability", s.params.occlusion_probability.to_string()),
            ("synthetic.max_occluders", s.params.max_occluders.to_string()),
            ("synthetic.low_contrast_probability", s.params.low_contrast_probability.to_string()),
            ("tile_size", self.tile_size.to_string()),
            ("tile_stride", self.tile_stride.to_string()),
            ("mask_threshold", self.mask_threshold.to_string()),
            ("augment", self.augment.to_string()),
            ("threshold", self.threshold.to_string()),
            ("model.depth", lower(&m.encoder.depth)),
            ("model.width", m.encoder.width_multiplier.to_string()),
            (
                "model.pretrained",
                m.encoder
                    .pretrained
                    .as_ref()
                    .map_or_else(|| "none".into(), |p| p.display().to_string()),
            ),
            ("model.freeze_encoder_bn", m.encoder.freeze_bn.to_string()),
            ("model.use_dcam", m.use_dcam.to_string()),
            ("model.use_small_decoder", m.use_small_decoder.to_string()),
            (
                "model.dilation_rates",
                m.dilation_rates
                    .iter()
                    .map(|r| r.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("model.dcam_kernel_size", m.dcam_kernel_size.to_string()),
            ("model.cbam_reduction", m.cbam.reduction.to_string()),
            ("model.cbam_activation", lower(&m.cbam.activation)),
            ("model.spatial_padding", lower(&m.cbam.spatial_padding)),
            ("model.gap_activation", lower(&m.gap_activation)),
            ("model.upsample", lower(&m.upsample)),
            ("model.fused_channels", opt_str(&m.fused_channels)),
            ("model.head_channels", opt_str(&m.head_channels)),
        ]
    }

    pub fn to_flat_string(&self) -> String {
        self.to_flat()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Keys whose values differ between two configurations.
    pub fn diff(&self, other: &Self) -> Vec<&'static str> {
        self.to_flat()
            .into_iter()
            .zip(other.to_flat())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, _)| a.0)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) {
            return Err(Error::Config("initial_lr must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be ≥ 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0, 1)".into()));
        }
        self.focal.validate()?;
        self.model.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_recipe() {
        let c = TrainConfig::default();
        assert_eq!(c.initial_lr, 0.001);
        assert_eq!(c.poly_power, 0.9);
        assert_eq!(c.adam.weight_decay, 5e-4);
        assert_eq!(c.batch_size, 4);
        assert_eq!(c.epochs, 50);
        assert_eq!(c.focal.gamma, 2.0);
        assert_eq!((c.adam.beta1, c.adam.beta2, c.adam.eps), (0.9, 0.999, 1e-8));
    }

    #[test]
    fn flat_round_trip() {
        let mut c = TrainConfig::desk(0.25);
        c.max_steps = Some(30);
        c.model.dilation_rates = vec![1, 3];
        c.dataset = DatasetSpec::Directory("/data/mass".into());
        let text = c.to_flat_string();
        assert_eq!(TrainConfig::parse_str(&text).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = TrainConfig::parse_str("learning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
        assert!(TrainConfig::parse_str("epochs 3").is_err());
        assert!(TrainConfig::parse_str("epochs = three").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = TrainConfig::parse_str("# hello\n\nseed = 7 # trailing\n").unwrap();
        assert_eq!(c.seed, 7);
    }

    #[test]
    fn diff_names_changed_keys() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.model.use_dcam = false;
        assert_eq!(a.diff(&b), vec!["model.use_dcam"]);
    }
}
