//! Feature heatmaps: the plain (uniformly weighted) mean over all channels
//! of a tapped map, min-max scaled to 0..=255 and resized to the input.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma};

use crate::data::{pad_to_multiple, read_rgb};
use crate::encoder::INPUT_MULTIPLE;
use crate::error::{Error, Result};
use crate::model::DduNet;
use crate::nn::Mode;
use crate::predict::image_to_tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerTag {
    LargeDecoderOut,
    SmallDecoderOut,
    Fused,
    Logits,
}

impl LayerTag {
    pub const ALL: [LayerTag; 4] = [
        LayerTag::LargeDecoderOut,
        LayerTag::SmallDecoderOut,
        LayerTag::Fused,
        LayerTag::Logits,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerTag::LargeDecoderOut => "large_decoder_out",
            LayerTag::SmallDecoderOut => "small_decoder_out",
            LayerTag::Fused => "fused",
            LayerTag::Logits => "logits",
        }
    }
}

impl Display for LayerTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LayerTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = LayerTag::ALL.iter().map(|t| t.as_str()).collect();
                Error::InvalidArgument(format!(
                    "unknown layer tag `{s}`; valid tags: {}",
                    valid.join(", ")
                ))
            })
    }
}

/// Mean over channels of the first batch item of a (B, C, H, W) map, as a
/// row-major H × W grid.
pub fn channel_mean(map: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let (_, _, h, w) = map.dims4()?;
    let mean = map
        .narrow(0, 0, 1)?
        .to_dtype(DType::F64)?
        .mean_keepdim(1)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    Ok((h, w, mean))
}

/// Min-max scale to 0..=255. A constant input maps to 128 everywhere.
pub fn normalize_to_u8(values: &[f64]) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

/// Heatmap of one tapped map for a (1, 3, H, W) image, at H × W.
pub fn heatmap(model: &DduNet, image: &Tensor, tag: LayerTag) -> Result<GrayImage> {
    let (padded, geom) = pad_to_multiple(image, INPUT_MULTIPLE)?;
    let taps = model.forward_taps(&padded, Mode::Eval)?;
    let map = match tag {
        LayerTag::LargeDecoderOut => taps.large,
        LayerTag::SmallDecoderOut => taps.small.ok_or_else(|| {
            Error::InvalidArgument("this model has no small decoder to tap".into())
        })?,
        LayerTag::Fused => taps.fused,
        LayerTag::Logits => taps.logits,
    };
    let (h, w, mean) = channel_mean(&map)?;
    let scaled: Vec<f32> = normalize_to_u8(&mean).into_iter().map(f32::from).collect();
    let small: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_raw(w as u32, h as u32, scaled)
        .ok_or_else(|| Error::Shape("heatmap buffer size".into()))?;
    let (ph, pw) = (geom.padded_height as u32, geom.padded_width as u32);
    let full = if (h as u32, w as u32) == (ph, pw) {
        small
    } else {
        imageops::resize(&small, pw, ph, FilterType::Triangle)
    };
    Ok(GrayImage::from_fn(geom.width as u32, geom.height as u32, |x, y| {
        Luma([full.get_pixel(x, y).0[0].round().clamp(0.0, 255.0) as u8])
    }))
}

pub fn export_heatmap(model: &DduNet, image_path: &Path, tag: LayerTag, out_path: &Path) -> Result<()> {
    let img = read_rgb(image_path)?;
    let x = image_to_tensor(&img, model.dtype(), model.device())?;
    heatmap(model, &x, tag)?
        .save(out_path)
        .map_err(|e| Error::image(out_path, e))
}
