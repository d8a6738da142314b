//! Mask and overlay export for image files.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::data::{read_rgb, rgb_to_chw};
use crate::error::{Error, Result};
use crate::eval::infer_logits;
use crate::model::{predict_mask, DduNet};

#[derive(Debug, Clone, PartialEq)]
pub struct PredictOutput {
    pub mask_path: PathBuf,
    pub overlay_path: PathBuf,
    pub road_pixels: usize,
}

/// (1, 3, H, W) tensor of an RGB image scaled to [0, 1].
pub fn image_to_tensor(img: &RgbImage, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let chw = rgb_to_chw(img, 0, 0, w, h);
    Ok(Tensor::from_vec(chw, (1, 3, h, w), device)?.to_dtype(dtype)?)
}

/// Binary road mask (1 = road) for a whole image of any size.
pub fn predict_image(model: &DduNet, img: &RgbImage, threshold: f64) -> Result<GrayImage> {
    let x = image_to_tensor(img, model.dtype(), model.device())?;
    let logits = infer_logits(model, &x)?;
    let mask = predict_mask(&logits, threshold)?
        .flatten_all()?
        .to_vec1::<u8>()?;
    GrayImage::from_raw(img.width(), img.height(), mask)
        .ok_or_else(|| Error::Shape("mask size does not match the image".into()))
}

/// Road pixels blended halfway towards pure red.
pub fn overlay(img: &RgbImage, mask: &GrayImage) -> RgbImage {
    let mut out = img.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if mask.get_pixel(x, y).0[0] != 0 {
            let Rgb([r, g, b]) = *px;
            *px = Rgb([
                ((r as u16 + 255) / 2) as u8,
                (g as u16 / 2) as u8,
                (b as u16 / 2) as u8,
            ]);
        }
    }
    out
}

fn file_id(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::InvalidInput(format!("cannot derive an id from {}", path.display())))
}

/// Write `<id>_mask.png` (0/255) and `<id>_overlay.png` for one image.
pub fn predict_file(model: &DduNet, path: &Path, out_dir: &Path, threshold: f64) -> Result<PredictOutput> {
    let id = file_id(path)?;
    let img = read_rgb(path)?;
    let mask = predict_image(model, &img, threshold)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let road_pixels = mask.pixels().filter(|p| p.0[0] != 0).count();
    let visible = GrayImage::from_fn(mask.width(), mask.height(), |x, y| {
        Luma([if mask.get_pixel(x, y).0[0] != 0 { 255 } else { 0 }])
    });
    let mask_path = out_dir.join(format!("{id}_mask.png"));
    visible.save(&mask_path).map_err(|e| Error::image(&mask_path, e))?;
    let overlay_path = out_dir.join(format!("{id}_overlay.png"));
    overlay(&img, &mask)
        .save(&overlay_path)
        .map_err(|e| Error::image(&overlay_path, e))?;
    Ok(PredictOutput {
        mask_path,
        overlay_path,
        road_pixels,
    })
}

/// Run [`predict_file`] over many inputs. A failing file is reported and the
/// rest still run.
pub fn predict_files(
    model: &DduNet,
    paths: &[PathBuf],
    out_dir: &Path,
    threshold: f64,
) -> Vec<(PathBuf, Result<PredictOutput>)> {
    paths
        .iter()
        .map(|p| {
            let r = predict_file(model, p, out_dir, threshold);
            if let Err(e) = &r {
                log::error!("{}: {e}", p.display());
            }
            (p.clone(), r)
        })
        .collect()
}
