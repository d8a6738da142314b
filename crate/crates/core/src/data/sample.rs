use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, RgbImage};
use rand::Rng;

use super::index::{DatasetIndex, Record};
use crate::error::{Error, Result};

/// Default cut for 0/255-coded masks: stored intensity > 127 is road.
pub const DEFAULT_MASK_THRESHOLD: u8 = 127;

/// One image with its binary road mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    /// Channel-major RGB in [0, 1], length 3·H·W.
    pub image: Vec<f32>,
    /// 1 = road, 0 = background, length H·W.
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn road_pixels(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn road_fraction(&self) -> f64 {
        self.road_pixels() as f64 / self.mask.len().max(1) as f64
    }

    pub fn image_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(
            Tensor::from_slice(&self.image, (1, 3, self.height, self.width), device)?
                .to_dtype(dtype)?,
        )
    }

    pub fn mask_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(
            Tensor::from_slice(&self.mask, (1, 1, self.height, self.width), device)?
                .to_dtype(dtype)?,
        )
    }

    /// Random flips and (for square samples) quarter turns, applied identically
    /// to image and mask.
    pub fn augment<R: Rng>(&self, rng: &mut R) -> Sample {
        let mut s = self.clone();
        if rng.random_bool(0.5) {
            s = s.remap(s.height, s.width, |y, x| (y, s.width - 1 - x));
        }
        if rng.random_bool(0.5) {
            s = s.remap(s.height, s.width, |y, x| (s.height - 1 - y, x));
        }
        if s.height == s.width && rng.random_bool(0.5) {
            let n = s.width;
            s = s.remap(n, n, |y, x| (x, n - 1 - y));
        }
        s
    }

    fn remap(&self, h: usize, w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Sample {
        let plane = self.height * self.width;
        let mut image = vec![0.0; 3 * h * w];
        let mut mask = vec![0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = src(y, x);
                let si = sy * self.width + sx;
                mask[y * w + x] = self.mask[si];
                for c in 0..3 {
                    image[c * h * w + y * w + x] = self.image[c * plane + si];
                }
            }
        }
        Sample {
            height: h,
            width: w,
            image,
            mask,
        }
    }
}

/// Stack samples of equal size into (B,3,H,W) images and (B,1,H,W) masks.
pub fn stack_batch(samples: &[Sample], dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    if samples
        .iter()
        .any(|s| (s.height, s.width) != (first.height, first.width))
    {
        return Err(Error::Shape("batch samples differ in size".into()));
    }
    let (h, w, n) = (first.height, first.width, samples.len());
    let image: Vec<f32> = samples.iter().flat_map(|s| s.image.iter().copied()).collect();
    let mask: Vec<u8> = samples.iter().flat_map(|s| s.mask.iter().copied()).collect();
    Ok((
        Tensor::from_vec(image, (n, 3, h, w), device)?.to_dtype(dtype)?,
        Tensor::from_vec(mask, (n, 1, h, w), device)?.to_dtype(dtype)?,
    ))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|e| Error::image(path, e))?
        .to_rgb8())
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)
        .map_err(|e| Error::image(path, e))?
        .to_luma8())
}

/// Channel-major [0, 1] floats of a crop of `img`.
pub fn rgb_to_chw(img: &RgbImage, x0: usize, y0: usize, w: usize, h: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel((x0 + x) as u32, (y0 + y) as u32);
            for c in 0..3 {
                out[c * w * h + y * w + x] = p[c] as f32 / 255.0;
            }
        }
    }
    out
}

pub fn binarize(img: &GrayImage, x0: usize, y0: usize, w: usize, h: usize, threshold: u8) -> Vec<u8> {
    let mut out = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = u8::from(img.get_pixel((x0 + x) as u32, (y0 + y) as u32)[0] > threshold);
        }
    }
    out
}

/// Decode one indexed record (a tile or a whole test image).
pub fn load_sample(index: &DatasetIndex, record: &Record, binarize_threshold: u8) -> Result<Sample> {
    let src = index.source(record)?;
    let img = read_rgb(&src.image_path)?;
    let mask = read_gray(&src.mask_path)?;
    if img.dimensions() != mask.dimensions() {
        return Err(Error::Dataset(format!(
            "{}: image is {:?} but mask is {:?}",
            src.id,
            img.dimensions(),
            mask.dimensions()
        )));
    }
    let (iw, ih) = (img.width() as usize, img.height() as usize);
    let (x0, y0, w, h) = match record {
        Record::Tile(t) => (t.x_offset, t.y_offset, t.tile_size, t.tile_size),
        Record::Whole { .. } => (0, 0, iw, ih),
    };
    if x0 + w > iw || y0 + h > ih {
        return Err(Error::Dataset(format!(
            "{} exceeds the {iw}x{ih} source image",
            record.name()
        )));
    }
    Ok(Sample {
        height: h,
        width: w,
        image: rgb_to_chw(&img, x0, y0, w, h),
        mask: binarize(&mask, x0, y0, w, h, binarize_threshold),
    })
}
