use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::reflect_pad_sides;

/// Original and padded extents, enough to undo [`pad_to_multiple`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadGeometry {
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
}

impl PadGeometry {
    pub fn pad_bottom(&self) -> usize {
        self.padded_height - self.height
    }

    pub fn pad_right(&self) -> usize {
        self.padded_width - self.width
    }

    /// Take the top-left original-size window of a (B, C, H', W') tensor.
    pub fn crop(&self, t: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = t.dims4()?;
        if (h, w) != (self.padded_height, self.padded_width) {
            return Err(Error::Shape(format!(
                "expected {}x{} to crop, got {h}x{w}",
                self.padded_height, self.padded_width
            )));
        }
        Ok(t.narrow(2, 0, self.height)?.narrow(3, 0, self.width)?)
    }
}

pub fn next_multiple(n: usize, multiple: usize) -> usize {
    n.div_ceil(multiple) * multiple
}

/// Reflect-pad the bottom and right edges of a (B, C, H, W) tensor up to the
/// next multiple of `multiple`.
pub fn pad_to_multiple(image: &Tensor, multiple: usize) -> Result<(Tensor, PadGeometry)> {
    if multiple == 0 {
        return Err(Error::InvalidArgument("pad multiple must be ≥ 1".into()));
    }
    let (_, _, h, w) = image.dims4()?;
    let geom = PadGeometry {
        height: h,
        width: w,
        padded_height: next_multiple(h, multiple),
        padded_width: next_multiple(w, multiple),
    };
    let padded = reflect_pad_sides(image, 0, geom.pad_bottom(), 0, geom.pad_right())?;
    Ok((padded, geom))
}
