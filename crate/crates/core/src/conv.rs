//! Convolutions lowered to matrix products.
//!
//! `im2col` unfolds every receptive field of a (B, C, H, W) input into a
//! column of a (B, C·k·k, Ho·Wo) matrix; its gradient is the matching
//! scatter-add `col2im`. A convolution is then one batched matmul against the
//! (O, C·k·k) weight matrix, so both the forward pass and the two gradients
//! run through the same GEMM kernels.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
}

impl Geometry {
    fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.dilation * (self.k - 1) - 1) / self.stride + 1
    }

    fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.dilation * (self.k - 1) - 1) / self.stride + 1
    }

    /// Calls `f(col_index, in_index, len)` for every run of in-bounds taps of
    /// one image. A run covers `len` consecutive output columns whose inputs
    /// are `stride` apart.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let plane_out = oh * ow;
        let (p, s) = (self.padding as isize, self.stride as isize);
        for c in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    // Output columns whose input column lands inside the image.
                    let off = (kx * self.dilation) as isize - p;
                    let lo = if off < 0 { ((-off) + s - 1) / s } else { 0 };
                    let hi = ((self.w as isize - 1 - off).div_euclid(s) + 1).min(ow as isize);
                    if hi <= lo {
                        continue;
                    }
                    let (lo, len) = (lo as usize, (hi - lo) as usize);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky * self.dilation) as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let ix = (lo as isize * s + off) as usize;
                        f(
                            row * plane_out + oy * ow + lo,
                            (c * self.h + iy as usize) * self.w + ix,
                            len,
                        );
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T], candle_core::Error> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => Err(candle_core::Error::Msg("im2col expects a contiguous input".into())),
    }
}

struct Im2Col(Geometry);

impl Im2Col {
    fn run<T: WithDType>(&self, x: &[T], batch: usize) -> Vec<T> {
        let g = self.0;
        let in_len = g.c * g.h * g.w;
        let out_len = g.c * g.k * g.k * g.out_h() * g.out_w();
        let mut out = vec![T::zero(); batch * out_len];
        for b in 0..batch {
            let src = &x[b * in_len..(b + 1) * in_len];
            let dst = &mut out[b * out_len..(b + 1) * out_len];
            g.for_each_run(|o, i, len| {
                if g.stride == 1 {
                    dst[o..o + len].copy_from_slice(&src[i..i + len]);
                } else {
                    for j in 0..len {
                        dst[o + j] = src[i + j * g.stride];
                    }
                }
            });
        }
        out
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let batch = l.dims()[0];
        let shape = Shape::from((batch, g.c * g.k * g.k, g.out_h() * g.out_w()));
        let out = match s {
            CpuStorage::F32(d) => CpuStorage::F32(self.run(contiguous(d, l)?, batch)),
            CpuStorage::F64(d) => CpuStorage::F64(self.run(contiguous(d, l)?, batch)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

struct Col2Im(Geometry);

impl Col2Im {
    fn run<T: WithDType>(&self, cols: &[T], batch: usize) -> Vec<T> {
        let g = self.0;
        let in_len = g.c * g.h * g.w;
        let col_len = g.c * g.k * g.k * g.out_h() * g.out_w();
        let mut out = vec![T::zero(); batch * in_len];
        for b in 0..batch {
            let src = &cols[b * col_len..(b + 1) * col_len];
            let dst = &mut out[b * in_len..(b + 1) * in_len];
            g.for_each_run(|o, i, len| {
                if g.stride == 1 {
                    dst[i..i + len].iter_mut().zip(&src[o..o + len]).for_each(|(d, &v)| *d += v);
                } else {
                    for j in 0..len {
                        dst[i + j * g.stride] += src[o + j];
                    }
                }
            });
        }
        out
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let batch = l.dims()[0];
        let shape = Shape::from((batch, g.c, g.h, g.w));
        let out = match s {
            CpuStorage::F32(d) => CpuStorage::F32(self.run(contiguous(d, l)?, batch)),
            CpuStorage::F64(d) => CpuStorage::F64(self.run(contiguous(d, l)?, batch)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// Unfold a (B, C, H, W) tensor into (B, C·k·k, Ho·Wo) receptive-field columns.
/// Rows are ordered channel-major, then kernel row, then kernel column.
pub fn im2col(x: &Tensor, k: usize, stride: usize, padding: usize, dilation: usize) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    if k == 0 || stride == 0 || dilation == 0 {
        return Err(Error::InvalidArgument("kernel, stride and dilation must be ≥ 1".into()));
    }
    if h + 2 * padding < dilation * (k - 1) + 1 || w + 2 * padding < dilation * (k - 1) + 1 {
        return Err(Error::Shape(format!(
            "{h}x{w} input is smaller than the {k}x{k} kernel at dilation {dilation}"
        )));
    }
    let g = Geometry {
        c,
        h,
        w,
        k,
        stride,
        padding,
        dilation,
    };
    Ok(x.contiguous()?.apply_op1(Im2Col(g))?)
}

/// Zero-padded 2-D cross-correlation of (B, C, H, W) with (O, C, k, k) weights.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize, dilation: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, wc, k, k2) = weight.dims4()?;
    if wc != c || k != k2 {
        return Err(Error::Shape(format!(
            "weight {:?} does not fit a {c}-channel input",
            weight.dims()
        )));
    }
    let (cols, oh, ow) = if k == 1 && stride == 1 && padding == 0 {
        (x.reshape((b, c, h * w))?, h, w)
    } else {
        let oh = (h + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
        let ow = (w + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
        (im2col(x, k, stride, padding, dilation)?, oh, ow)
    };
    let wm = weight.reshape((1, o, c * k * k))?.broadcast_as((b, o, c * k * k))?.contiguous()?;
    Ok(wm.matmul(&cols)?.reshape((b, o, oh, ow))?)
}

/// Kernel-2, stride-2 transposed convolution with (C, O, 2, 2) weights. The
/// output windows do not overlap, so each input pixel is a matrix product
/// followed by a 2×2 pixel shuffle.
pub fn conv_transpose2x2(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (wc, o, k, k2) = weight.dims4()?;
    if wc != c || (k, k2) != (2, 2) {
        return Err(Error::Shape(format!(
            "weight {:?} is not a 2x2 transposed kernel for {c} channels",
            weight.dims()
        )));
    }
    // (O·2·2, C) @ (B, C, H·W) → (B, O, 2, 2, H, W) → (B, O, H, 2, W, 2).
    let wm = weight.reshape((c, o * 4))?.t()?.reshape((1, o * 4, c))?.broadcast_as((b, o * 4, c))?.contiguous()?;
    let y = wm.matmul(&x.reshape((b, c, h * w))?)?;
    Ok(y.reshape((b, o, 2, 2, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, o, 2 * h, 2 * w))?)
}
