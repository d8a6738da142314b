//! Broadcasting add and multiply for 4-D maps, with gradients that reduce by
//! direct nested loops.
//!
//! `g` broadcasts against `x` when every axis of `g` is 1 or equal to the
//! matching axis of `x`: (1, C, 1, 1) for per-channel terms, (B, C, 1, 1)
//! for channel gates, (B, 1, H, W) for spatial gates.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

fn dims4(shape: &Shape) -> candle_core::Result<[usize; 4]> {
    let (a, b, c, d) = shape.dims4()?;
    Ok([a, b, c, d])
}

/// Strides of `g` measured in its own storage, 0 along broadcast axes.
fn broadcast_strides(x: [usize; 4], g: [usize; 4]) -> candle_core::Result<[usize; 4]> {
    let mut strides = [0; 4];
    let mut acc = 1;
    for i in (0..4).rev() {
        if g[i] == x[i] {
            strides[i] = acc;
        } else if g[i] != 1 {
            candle_core::bail!("cannot broadcast {g:?} against {x:?}");
        }
        acc *= g[i];
    }
    Ok(strides)
}

fn slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("broadcast op expects contiguous operands"),
    }
}

/// Visit `(x_index, g_index)` for every element of `x`, innermost axis last.
fn walk(x: [usize; 4], gs: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize)) {
    let mut xi = 0;
    for a in 0..x[0] {
        for b in 0..x[1] {
            for c in 0..x[2] {
                let gi = a * gs[0] + b * gs[1] + c * gs[2];
                // f(x_start, g_start, g_step, len) over one row.
                f(xi, gi, gs[3], x[3]);
                xi += x[3];
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Add,
    Mul,
}

struct Binary(Kind);

impl Binary {
    fn run<T: WithDType>(&self, x: &[T], xd: [usize; 4], g: &[T], gd: [usize; 4]) -> candle_core::Result<Vec<T>> {
        let gs = broadcast_strides(xd, gd)?;
        let mut out = vec![T::zero(); x.len()];
        walk(xd, gs, |xs, g0, step, len| {
            let (xr, or) = (&x[xs..xs + len], &mut out[xs..xs + len]);
            match (self.0, step) {
                (Kind::Add, 0) => or.iter_mut().zip(xr).for_each(|(o, &v)| *o = v + g[g0]),
                (Kind::Mul, 0) => or.iter_mut().zip(xr).for_each(|(o, &v)| *o = v * g[g0]),
                (Kind::Add, _) => {
                    let gr = &g[g0..g0 + len];
                    or.iter_mut().zip(xr.iter().zip(gr)).for_each(|(o, (&v, &w))| *o = v + w)
                }
                (Kind::Mul, _) => {
                    let gr = &g[g0..g0 + len];
                    or.iter_mut().zip(xr.iter().zip(gr)).for_each(|(o, (&v, &w))| *o = v * w)
                }
            }
        });
        Ok(out)
    }
}

impl CustomOp2 for Binary {
    fn name(&self) -> &'static str {
        match self.0 {
            Kind::Add => "broadcast-add4",
            Kind::Mul => "broadcast-mul4",
        }
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (xd, gd) = (dims4(l1.shape())?, dims4(l2.shape())?);
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => CpuStorage::F32(self.run(slice(x, l1)?, xd, slice(g, l2)?, gd)?),
            (CpuStorage::F64(x), CpuStorage::F64(g)) => CpuStorage::F64(self.run(slice(x, l1)?, xd, slice(g, l2)?, gd)?),
            _ => candle_core::bail!("{} supports matching f32 or f64 operands", self.name()),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, g: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        Ok(match self.0 {
            Kind::Add => (Some(grad.clone()), Some(sum_to_raw(&grad, g.shape())?)),
            Kind::Mul => {
                let gx = grad.apply_op2_no_bwd(g, &Binary(Kind::Mul))?;
                let gg = sum_to_raw(&(&grad * x)?, g.shape())?;
                (Some(gx), Some(gg))
            }
        })
    }
}

struct SumTo([usize; 4]);

impl SumTo {
    fn run<T: WithDType>(&self, x: &[T], xd: [usize; 4]) -> candle_core::Result<Vec<T>> {
        let gs = broadcast_strides(xd, self.0)?;
        let mut out = vec![T::zero(); self.0.iter().product()];
        walk(xd, gs, |xs, g0, step, len| {
            let xr = &x[xs..xs + len];
            if step == 0 {
                let mut acc = T::zero();
                for &v in xr {
                    acc += v;
                }
                out[g0] += acc;
            } else {
                out[g0..g0 + len].iter_mut().zip(xr).for_each(|(o, &v)| *o += v);
            }
        });
        Ok(out)
    }
}

impl CustomOp1 for SumTo {
    fn name(&self) -> &'static str {
        "sum-to4"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let xd = dims4(l.shape())?;
        let out = match s {
            CpuStorage::F32(x) => CpuStorage::F32(self.run(slice(x, l)?, xd)?),
            CpuStorage::F64(x) => CpuStorage::F64(self.run(slice(x, l)?, xd)?),
            _ => candle_core::bail!("sum-to4 supports f32 and f64 only"),
        };
        Ok((out, Shape::from(self.0.to_vec())))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.broadcast_as(arg.shape())?.contiguous()?))
    }
}

fn sum_to_raw(x: &Tensor, shape: &Shape) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(SumTo(dims4(shape)?))
}

fn check(x: &Tensor, g: &Tensor) -> Result<()> {
    let (xd, gd) = (x.dims(), g.dims());
    if xd.len() != 4 || gd.len() != 4 || gd.iter().zip(xd).any(|(&a, &b)| a != 1 && a != b) {
        return Err(Error::Shape(format!("cannot broadcast {gd:?} against {xd:?}")));
    }
    if x.dtype() != g.dtype() {
        return Err(Error::Shape(format!("dtype mismatch {:?} vs {:?}", x.dtype(), g.dtype())));
    }
    Ok(())
}

/// `x + g` with `g` broadcast to the shape of `x`.
pub fn add(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    check(x, g)?;
    Ok(x.contiguous()?.apply_op2(&g.contiguous()?, Binary(Kind::Add))?)
}

/// `x · g` with `g` broadcast to the shape of `x`.
pub fn mul(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    check(x, g)?;
    Ok(x.contiguous()?.apply_op2(&g.contiguous()?, Binary(Kind::Mul))?)
}

/// Sum `x` down to `shape`, whose axes are each 1 or equal to those of `x`.
pub fn sum_to(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let target = Shape::from(shape.to_vec());
    if x.rank() != 4 || shape.len() != 4 || shape.iter().zip(x.dims()).any(|(&a, &b)| a != 1 && a != b) {
        return Err(Error::Shape(format!("cannot reduce {:?} to {shape:?}", x.dims())));
    }
    Ok(sum_to_raw(x, &target)?)
}
