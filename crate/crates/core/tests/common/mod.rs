//! Scalar loop references and fixtures shared by the integration tests.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use ddunet::attention::{Cbam, CbamConfig};
use ddunet::dcam::{Dcam, DcamConfig};
use ddunet::loss::{focal_loss, focal_loss_with_logits, FocalConfig};
use ddunet::model::{DduNet, ModelConfig};
use ddunet::nn::{Mode, ParamStore};

pub const BN_EPS: f64 = 1e-5;

/// Plain (batch, channels, height, width) array of f64.
#[derive(Debug, Clone)]
pub struct Arr {
    pub d: [usize; 4],
    pub v: Vec<f64>,
}

impl Arr {
    pub fn zeros(d: [usize; 4]) -> Self {
        Self {
            d,
            v: vec![0.0; d.iter().product()],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (b, c, h, w) = t.dims4().unwrap();
        let v = t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        Self { d: [b, c, h, w], v }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.v.clone(), &self.d[..], &Device::Cpu).unwrap()
    }

    pub fn idx(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.d[1] + c) * self.d[2] + y) * self.d[3] + x
    }

    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.v[self.idx(b, c, y, x)]
    }

    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, value: f64) {
        let i = self.idx(b, c, y, x);
        self.v[i] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Arr {
        Arr {
            d: self.d,
            v: self.v.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn max_abs_diff(&self, t: &Tensor) -> f64 {
        let other = Arr::from_tensor(t);
        assert_eq!(self.d, other.d, "shape mismatch");
        self.v
            .iter()
            .zip(&other.v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Concatenate along channels.
pub fn cat_channels(parts: &[Arr]) -> Arr {
    let [b, _, h, w] = parts[0].d;
    let c: usize = parts.iter().map(|p| p.d[1]).sum();
    let mut out = Arr::zeros([b, c, h, w]);
    for n in 0..b {
        let mut offset = 0;
        for p in parts {
            for k in 0..p.d[1] {
                for y in 0..h {
                    for x in 0..w {
                        out.set(n, offset + k, y, x, p.at(n, k, y, x));
                    }
                }
            }
            offset += p.d[1];
        }
    }
    out
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn relu(z: f64) -> f64 {
    z.max(0.0)
}

/// Parameter or buffer values as f64.
pub fn values(store: &ParamStore, name: &str) -> Vec<f64> {
    let var = store.get(name).unwrap_or_else(|| panic!("no tensor `{name}`"));
    var.as_tensor()
        .to_dtype(DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap()
}

/// Overwrite every tensor in the store with fixed, well-spread values.
/// Batch-norm scales and running variances stay positive.
pub fn fill_fixed(store: &ParamStore, scale: f64) {
    for (i, (name, var)) in store.all().into_iter().enumerate() {
        let n = var.elem_count();
        let vals: Vec<f64> = (0..n)
            .map(|j| {
                let a = ((j as f64 + 1.0) * 0.754_877_666_2 + i as f64 * 0.569_840_291).fract();
                if name.ends_with("running_var") || is_bn_scale(&name) {
                    0.5 + a
                } else if name.ends_with("running_mean") {
                    0.2 * (a - 0.5)
                } else {
                    scale * (a - 0.5)
                }
            })
            .collect();
        let t = Tensor::from_vec(vals, var.dims(), &Device::Cpu)
            .unwrap()
            .to_dtype(var.dtype())
            .unwrap();
        var.set(&t).unwrap();
    }
}

fn is_bn_scale(name: &str) -> bool {
    name.ends_with("bn.weight") || name.ends_with("_bn.weight")
}

/// Fixed pseudo-random input.
pub fn input(d: [usize; 4], k: f64) -> Arr {
    let n: usize = d.iter().product();
    Arr {
        d,
        v: (0..n).map(|i| ((i as f64 + 0.5) * k).sin() + 0.3 * ((i as f64) * 0.173).cos()).collect(),
    }
}

/// Direct 2-D convolution with zero padding. `w` is (O, C, K, K).
pub fn conv2d(x: &Arr, w: &[f64], out_ch: usize, k: usize, bias: Option<&[f64]>, stride: usize, pad: usize, dil: usize) -> Arr {
    let [b, c, h, wd] = x.d;
    assert_eq!(w.len(), out_ch * c * k * k);
    let oh = (h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let ow = (wd + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let mut out = Arr::zeros([b, out_ch, oh, ow]);
    for n in 0..b {
        for o in 0..out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky * dil) as isize - pad as isize;
                                let ix = (ox * stride + kx * dil) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(n, ci, iy as usize, ix as usize) * w[((o * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out.set(n, o, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// Stride-2, kernel-2 transposed convolution. `w` is (C, O, 2, 2).
pub fn conv_transpose2x2(x: &Arr, w: &[f64], out_ch: usize, bias: &[f64]) -> Arr {
    let [b, c, h, wd] = x.d;
    let mut out = Arr::zeros([b, out_ch, 2 * h, 2 * wd]);
    for n in 0..b {
        for o in 0..out_ch {
            for y in 0..h {
                for xx in 0..wd {
                    for i in 0..2 {
                        for j in 0..2 {
                            let mut acc = bias[o];
                            for ci in 0..c {
                                acc += x.at(n, ci, y, xx) * w[((ci * out_ch + o) * 2 + i) * 2 + j];
                            }
                            out.set(n, o, 2 * y + i, 2 * xx + j, acc);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Batch norm. With `train` the batch statistics (biased variance) are used,
/// otherwise the stored running statistics.
pub fn batch_norm(x: &Arr, store: &ParamStore, prefix: &str, train: bool) -> Arr {
    let [b, c, h, w] = x.d;
    let gamma = values(store, &format!("{prefix}.weight"));
    let beta = values(store, &format!("{prefix}.bias"));
    let (mean, var) = if train {
        let count = (b * h * w) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for n in 0..b {
                for y in 0..h {
                    for xx in 0..w {
                        s += x.at(n, ch, y, xx);
                    }
                }
            }
            mean[ch] = s / count;
            let mut q = 0.0;
            for n in 0..b {
                for y in 0..h {
                    for xx in 0..w {
                        q += (x.at(n, ch, y, xx) - mean[ch]).powi(2);
                    }
                }
            }
            var[ch] = q / count;
        }
        (mean, var)
    } else {
        (
            values(store, &format!("{prefix}.running_mean")),
            values(store, &format!("{prefix}.running_var")),
        )
    };
    let mut out = x.clone();
    for n in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let z = (x.at(n, ch, y, xx) - mean[ch]) / (var[ch] + BN_EPS).sqrt();
                    out.set(n, ch, y, xx, z * gamma[ch] + beta[ch]);
                }
            }
        }
    }
    out
}

fn dense(v: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    let inp = v.len();
    (0..out)
        .map(|o| b[o] + (0..inp).map(|i| w[o * inp + i] * v[i]).sum::<f64>())
        .collect()
}

/// Channel gate weights (batch, channels) for the CBAM under `prefix`.
pub fn channel_gate(x: &Arr, store: &ParamStore, prefix: &str) -> Vec<Vec<f64>> {
    let [b, c, h, w] = x.d;
    let w1 = values(store, &format!("{prefix}.mlp.fc1.weight"));
    let b1 = values(store, &format!("{prefix}.mlp.fc1.bias"));
    let w2 = values(store, &format!("{prefix}.mlp.fc2.weight"));
    let b2 = values(store, &format!("{prefix}.mlp.fc2.bias"));
    let mlp = |v: &[f64]| {
        let hdn: Vec<f64> = dense(v, &w1, &b1).into_iter().map(relu).collect();
        dense(&hdn, &w2, &b2)
    };
    (0..b)
        .map(|n| {
            let mut avg = vec![0.0; c];
            let mut mx = vec![f64::NEG_INFINITY; c];
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let v = x.at(n, ch, y, xx);
                        avg[ch] += v / (h * w) as f64;
                        mx[ch] = mx[ch].max(v);
                    }
                }
            }
            let (a, m) = (mlp(&avg), mlp(&mx));
            (0..c).map(|ch| sigmoid(a[ch] + m[ch])).collect()
        })
        .collect()
}

/// Spatial gate weights (batch, 1, height, width) for the CBAM under `prefix`.
pub fn spatial_gate(x: &Arr, store: &ParamStore, prefix: &str) -> Arr {
    let [b, c, h, w] = x.d;
    let mut stacked = Arr::zeros([b, 2, h, w]);
    for n in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let mut s = 0.0;
                let mut m = f64::NEG_INFINITY;
                for ch in 0..c {
                    let v = x.at(n, ch, y, xx);
                    s += v;
                    m = m.max(v);
                }
                stacked.set(n, 0, y, xx, s / c as f64);
                stacked.set(n, 1, y, xx, m);
            }
        }
    }
    let wt = values(store, &format!("{prefix}.spatial.weight"));
    let bs = values(store, &format!("{prefix}.spatial.bias"));
    conv2d(&stacked, &wt, 1, 7, Some(&bs), 1, 3, 1).map(sigmoid)
}

/// CBAM: channel gate, then spatial gate on the refined map.
pub fn cbam(x: &Arr, store: &ParamStore, prefix: &str) -> Arr {
    let [b, c, h, w] = x.d;
    let mc = channel_gate(x, store, prefix);
    let mut refined = x.clone();
    for n in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    refined.set(n, ch, y, xx, x.at(n, ch, y, xx) * mc[n][ch]);
                }
            }
        }
    }
    let ms = spatial_gate(&refined, store, prefix);
    let mut out = refined.clone();
    for n in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out.set(n, ch, y, xx, refined.at(n, ch, y, xx) * ms.at(n, 0, y, xx));
                }
            }
        }
    }
    out
}

/// DCAM with a 3×3 cascade at the given rates, a pooled branch, per-branch
/// CBAM, concatenation and a 1×1 reduction.
pub fn dcam(x: &Arr, store: &ParamStore, prefix: &str, rates: &[usize], train: bool) -> Arr {
    let [b, c, h, w] = x.d;
    let mut branches = Vec::new();
    let mut tap = x.clone();
    for (i, &r) in rates.iter().enumerate() {
        let wt = values(store, &format!("{prefix}.cascade.{i}.conv.weight"));
        let conv = conv2d(&tap, &wt, c, 3, None, 1, r, r);
        tap = batch_norm(&conv, store, &format!("{prefix}.cascade.{i}.bn"), train).map(relu);
        branches.push(cbam(&tap, store, &format!("{prefix}.attention.{i}")));
    }
    let mut pooled = Arr::zeros([b, c, 1, 1]);
    for n in 0..b {
        for ch in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    s += x.at(n, ch, y, xx);
                }
            }
            pooled.set(n, ch, 0, 0, s / (h * w) as f64);
        }
    }
    let gw = values(store, &format!("{prefix}.gap.conv.weight"));
    let gb = values(store, &format!("{prefix}.gap.conv.bias"));
    let g = conv2d(&pooled, &gw, c, 1, Some(&gb), 1, 0, 1).map(relu);
    let mut spread = Arr::zeros([b, c, h, w]);
    for n in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    spread.set(n, ch, y, xx, g.at(n, ch, 0, 0));
                }
            }
        }
    }
    branches.push(cbam(&spread, store, &format!("{prefix}.attention.{}", rates.len())));
    let cat = cat_channels(&branches);
    let rw = values(store, &format!("{prefix}.reduce.weight"));
    let rb = values(store, &format!("{prefix}.reduce.bias"));
    conv2d(&cat, &rw, c, 1, Some(&rb), 1, 0, 1)
}

/// Fusion head: concat → 1×1 conv → BN → ReLU (fused) → transposed ×2 →
/// ReLU → 3×3 conv to one logit.
pub fn fuse_and_head(large: &Arr, small: Option<&Arr>, store: &ParamStore, prefix: &str, fused_ch: usize, head_ch: usize, train: bool) -> (Arr, Arr) {
    let input = match small {
        Some(s) => cat_channels(&[large.clone(), s.clone()]),
        None => large.clone(),
    };
    let fw = values(store, &format!("{prefix}.fuse.weight"));
    let f = conv2d(&input, &fw, fused_ch, 1, None, 1, 0, 1);
    let fused = batch_norm(&f, store, &format!("{prefix}.fuse_bn"), train).map(relu);
    let uw = values(store, &format!("{prefix}.up.weight"));
    let ub = values(store, &format!("{prefix}.up.bias"));
    let up = conv_transpose2x2(&fused, &uw, head_ch, &ub).map(relu);
    let ow = values(store, &format!("{prefix}.out.weight"));
    let ob = values(store, &format!("{prefix}.out.bias"));
    let logits = conv2d(&up, &ow, 1, 3, Some(&ob), 1, 1, 1);
    (fused, logits)
}

/// Per-pixel mean over channels of the first batch item.
pub fn channel_mean(x: &Arr) -> Vec<f64> {
    let [_, c, h, w] = x.d;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for xx in 0..w {
            let mut s = 0.0;
            for ch in 0..c {
                s += x.at(0, ch, y, xx);
            }
            out.push(s / c as f64);
        }
    }
    out
}

/// Relative error of an analytic gradient against a numeric one, with
/// `floor` guarding entries where both are near zero.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` with respect to element `i` of `data`.
pub fn central_difference(data: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = data[i];
    data[i] = orig + h;
    let up = f(data);
    data[i] = orig - h;
    let down = f(data);
    data[i] = orig;
    (up - down) / (2.0 * h)
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}

pub fn set_var(var: &Var, data: &[f64]) {
    var.set(&Tensor::from_vec(data.to_vec(), var.dims(), &Device::Cpu).unwrap()).unwrap();
}

/// Fixed cosine weights for turning a block output into a scalar.
pub fn probe(dims: &[usize]) -> Tensor {
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.613 + 0.2).cos()).collect();
    Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
}

/// Worst relative error over every element of every variable, with the
/// location of the worst entry.
pub fn worst_grad_error(vars: &[(String, Var)], h: f64, floor: f64, loss: impl Fn() -> Tensor) -> (f64, String) {
    let grads = loss().backward().unwrap();
    let mut worst = (0.0, String::new());
    for (name, var) in vars {
        let analytic = match grads.get(var) {
            Some(g) => to_vec(g),
            None => vec![0.0; var.elem_count()],
        };
        let mut data = to_vec(var.as_tensor());
        for i in 0..data.len() {
            let numeric = central_difference(&mut data, i, h, |d| {
                set_var(var, d);
                loss().to_scalar::<f64>().unwrap()
            });
            set_var(var, &data);
            let e = rel_err(analytic[i], numeric, floor);
            if e > worst.0 {
                worst = (e, format!("{name}[{i}]: analytic {} numeric {numeric}", analytic[i]));
            }
        }
    }
    worst
}

pub const GRAD_H: f64 = 1e-6;
/// Entries whose analytic and numeric gradients are both below this are
/// compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Focal loss on probabilities for each gamma, then on logits.
pub fn focal_grad_errors() -> Vec<(String, f64, String)> {
    let p: Vec<f64> = (0..12).map(|i| 0.05 + 0.9 * ((i as f64 * 0.618).fract())).collect();
    let t: Vec<f64> = (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let probs = Var::from_tensor(&Tensor::from_vec(p, 12, &Device::Cpu).unwrap()).unwrap();
    let targets = Tensor::from_vec(t, 12, &Device::Cpu).unwrap();
    let mut out = Vec::new();
    for gamma in [0.0, 2.0, 3.5] {
        let cfg = FocalConfig { gamma, ..Default::default() };
        let vars = vec![("p".to_string(), probs.clone())];
        let (e, at) = worst_grad_error(&vars, GRAD_H, GRAD_FLOOR, || focal_loss(&probs, &targets, &cfg).unwrap());
        out.push((format!("gamma {gamma}"), e, at));
    }
    let z = Var::from_tensor(&(probe(&[1, 1, 3, 4]) * 3.0).unwrap()).unwrap();
    let y = targets.reshape((1, 1, 3, 4)).unwrap();
    let vars = vec![("z".to_string(), z.clone())];
    let (e, at) = worst_grad_error(&vars, GRAD_H, GRAD_FLOOR, || {
        focal_loss_with_logits(&z, &y, &FocalConfig::default()).unwrap()
    });
    out.push(("logits".into(), e, at));
    out
}

/// CBAM on a 1x4x6x6 input, over all parameters and the input.
pub fn cbam_grad_error() -> (f64, String) {
    let store = ParamStore::new(11, DType::F64, &Device::Cpu);
    let cbam = Cbam::new(&store.root(), 4, &CbamConfig { reduction: 2, ..Default::default() }).unwrap();
    let x = Var::from_tensor(&input([1, 4, 6, 6], 0.77).to_tensor()).unwrap();
    let w = probe(&[1, 4, 6, 6]);
    let mut vars = store.params();
    vars.push(("input".into(), x.clone()));
    worst_grad_error(&vars, GRAD_H, GRAD_FLOOR, || (cbam.forward(&x).unwrap() * &w).unwrap().sum_all().unwrap())
}

/// DCAM in training mode on a 1x2x5x5 input, over all parameters and the input.
pub fn dcam_grad_error() -> (f64, String) {
    let store = ParamStore::new(12, DType::F64, &Device::Cpu);
    let dcam = Dcam::new(&store.root(), &DcamConfig::new(2)).unwrap();
    let x = Var::from_tensor(&input([1, 2, 5, 5], 0.41).to_tensor()).unwrap();
    let w = probe(&[1, 2, 5, 5]);
    let mut vars = store.params();
    vars.push(("input".into(), x.clone()));
    worst_grad_error(&vars, GRAD_H, GRAD_FLOOR, || {
        (dcam.forward(&x, Mode::Train).unwrap() * &w).unwrap().sum_all().unwrap()
    })
}

/// Width-0.25 small model at 32x32 with a fixed batch of two.
pub fn end_to_end() -> (DduNet, Tensor, Tensor) {
    let model = DduNet::new(&ModelConfig::small(0.25), 21, DType::F64, &Device::Cpu).unwrap();
    let x = input([2, 3, 32, 32], 0.093).map(|v| 0.5 + 0.3 * v).to_tensor();
    let y = input([2, 1, 32, 32], 0.051).map(|v| (v > 0.6) as u8 as f64).to_tensor();
    (model, x, y)
}

/// Step and floor for the end-to-end probe in each mode. In training mode
/// the deepest batch norm normalises only a handful of values, which makes
/// the loss sharply curved, so that mode needs a much smaller step; the
/// roundoff of that step then calls for a higher floor on tiny gradients.
pub const END_TO_END_MODES: [(Mode, f64, f64); 2] = [(Mode::Eval, 1e-6, GRAD_FLOOR), (Mode::Train, 1e-8, 1e-4)];

/// Twenty parameter entries spread over the whole network, each the entry
/// of its tensor with the largest gradient so the probe avoids dead units.
pub fn end_to_end_grad_error(mode: Mode, h: f64, floor: f64) -> (f64, String) {
    let (model, x, y) = end_to_end();
    let params = model.store().params();
    let stride = params.len() / 20;
    let loss = || {
        let logits = model.forward(&x, mode).unwrap();
        focal_loss_with_logits(&logits, &y, &FocalConfig::default()).unwrap()
    };
    let grads = loss().backward().unwrap();
    let mut worst = (0.0, String::new());
    for k in 0..20 {
        let (name, var) = &params[k * stride];
        let analytic = to_vec(grads.get(var).expect("every parameter receives a gradient"));
        let i = (0..analytic.len())
            .max_by(|&a, &b| analytic[a].abs().total_cmp(&analytic[b].abs()))
            .unwrap();
        let mut data = to_vec(var.as_tensor());
        let numeric = central_difference(&mut data, i, h, |d| {
            set_var(var, d);
            loss().to_scalar::<f64>().unwrap()
        });
        set_var(var, &data);
        let e = rel_err(analytic[i], numeric, floor);
        if e > worst.0 {
            worst = (e, format!("{name}[{i}]: analytic {} numeric {numeric}", analytic[i]));
        }
    }
    worst
}
