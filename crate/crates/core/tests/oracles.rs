//! Block forwards against scalar loop implementations on fixed weights.

mod common;

use candle_core::{DType, Device, Tensor};
use common::Arr;
use ddunet::attention::{Cbam, CbamConfig};
use ddunet::dcam::{Dcam, DcamConfig};
use ddunet::decoder::{DecoderConfig, FuseHead};
use ddunet::heatmap::{channel_mean, heatmap, normalize_to_u8, LayerTag};
use ddunet::model::{DduNet, ModelConfig};
use ddunet::nn::{Mode, ParamStore};

const TOL: f64 = 1e-12;

#[test]
fn cbam_matches_loop() {
    let store = ParamStore::new(3, DType::F64, &Device::Cpu);
    let cbam = Cbam::new(&store.root().pp("cbam"), 4, &CbamConfig { reduction: 2, ..Default::default() }).unwrap();
    common::fill_fixed(&store, 1.0);
    let x = common::input([2, 4, 6, 5], 0.71);
    let t = x.to_tensor();

    let mc = cbam.channel_attention(&t).unwrap().to_vec2::<f64>().unwrap();
    let mc_ref = common::channel_gate(&x, &store, "cbam");
    for (a, b) in mc.iter().flatten().zip(mc_ref.iter().flatten()) {
        assert!((a - b).abs() < TOL, "{a} vs {b}");
    }
    let ms = cbam.spatial_attention(&t).unwrap();
    assert!(common::spatial_gate(&x, &store, "cbam").max_abs_diff(&ms) < TOL);

    let y = cbam.forward(&t).unwrap();
    let diff = common::cbam(&x, &store, "cbam").max_abs_diff(&y);
    assert!(diff < TOL, "{diff}");
}

#[test]
fn cbam_on_single_pixel_map() {
    let store = ParamStore::new(4, DType::F64, &Device::Cpu);
    let cbam = Cbam::new(&store.root().pp("g"), 3, &CbamConfig::default()).unwrap();
    common::fill_fixed(&store, 1.0);
    let x = common::input([2, 3, 1, 1], 1.9);
    let y = cbam.forward(&x.to_tensor()).unwrap();
    assert!(common::cbam(&x, &store, "g").max_abs_diff(&y) < TOL);
}

#[test]
fn dcam_matches_loop_in_both_modes() {
    let store = ParamStore::new(5, DType::F64, &Device::Cpu);
    let cfg = DcamConfig {
        cbam: CbamConfig { reduction: 1, ..Default::default() },
        ..DcamConfig::new(2)
    };
    let dcam = Dcam::new(&store.root().pp("dcam"), &cfg).unwrap();
    common::fill_fixed(&store, 1.0);
    let x = common::input([1, 2, 5, 5], 0.53);
    let t = x.to_tensor();
    let eval = dcam.forward(&t, Mode::Eval).unwrap();
    let diff = common::dcam(&x, &store, "dcam", &[1, 2, 4], false).max_abs_diff(&eval);
    assert!(diff < TOL, "eval {diff}");
    let reference = common::dcam(&x, &store, "dcam", &[1, 2, 4], true);
    let train = dcam.forward(&t, Mode::Train).unwrap();
    let diff = reference.max_abs_diff(&train);
    assert!(diff < TOL, "train {diff}");
}

#[test]
fn fuse_and_head_matches_loop() {
    let store = ParamStore::new(6, DType::F64, &Device::Cpu);
    let cfg = DecoderConfig {
        fused_channels: 4,
        head_channels: 3,
        ..DecoderConfig::scaled(0.125)
    };
    let head = FuseHead::new(&store.root().pp("head"), 3, 2, &cfg).unwrap();
    common::fill_fixed(&store, 1.0);
    let large = common::input([1, 3, 8, 8], 0.37);
    let small = common::input([1, 2, 8, 8], 1.13);
    for train in [false, true] {
        let mode = if train { Mode::Train } else { Mode::Eval };
        let out = head.forward(&large.to_tensor(), Some(&small.to_tensor()), mode).unwrap();
        let (fused, logits) = common::fuse_and_head(&large, Some(&small), &store, "head", 4, 3, train);
        assert!(fused.max_abs_diff(&out.fused) < TOL);
        let diff = logits.max_abs_diff(&out.logits);
        assert!(diff < TOL, "{diff}");
        assert_eq!(out.logits.dims(), &[1, 1, 16, 16]);
    }
}

#[test]
fn channel_mean_matches_loop() {
    let x = common::input([2, 5, 4, 3], 0.91);
    let (h, w, mean) = channel_mean(&x.to_tensor()).unwrap();
    assert_eq!((h, w), (4, 3));
    for (a, b) in mean.iter().zip(common::channel_mean(&x)) {
        assert!((a - b).abs() < TOL);
    }
}

#[test]
fn heatmap_of_model_taps() {
    let model = DduNet::new(&ModelConfig::small(0.125), 2, DType::F64, &Device::Cpu).unwrap();
    let img = Tensor::rand(0f64, 1.0, (1, 3, 40, 36), &Device::Cpu).unwrap();
    let padded = Tensor::rand(0f64, 1.0, (1, 3, 32, 32), &Device::Cpu).unwrap();
    let taps = model.forward_taps(&padded, Mode::Eval).unwrap();

    // the fused tap's mean agrees with the loop
    let fused = Arr::from_tensor(&taps.fused);
    let (_, _, mean) = channel_mean(&taps.fused).unwrap();
    for (a, b) in mean.iter().zip(common::channel_mean(&fused)) {
        assert!((a - b).abs() < TOL);
    }

    // logits are already at input resolution, so no resampling is involved
    let hm = heatmap(&model, &padded, LayerTag::Logits).unwrap();
    let expected = normalize_to_u8(&common::channel_mean(&Arr::from_tensor(&taps.logits)));
    assert_eq!(hm.as_raw(), &expected);

    for tag in LayerTag::ALL {
        let hm = heatmap(&model, &img, tag).unwrap();
        assert_eq!(hm.dimensions(), (36, 40), "{tag}");
    }
}
