//! Analytic gradients against central differences, in double precision.

mod common;

use common::{cbam_grad_error, dcam_grad_error, end_to_end, end_to_end_grad_error, focal_grad_errors, END_TO_END_MODES};
use ddunet::loss::{focal_loss_with_logits, FocalConfig};
use ddunet::nn::Mode;

#[test]
fn focal_loss_gradient() {
    for (case, err, at) in focal_grad_errors() {
        assert!(err < 1e-6, "{case}: {err} at {at}");
    }
}

#[test]
fn cbam_gradient() {
    let (err, at) = cbam_grad_error();
    assert!(err < 1e-4, "{err} at {at}");
}

#[test]
fn dcam_gradient() {
    let (err, at) = dcam_grad_error();
    assert!(err < 1e-4, "{err} at {at}");
}

#[test]
fn end_to_end_gradient_probe() {
    for (mode, h, floor) in END_TO_END_MODES {
        let (err, at) = end_to_end_grad_error(mode, h, floor);
        println!("{mode:?}: worst relative error {err:.2e} ({at})");
        assert!(err < 1e-3, "{mode:?}: {err} at {at}");
    }
}

#[test]
fn every_submodule_receives_gradient() {
    let (model, x, y) = end_to_end();
    let logits = model.forward(&x, Mode::Train).unwrap();
    let grads = focal_loss_with_logits(&logits, &y, &FocalConfig::default()).unwrap().backward().unwrap();
    for prefix in ["encoder.", "dcam.", "large_decoder.", "small_decoder.", "head."] {
        let norm: f64 = model
            .store()
            .params()
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .filter_map(|(_, v)| grads.get(v))
            .map(|g| g.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap())
            .sum();
        assert!(norm > 0.0, "{prefix} has zero gradient");
    }
}
