//! Focal loss for binary road masks.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalConfig {
    pub gamma: f64,
    /// Probabilities are clamped to `[floor, 1 − floor]` before the logarithm.
    pub probability_floor: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            probability_floor: 1e-7,
        }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("focal gamma must be ≥ 0, got {}", self.gamma)));
        }
        if !(self.probability_floor > 0.0 && self.probability_floor < 0.5) {
            return Err(Error::Config(format!(
                "probability floor must lie in (0, 0.5), got {}",
                self.probability_floor
            )));
        }
        Ok(())
    }
}

/// Mean over pixels of `−(1 − p_t)^γ · ln p_t`, where `p_t = p` on road
/// pixels and `1 − p` on background. Natural log, no class weighting.
pub fn focal_loss(probs: &Tensor, targets: &Tensor, cfg: &FocalConfig) -> Result<Tensor> {
    cfg.validate()?;
    if probs.dims() != targets.dims() {
        return Err(Error::InvalidArgument(format!(
            "probabilities {:?} and targets {:?} differ in shape",
            probs.dims(),
            targets.dims()
        )));
    }
    let floor = cfg.probability_floor;
    let p = probs.clamp(floor, 1.0 - floor)?;
    let t = targets.to_dtype(probs.dtype())?;
    let one_minus_t = t.affine(-1.0, 1.0)?;
    let p_t = ((&p * &t)? + (p.affine(-1.0, 1.0)? * one_minus_t)?)?;
    let ce = p_t.log()?.neg()?;
    let loss = if cfg.gamma == 0.0 {
        ce
    } else {
        (p_t.affine(-1.0, 1.0)?.powf(cfg.gamma)? * ce)?
    };
    Ok(loss.mean_all()?)
}

/// Focal loss on raw logits (probabilities via the logistic function).
pub fn focal_loss_with_logits(
    logits: &Tensor,
    targets: &Tensor,
    cfg: &FocalConfig,
) -> Result<Tensor> {
    focal_loss(&sigmoid(logits)?, targets, cfg)
}
