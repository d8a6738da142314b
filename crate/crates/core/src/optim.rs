//! Adam with weight decay, and the polynomial learning-rate schedule.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `lr0 · (1 − step / total_steps)^power`. Steps past the end give 0.
pub fn poly_lr(step: usize, total_steps: usize, lr0: f64, power: f64) -> f64 {
    let total = total_steps.max(1);
    if step > total {
        log::warn!("poly schedule queried at step {step} beyond total {total}; using 0");
        return 0.0;
    }
    lr0 * (1.0 - step as f64 / total as f64).powf(power)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Decoupled: `p ← p − lr·wd·p` separately from the Adam step.
    /// Coupled: `wd·p` is added to the gradient before the moments.
    pub decoupled_weight_decay: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            decoupled_weight_decay: true,
        }
    }
}

struct Slot {
    name: String,
    param: Var,
    m: Tensor,
    v: Tensor,
}

pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    slots: Vec<Slot>,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, cfg: AdamConfig) -> Result<Self> {
        let slots = params
            .into_iter()
            .map(|(name, param)| {
                let z = param.as_tensor().zeros_like()?;
                Ok(Slot {
                    name,
                    param,
                    m: z.clone(),
                    v: z,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, step: 0, slots })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// L2 norm of all gradients present in `grads`.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for s in &self.slots {
            if let Some(g) = grads.get(&s.param) {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// One update at learning rate `lr`. Gradients are scaled by `grad_scale`
    /// first (used for norm clipping; 1.0 otherwise).
    pub fn step(&mut self, grads: &GradStore, lr: f64, grad_scale: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            decoupled_weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for s in &mut self.slots {
            let Some(g) = grads.get(&s.param) else {
                continue;
            };
            let p = s.param.as_tensor().detach();
            let mut g = g.detach();
            if grad_scale != 1.0 {
                g = (g * grad_scale)?;
            }
            if weight_decay != 0.0 && !decoupled_weight_decay {
                g = (g + (&p * weight_decay)?)?;
            }
            s.m = ((&s.m * beta1)? + (&g * (1.0 - beta1))?)?;
            s.v = ((&s.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&s.m / bc1)?;
            let v_hat = (&s.v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            let mut next = p.clone();
            if weight_decay != 0.0 && decoupled_weight_decay {
                next = (next - (&p * (lr * weight_decay))?)?;
            }
            next = (next - (update * lr)?)?;
            s.param.set(&next)?;
        }
        Ok(())
    }

    /// Moment tensors as `adam.m.<name>` / `adam.v.<name>`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        self.slots
            .iter()
            .flat_map(|s| {
                [
                    (format!("adam.m.{}", s.name), s.m.clone()),
                    (format!("adam.v.{}", s.name), s.v.clone()),
                ]
            })
            .collect()
    }

    pub fn load_state(&mut self, step: u64, tensors: &[(String, Tensor)]) -> Result<()> {
        let lookup = |key: &str| tensors.iter().find(|(n, _)| n == key).map(|(_, t)| t);
        for s in &mut self.slots {
            for (prefix, slot) in [("adam.m.", &mut s.m), ("adam.v.", &mut s.v)] {
                let key = format!("{prefix}{}", s.name);
                let t = lookup(&key)
                    .ok_or_else(|| Error::Archive(format!("optimizer state lacks `{key}`")))?;
                if t.dims() != s.param.dims() {
                    return Err(Error::Archive(format!(
                        "optimizer tensor `{key}` has shape {:?}, parameter has {:?}",
                        t.dims(),
                        s.param.dims()
                    )));
                }
                *slot = t.to_dtype(s.param.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(poly_lr(0, 100, 1e-3, 0.9), 1e-3);
        assert_eq!(poly_lr(100, 100, 1e-3, 0.9), 0.0);
        assert_eq!(poly_lr(150, 100, 1e-3, 0.9), 0.0);
        let half = poly_lr(50, 100, 1e-3, 0.9);
        assert!((half - 1e-3 * 0.5f64.powf(0.9)).abs() < 1e-15);
    }

    #[test]
    fn schedule_non_increasing() {
        let lrs: Vec<f64> = (0..=37).map(|s| poly_lr(s, 37, 0.01, 0.9)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
