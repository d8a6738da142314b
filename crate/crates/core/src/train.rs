//! The training loop: focal loss, Adam with weight decay, per-step poly
//! schedule, per-epoch validation, best and last checkpoints, resume.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::Device;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointState, EpochRecord};
use crate::config::{DatasetSpec, TrainConfig};
use crate::data::{
    build_dataset_index, stack_batch, IndexedSource, SampleSource, Split, SyntheticSource,
};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::loss::focal_loss_with_logits;
use crate::model::DduNet;
use crate::nn::Mode;
use crate::optim::{poly_lr, Adam};

pub const DETERMINISTIC_ENV: &str = "DDUNET_DETERMINISTIC";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const HISTORY_FILE: &str = "history.json";

/// True when `DDUNET_DETERMINISTIC=1`.
pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v.trim() == "1")
}

/// In deterministic mode, pin the tensor kernels to one worker thread. Must
/// run before the first tensor operation of the process to take effect.
pub fn configure_runtime() -> bool {
    let det = deterministic_mode();
    if det && std::env::var_os("RAYON_NUM_THREADS").is_none() {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    det
}

/// Mix a base seed with a purpose tag and a counter (splitmix64 finaliser).
pub fn derive_seed(seed: u64, tag: u64, n: u64) -> u64 {
    let mut z = seed
        ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ n.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHUFFLE_TAG: u64 = 1;
const AUGMENT_TAG: u64 = 2;

/// Sample source for one split of the configured dataset.
pub fn open_split(cfg: &TrainConfig, split: Split) -> Result<Box<dyn SampleSource>> {
    Ok(match &cfg.dataset {
        DatasetSpec::Synthetic => {
            let s = &cfg.synthetic;
            let count = match split {
                Split::Train => s.train_samples,
                Split::Val => s.val_samples,
                Split::Test => s.test_samples,
            };
            Box::new(SyntheticSource::new(cfg.seed, split, count, s.size, s.params.clone()))
        }
        DatasetSpec::Directory(root) => {
            let index = Arc::new(build_dataset_index(root, cfg.tile_size, cfg.tile_stride)?);
            Box::new(IndexedSource::new(index, split, cfg.mask_threshold))
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// 1-based optimisation step.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    /// Continue from this checkpoint directory.
    pub resume: Option<PathBuf>,
    /// Save `last` and return after this many completed steps.
    pub stop_after_step: Option<usize>,
    /// Skip the `last` checkpoint at epoch ends (it is still written at the end).
    pub final_checkpoint_only: bool,
}

pub struct TrainOutcome {
    pub model: DduNet,
    pub losses: Vec<LossRecord>,
    pub history: Vec<EpochRecord>,
    pub steps: usize,
    pub total_steps: usize,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

pub fn batches_per_epoch(samples: usize, batch_size: usize) -> usize {
    samples.div_ceil(batch_size.max(1))
}

pub fn total_steps(cfg: &TrainConfig, samples: usize) -> usize {
    let full = cfg.epochs * batches_per_epoch(samples, cfg.batch_size);
    cfg.max_steps.map_or(full, |m| m.min(full))
}

/// Train on the splits of the configured dataset.
pub fn train(cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let cfg = match &opts.resume {
        Some(dir) => checkpoint::read_state(dir)?.config,
        None => cfg.clone(),
    };
    let train_src = open_split(&cfg, Split::Train)?;
    let val_src = open_split(&cfg, Split::Val)?;
    train_on(&cfg, train_src.as_ref(), Some(val_src.as_ref()), opts)
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn write_loss_log(path: &Path, losses: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for rec in losses {
        w.serialize(rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Train on explicit sample sources.
pub fn train_on(
    cfg: &TrainConfig,
    train_src: &dyn SampleSource,
    val_src: Option<&dyn SampleSource>,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let deterministic = configure_runtime();
    if train_src.is_empty() {
        return Err(Error::Dataset("the training split is empty".into()));
    }
    let val_src = val_src.filter(|v| !v.is_empty());
    let out = &opts.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let last_dir = out.join("last");
    let best_dir = out.join("best");
    let log_path = out.join(LOSS_LOG_FILE);

    let dtype = cfg.precision.dtype();
    let device = Device::Cpu;
    let n = train_src.len();
    let bpe = batches_per_epoch(n, cfg.batch_size);
    let total = total_steps(cfg, n);

    let model = DduNet::new(&cfg.model, cfg.seed, dtype, &device)?;
    let mut adam = Adam::new(model.store().params(), cfg.adam)?;
    let mut state = CheckpointState {
        step: 0,
        total_steps: total,
        config: cfg.clone(),
        history: Vec::new(),
        best_val_miou: None,
        deterministic,
    };
    let mut losses = Vec::new();
    if let Some(dir) = &opts.resume {
        let saved = checkpoint::read_state(dir)?;
        if saved.config.model != cfg.model {
            return Err(Error::Config(
                "resume checkpoint was trained with a different model configuration".into(),
            ));
        }
        checkpoint::load_weights(dir, &model)?;
        checkpoint::load_optimizer(dir, &mut adam, saved.step)?;
        let prior = dir.join("..").join(LOSS_LOG_FILE);
        if prior.exists() {
            losses = read_loss_log(&prior)?;
            losses.retain(|r: &LossRecord| r.step <= saved.step);
        }
        state.step = saved.step;
        state.history = saved.history;
        state.best_val_miou = saved.best_val_miou;
        log::info!("resuming at step {} of {}", state.step, total);
    }

    let mut epoch_losses: Vec<f64> = losses
        .iter()
        .filter(|r| r.epoch == state.step / bpe + 1)
        .map(|r| r.loss)
        .collect();
    while state.step < total {
        let epoch = state.step / bpe;
        let within = state.step % bpe;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            SHUFFLE_TAG,
            epoch as u64,
        )));
        if within == 0 {
            epoch_losses.clear();
        }
        for b in within..bpe {
            if state.step >= total {
                break;
            }
            let step = state.step + 1;
            let lr = poly_lr(state.step, total, cfg.initial_lr, cfg.poly_power);
            let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n)];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, AUGMENT_TAG, step as u64));
            let samples = idx
                .iter()
                .map(|&i| {
                    let s = train_src.get(i)?;
                    Ok(if cfg.augment { s.augment(&mut rng) } else { s })
                })
                .collect::<Result<Vec<_>>>()?;
            let (x, y) = stack_batch(&samples, dtype, &device)?;
            let logits = model.forward(&x, Mode::Train)?;
            let loss = focal_loss_with_logits(&logits, &y, &cfg.focal)?;
            let loss_val = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            let grads = loss.backward()?;
            let grad_norm = adam.grad_norm(&grads)?;
            if !loss_val.is_finite() || !grad_norm.is_finite() {
                write_json(
                    &out.join("nonfinite.json"),
                    &serde_json::json!({
                        "step": step,
                        "lr": lr,
                        "loss": loss_val.to_string(),
                        "grad_norm": grad_norm.to_string(),
                    }),
                )?;
                return Err(Error::NonFiniteLoss { step, lr, grad_norm });
            }
            let scale = match cfg.grad_clip {
                Some(c) if grad_norm > c => c / grad_norm,
                _ => 1.0,
            };
            adam.step(&grads, lr, scale)?;
            state.step = step;
            epoch_losses.push(loss_val);
            losses.push(LossRecord {
                step,
                epoch: epoch + 1,
                lr,
                loss: loss_val,
            });
            log::debug!("step {step}/{total} lr {lr:.3e} loss {loss_val:.6}");
            if opts.stop_after_step == Some(step) && step < total {
                checkpoint::save(&last_dir, &model, Some(&adam), &state)?;
                write_loss_log(&log_path, &losses)?;
                return Ok(TrainOutcome {
                    model,
                    losses,
                    history: state.history,
                    steps: step,
                    total_steps: total,
                    last_checkpoint: last_dir,
                    best_checkpoint: best_dir,
                });
            }
        }
        // End of an epoch (or of a step-capped run).
        let val = match val_src {
            Some(v) => Some(evaluate(&model, v, cfg.threshold)?.pooled),
            None => None,
        };
        let mean_loss = epoch_losses.iter().sum::<f64>() / epoch_losses.len().max(1) as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            step: state.step,
            mean_loss,
            val,
        };
        log::info!(
            "epoch {} step {}/{} loss {:.5} val miou {}",
            record.epoch,
            state.step,
            total,
            mean_loss,
            val.and_then(|v| v.miou).map_or("-".into(), |m| format!("{m:.4}"))
        );
        state.history.push(record);
        let finished = state.step >= total;
        let miou = val.and_then(|v| v.miou);
        let improved = match (miou, state.best_val_miou) {
            (Some(m), Some(best)) => m > best,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            state.best_val_miou = miou;
            checkpoint::save(&best_dir, &model, Some(&adam), &state)?;
        }
        if finished || !opts.final_checkpoint_only {
            checkpoint::save(&last_dir, &model, Some(&adam), &state)?;
        }
        write_loss_log(&log_path, &losses)?;
        write_json(&out.join(HISTORY_FILE), &state.history)?;
    }

    // Without a validation split there is nothing to rank by: best is last.
    if !best_dir.join(checkpoint::MODEL_FILE).exists() {
        checkpoint::save(&best_dir, &model, Some(&adam), &state)?;
    }
    Ok(TrainOutcome {
        model,
        losses,
        history: state.history,
        steps: state.step,
        total_steps: total,
        last_checkpoint: last_dir,
        best_checkpoint: best_dir,
    })
}
