//! Checkpoint directories.
//!
//! ```text
//! <dir>/model.safetensors      parameters and batch-norm statistics
//! <dir>/optimizer.safetensors  Adam moments (absent for weight-only exports)
//! <dir>/state.json             counters, config snapshot, metric history
//! <dir>/config.txt             the config in its flat file form
//! ```

use std::fs;
use std::path::Path;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::DduNet;
use crate::optim::Adam;

pub const MODEL_FILE: &str = "model.safetensors";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const STATE_FILE: &str = "state.json";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Optimisation steps completed at the end of this epoch.
    pub step: usize,
    pub mean_loss: f64,
    pub val: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    /// Optimisation steps completed.
    pub step: usize,
    pub total_steps: usize,
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
    pub best_val_miou: Option<f64>,
    pub deterministic: bool,
}

pub fn save(dir: &Path, model: &DduNet, adam: Option<&Adam>, state: &CheckpointState) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    archive::write_vars(&dir.join(MODEL_FILE), &model.store().all())?;
    if let Some(adam) = adam {
        archive::write(&dir.join(OPTIMIZER_FILE), &adam.state_tensors())?;
    }
    let json = serde_json::to_string_pretty(state)?;
    let path = dir.join(STATE_FILE);
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, state.config.to_flat_string()).map_err(|e| Error::io(&path, e))
}

pub fn read_state(dir: &Path) -> Result<CheckpointState> {
    let path = dir.join(STATE_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Load every model tensor from `dir`. The archive and the model must name
/// exactly the same tensors with the same shapes.
pub fn load_weights(dir: &Path, model: &DduNet) -> Result<()> {
    let path = dir.join(MODEL_FILE);
    let report = archive::load_into(&path, &model.store().all())?;
    if !report.missing.is_empty() || !report.unexpected.is_empty() {
        return Err(Error::Archive(format!(
            "{} does not match the model configuration: missing [{}], unexpected [{}]",
            path.display(),
            report.missing.join(", "),
            report.unexpected.join(", ")
        )));
    }
    Ok(())
}

/// Rebuild the model recorded in a checkpoint and load its weights.
pub fn load_model(dir: &Path, dtype: DType, device: &Device) -> Result<(DduNet, CheckpointState)> {
    let state = read_state(dir)?;
    let mut model_cfg = state.config.model.clone();
    // The checkpoint already holds the encoder weights.
    model_cfg.encoder.pretrained = None;
    let model = DduNet::new(&model_cfg, state.config.seed, dtype, device)?;
    load_weights(dir, &model)?;
    Ok((model, state))
}

pub fn load_optimizer(dir: &Path, adam: &mut Adam, step: usize) -> Result<()> {
    let tensors = archive::read(&dir.join(OPTIMIZER_FILE))?;
    adam.load_state(step as u64, &tensors)
}
