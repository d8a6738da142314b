//! Inference on arbitrary-size images and pooled evaluation over a split.

use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{pad_to_multiple, SampleSource};
use crate::encoder::INPUT_MULTIPLE;
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, mean_of, ConfusionCounts, MetricsReport, METRIC_COLUMNS};
use crate::model::{predict_mask, DduNet};
use crate::nn::Mode;

/// Logits for a (B, 3, H, W) image of any size: reflect-pad to a multiple of
/// 32, run the network in eval mode, crop back to H × W.
pub fn infer_logits(model: &DduNet, image: &Tensor) -> Result<Tensor> {
    let (padded, geom) = pad_to_multiple(image, INPUT_MULTIPLE)?;
    let logits = model.forward(&padded, Mode::Eval)?;
    geom.crop(&logits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub name: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub threshold: f64,
    pub images: usize,
    /// Metrics of the confusion counts summed over every pixel of the split.
    pub pooled: MetricsReport,
    #[serde(skip)]
    pub per_image: Vec<ImageResult>,
}

pub fn evaluate(model: &DduNet, source: &dyn SampleSource, threshold: f64) -> Result<EvalOutcome> {
    if source.is_empty() {
        return Err(Error::Dataset("nothing to evaluate: the split is empty".into()));
    }
    let mut pooled = ConfusionCounts::default();
    let mut per_image = Vec::with_capacity(source.len());
    for i in 0..source.len() {
        let sample = source.get(i)?;
        let image = sample.image_tensor(model.dtype(), model.device())?;
        let logits = infer_logits(model, &image)?;
        let pred = predict_mask(&logits, threshold)?;
        let gt = sample.mask_tensor(DType::U8, model.device())?;
        let counts = ConfusionCounts::from_tensors(&pred, &gt)?;
        pooled += counts;
        per_image.push(ImageResult {
            name: source.name(i),
            report: compute_metrics(counts)?,
        });
    }
    Ok(EvalOutcome {
        threshold,
        images: per_image.len(),
        pooled: compute_metrics(pooled)?,
        per_image,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl EvalOutcome {
    /// Unweighted mean over images, for reference next to the pooled numbers.
    pub fn per_image_mean(&self) -> [Option<f64>; 6] {
        let reports: Vec<MetricsReport> = self.per_image.iter().map(|r| r.report).collect();
        mean_of(&reports)
    }

    /// One row per image plus a final `mean` row. Undefined values are empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["image", "tp", "fp", "fn", "tn"];
        header.extend(METRIC_COLUMNS);
        w.write_record(&header)?;
        for r in &self.per_image {
            let c = r.report.counts;
            let mut row = vec![
                r.name.clone(),
                c.tp.to_string(),
                c.fp.to_string(),
                c.fn_.to_string(),
                c.tn.to_string(),
            ];
            row.extend(r.report.values().into_iter().map(cell));
            w.write_record(&row)?;
        }
        let mut row = vec!["mean".to_string(), String::new(), String::new(), String::new(), String::new()];
        row.extend(self.per_image_mean().into_iter().map(cell));
        w.write_record(&row)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mean: serde_json::Map<String, serde_json::Value> = METRIC_COLUMNS
            .iter()
            .zip(self.per_image_mean())
            .map(|(k, v)| (k.to_string(), serde_json::json!(v)))
            .collect();
        serde_json::json!({
            "threshold": self.threshold,
            "images": self.images,
            "pooled": self.pooled,
            "per_image_mean": mean,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json())?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
