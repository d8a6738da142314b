//! Three-variant ablation: baseline U-Net, + attention module, + attention
//! module and small decoder, trained and scored under one seed and budget.

use std::fs;
use std::path::Path;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::metrics::MetricsReport;
use crate::model::Variant;
use crate::train::{open_split, train, TrainOptions};

/// Report columns, in table order.
pub const ABLATION_COLUMNS: [&str; 5] = ["Accuracy", "Precision", "Recall", "F1_Score", "mIoU"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub method: String,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

impl AblationRow {
    pub fn values(&self) -> [Option<f64>; 5] {
        match &self.metrics {
            Some(m) => [m.accuracy, m.precision, m.recall, m.f1, m.miou],
            None => [None; 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub split: Split,
    pub rows: Vec<AblationRow>,
    /// Methods by descending mIoU; rows without a score are left out.
    pub miou_ordering: Vec<String>,
}

pub fn variant_config(base: &TrainConfig, variant: Variant) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.model = cfg.model.with_variant(variant);
    cfg
}

fn slug(v: Variant) -> &'static str {
    match v {
        Variant::Baseline => "unet",
        Variant::WithDcam => "unet_dcam",
        Variant::WithDcamDualDecoder => "unet_dcam_dual",
    }
}

fn run_variant(cfg: &TrainConfig, out: &Path, split: Split) -> Result<MetricsReport> {
    let outcome = train(
        cfg,
        &TrainOptions {
            out_dir: out.to_path_buf(),
            final_checkpoint_only: true,
            ..Default::default()
        },
    )?;
    let (model, _) = checkpoint::load_model(&outcome.best_checkpoint, cfg.precision.dtype(), &Device::Cpu)?;
    let source = open_split(cfg, split)?;
    let eval = evaluate(&model, source.as_ref(), cfg.threshold)?;
    eval.write_json(&out.join("eval.json"))?;
    Ok(eval.pooled)
}

/// Train and score every variant. A failing variant is recorded in its row
/// and the others still run.
pub fn ablate(base: &TrainConfig, out_dir: &Path) -> Result<AblationReport> {
    base.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let split = if open_split(base, Split::Test)?.is_empty() {
        Split::Val
    } else {
        Split::Test
    };
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let cfg = variant_config(base, variant);
        let out = out_dir.join(slug(variant));
        log::info!("ablation: training {}", variant.label());
        let (metrics, error) = match run_variant(&cfg, &out, split) {
            Ok(m) => (Some(m), None),
            Err(e) => {
                log::error!("ablation variant {} failed: {e}", variant.label());
                (None, Some(e.to_string()))
            }
        };
        rows.push(AblationRow {
            variant,
            method: variant.label().to_string(),
            metrics,
            error,
        });
    }
    let mut scored: Vec<(f64, String)> = rows
        .iter()
        .filter_map(|r| r.metrics.and_then(|m| m.miou).map(|v| (v, r.method.clone())))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let report = AblationReport {
        split,
        rows,
        miou_ordering: scored.into_iter().map(|(_, m)| m).collect(),
    };
    report.write_csv(&out_dir.join("ablation.csv"))?;
    let path = out_dir.join("ablation.json");
    fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

impl AblationReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["Methods"];
        header.extend(ABLATION_COLUMNS);
        w.write_record(&header)?;
        for r in &self.rows {
            let mut row = vec![r.method.clone()];
            row.extend(r.values().iter().map(|v| v.map(|v| format!("{v:.4}")).unwrap_or_default()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
