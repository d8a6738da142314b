//! `ddunet`: train, evaluate, predict, ablate and draw heatmaps.
//!
//! Every verb reads an optional flat config file, applies overrides, writes
//! its artefacts under `--out` and prints a JSON report on stdout. Errors go
//! to stderr with a nonzero exit status.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use candle_core::Device;
use clap::{Args, Parser, Subcommand};
use ddunet::ablate::ablate;
use ddunet::checkpoint;
use ddunet::config::TrainConfig;
use ddunet::data::Split;
use ddunet::eval::evaluate;
use ddunet::heatmap::{export_heatmap, LayerTag};
use ddunet::predict::predict_files;
use ddunet::train::{configure_runtime, open_split, train, TrainOptions};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "ddunet", version, about = "Road segmentation with a dual-decoder U-Net")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// `synthetic` or a dataset root with train/val/test folders.
    #[arg(long)]
    dataset: Option<String>,
    /// Output directory (output file for `heatmap`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; checkpoints go to `<out>/last` and `<out>/best`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many steps, leaving a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Write binary masks and overlays for image files or folders of images.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Train and score the three model variants under one budget.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Channel-mean heatmap of one decoder tap, at input resolution.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// large_decoder_out, small_decoder_out, fused or logits.
        #[arg(long, default_value = "fused")]
        layer: String,
    },
}

impl Common {
    /// The config file (or `base` without one) with overrides applied.
    fn config(&self, base: Option<TrainConfig>) -> Result<TrainConfig> {
        let mut cfg = match (&self.config, base) {
            (Some(path), _) => TrainConfig::from_file(path)?,
            (None, Some(cfg)) => cfg,
            (None, None) => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(d) = &self.dataset {
            cfg.set("dataset", d)?;
        }
        for o in &self.overrides {
            let Some((k, v)) = o.split_once('=') else {
                bail!("override `{o}` is not KEY=VALUE");
            };
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

fn write_report(dir: &Path, name: &str, report: &Value) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(report)?).with_context(|| format!("writing {}", path.display()))
}

fn run_train(common: &Common, resume: Option<PathBuf>, stop_after: Option<usize>) -> Result<Value> {
    let cfg = common.config(None)?;
    let out = common.out_dir("runs/train");
    let outcome = train(
        &cfg,
        &TrainOptions {
            out_dir: out.clone(),
            resume,
            stop_after_step: stop_after,
            final_checkpoint_only: false,
        },
    )?;
    let state = checkpoint::read_state(&outcome.last_checkpoint)?;
    let report = json!({
        "command": "train",
        "steps": outcome.steps,
        "total_steps": outcome.total_steps,
        "final_loss": outcome.losses.last().map(|r| r.loss),
        "best_val_miou": state.best_val_miou,
        "epochs": outcome.history,
        "last_checkpoint": outcome.last_checkpoint,
        "best_checkpoint": outcome.best_checkpoint,
    });
    write_report(&out, "train_report.json", &report)?;
    Ok(report)
}

fn run_eval(common: &Common, ckpt: &Path, split: &str, threshold: Option<f64>) -> Result<Value> {
    let split: Split = split.parse()?;
    let state = checkpoint::read_state(ckpt)?;
    let cfg = common.config(Some(state.config))?;
    let (model, _) = checkpoint::load_model(ckpt, cfg.precision.dtype(), &Device::Cpu)?;
    let source = open_split(&cfg, split)?;
    if source.is_empty() {
        bail!("the {} split of {} is empty", split.dir_name(), cfg.dataset);
    }
    let outcome = evaluate(&model, source.as_ref(), threshold.unwrap_or(cfg.threshold))?;
    let out = common.out_dir("runs/eval");
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    outcome.write_csv(&out.join("per_image.csv"))?;
    let mut report = outcome.to_json();
    report["command"] = json!("eval");
    report["split"] = json!(split);
    report["checkpoint"] = json!(ckpt);
    write_report(&out, "eval_report.json", &report)?;
    Ok(report)
}

/// Expand folders into their image files, sorted by name.
fn collect_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("reading {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "tif" | "tiff"))
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        bail!("no input images found");
    }
    Ok(files)
}

fn run_predict(common: &Common, ckpt: &Path, threshold: Option<f64>, inputs: &[PathBuf]) -> Result<Value> {
    let state = checkpoint::read_state(ckpt)?;
    let cfg = common.config(Some(state.config))?;
    let (model, _) = checkpoint::load_model(ckpt, cfg.precision.dtype(), &Device::Cpu)?;
    let files = collect_inputs(inputs)?;
    let out = common.out_dir("runs/predict");
    let threshold = threshold.unwrap_or(cfg.threshold);
    let results = predict_files(&model, &files, &out, threshold);
    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    let items: Vec<Value> = results
        .iter()
        .map(|(path, r)| match r {
            Ok(o) => json!({
                "input": path,
                "mask": o.mask_path,
                "overlay": o.overlay_path,
                "road_pixels": o.road_pixels,
            }),
            Err(e) => json!({ "input": path, "error": e.to_string() }),
        })
        .collect();
    let report = json!({
        "command": "predict",
        "threshold": threshold,
        "images": files.len(),
        "failed": failed,
        "results": items,
    });
    write_report(&out, "predict_report.json", &report)?;
    if failed > 0 {
        emit(&report);
        bail!("{failed} of {} images failed", files.len());
    }
    Ok(report)
}

fn run_ablate(common: &Common) -> Result<Value> {
    let cfg = common.config(None)?;
    let out = common.out_dir("runs/ablate");
    let report = ablate(&cfg, &out)?;
    let failed: Vec<&str> = report
        .rows
        .iter()
        .filter(|r| r.error.is_some())
        .map(|r| r.method.as_str())
        .collect();
    let mut value = serde_json::to_value(&report)?;
    value["command"] = json!("ablate");
    if !failed.is_empty() {
        emit(&value);
        bail!("ablation variants failed: {}", failed.join(", "));
    }
    Ok(value)
}

fn run_heatmap(common: &Common, ckpt: &Path, image: &Path, layer: &str) -> Result<Value> {
    let tag: LayerTag = layer.parse()?;
    let state = checkpoint::read_state(ckpt)?;
    let cfg = common.config(Some(state.config))?;
    let (model, _) = checkpoint::load_model(ckpt, cfg.precision.dtype(), &Device::Cpu)?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(format!("heatmap_{tag}.png")));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    export_heatmap(&model, image, tag, &out)?;
    Ok(json!({
        "command": "heatmap",
        "layer": tag.as_str(),
        "image": image,
        "output": out,
    }))
}

/// Print a report on stdout. A closed pipe (`| head`) is not an error.
fn emit(report: &Value) {
    let text = serde_json::to_string_pretty(report).expect("reports serialise");
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::Train { common, resume, stop_after } => run_train(&common, resume, stop_after),
        Command::Eval { common, checkpoint, split, threshold } => run_eval(&common, &checkpoint, &split, threshold),
        Command::Predict { common, checkpoint, threshold, inputs } => {
            run_predict(&common, &checkpoint, threshold, &inputs)
        }
        Command::Ablate { common } => run_ablate(&common),
        Command::Heatmap { common, checkpoint, image, layer } => run_heatmap(&common, &checkpoint, &image, &layer),
    }
}

fn main() -> ExitCode {
    // must precede the first tensor operation
    configure_runtime();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(report) => {
            emit(&report);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
