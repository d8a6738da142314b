//! End-to-end runs of the `ddunet` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use serde_json::Value;

const TINY: &str = "\
model.depth = small
model.width = 0.125
dataset = synthetic
synthetic.size = 32
synthetic.train_samples = 4
synthetic.val_samples = 2
synthetic.test_samples = 2
batch_size = 2
epochs = 2
";

fn ddunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddunet"))
        .args(args)
        .env("DDUNET_DETERMINISTIC", "1")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn report(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON document")
}

fn failure(out: &Output) -> String {
    assert!(!out.status.success(), "expected failure, got {}", String::from_utf8_lossy(&out.stdout));
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.conf");
    fs::write(&path, TINY).unwrap();
    path
}

#[test]
fn train_then_eval_predict_and_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = dir.path().join("run");
    let r = report(&ddunet(&["train", "--config", s(&cfg), "--seed", "3", "--out", s(&run)]));
    assert_eq!(r["command"], "train");
    assert_eq!(r["steps"], 4);
    assert!(r["final_loss"].as_f64().unwrap().is_finite());
    assert!(run.join("train_report.json").exists());
    let saved = fs::read_to_string(run.join("best/config.txt")).unwrap();
    assert!(saved.contains("seed = 3"));
    let best = run.join("best");

    let ev = dir.path().join("eval");
    let r = report(&ddunet(&["eval", "--checkpoint", s(&best), "--split", "val", "--out", s(&ev)]));
    assert_eq!(r["images"], 2);
    assert_eq!(r["split"], "val");
    for k in ["accuracy", "precision", "recall", "f1", "iou_road", "miou"] {
        assert!(r["pooled"].get(k).is_some(), "{k}");
    }
    assert!(ev.join("per_image.csv").exists());
    let on_disk: Value = serde_json::from_str(&fs::read_to_string(ev.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(on_disk, r);

    let images = dir.path().join("images");
    fs::create_dir_all(&images).unwrap();
    for name in ["a.png", "b.png"] {
        RgbImage::from_fn(40, 24, |x, y| Rgb([x as u8 * 6, y as u8 * 9, 90])).save(images.join(name)).unwrap();
    }
    let pred = dir.path().join("pred");
    let r = report(&ddunet(&["predict", "--checkpoint", s(&best), "--out", s(&pred), s(&images)]));
    assert_eq!(r["images"], 2);
    assert_eq!(r["failed"], 0);
    for f in ["a_mask.png", "a_overlay.png", "b_mask.png", "b_overlay.png"] {
        assert_eq!(image::open(pred.join(f)).unwrap().width(), 40, "{f}");
    }

    let hm = dir.path().join("maps/fused.png");
    let r = report(&ddunet(&[
        "heatmap", "--checkpoint", s(&best), "--image", s(&images.join("a.png")), "--layer", "fused", "--out", s(&hm),
    ]));
    assert_eq!(r["layer"], "fused");
    let img = image::open(&hm).unwrap();
    assert_eq!((img.width(), img.height()), (40, 24));

    let err = failure(&ddunet(&[
        "heatmap", "--checkpoint", s(&best), "--image", s(&images.join("a.png")), "--layer", "stage9",
    ]));
    assert!(err.contains("large_decoder_out") && err.contains("logits"), "{err}");

    // one unreadable input fails the command but the other is still written
    let mixed = dir.path().join("mixed");
    fs::create_dir_all(&mixed).unwrap();
    fs::write(mixed.join("broken.png"), b"junk").unwrap();
    fs::copy(images.join("a.png"), mixed.join("good.png")).unwrap();
    let out = dir.path().join("pred2");
    let err = failure(&ddunet(&["predict", "--checkpoint", s(&best), "--out", s(&out), s(&mixed)]));
    assert!(err.contains("1 of 2"), "{err}");
    assert!(out.join("good_mask.png").exists());
}

#[test]
fn resumed_training_continues_the_step_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = dir.path().join("run");
    let r = report(&ddunet(&["train", "--config", s(&cfg), "--out", s(&run), "--stop-after", "1"]));
    assert_eq!(r["steps"], 1);
    let r = report(&ddunet(&["train", "--out", s(&run), "--resume", s(&run.join("last"))]));
    assert_eq!(r["steps"], 4);
}

#[test]
fn ablate_reports_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("abl");
    let r = report(&ddunet(&["ablate", "--config", s(&cfg), "--set", "epochs=1", "--out", s(&out)]));
    let rows = r["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(r["miou_ordering"].as_array().unwrap().len(), 3);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "Methods,Accuracy,Precision,Recall,F1_Score,mIoU");
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn configuration_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conf");
    fs::write(&bad, format!("{TINY}learning_rate = 0.1\n")).unwrap();
    let err = failure(&ddunet(&["train", "--config", s(&bad), "--out", s(dir.path())]));
    assert!(err.contains("learning_rate"), "{err}");

    let cfg = write_config(dir.path());
    let err = failure(&ddunet(&["train", "--config", s(&cfg), "--set", "batch_size"]));
    assert!(err.contains("KEY=VALUE"), "{err}");

    let err = failure(&ddunet(&["eval", "--checkpoint", s(&dir.path().join("nowhere"))]));
    assert!(err.contains("nowhere"), "{err}");

    let missing = dir.path().join("no_such_dataset");
    let err = failure(&ddunet(&["train", "--config", s(&cfg), "--dataset", s(&missing), "--out", s(dir.path())]));
    assert!(err.contains("no_such_dataset"), "{err}");

    assert!(!ddunet(&["frobnicate"]).status.success());
}
