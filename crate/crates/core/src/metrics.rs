//! Pixel confusion counts and the metrics derived from them.
//!
//! Only the road class is scored, so `miou` equals the road IoU. Ratios with
//! a zero denominator are `None` ("undefined") and serialize as JSON `null`.

use std::iter::Sum;
use std::ops::{Add, AddAssign};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn from_masks(pred: &[u8], gt: &[u8]) -> Result<Self> {
        accumulate_confusion(pred, gt, Self::default())
    }

    pub fn from_tensors(pred: &Tensor, gt: &Tensor) -> Result<Self> {
        if pred.dims() != gt.dims() {
            return Err(Error::InvalidArgument(format!(
                "prediction {:?} and ground truth {:?} differ in shape",
                pred.dims(),
                gt.dims()
            )));
        }
        let flat = |t: &Tensor| -> Result<Vec<u8>> {
            Ok(t.flatten_all()?.to_dtype(DType::U8)?.to_vec1::<u8>()?)
        };
        Self::from_masks(&flat(pred)?, &flat(gt)?)
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Add the 2×2 contingency of `pred` against `gt` to `acc`.
pub fn accumulate_confusion(
    pred: &[u8],
    gt: &[u8],
    acc: ConfusionCounts,
) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "mask sizes differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut c = acc;
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "non-binary mask value at index {i}: pred {p}, gt {g}"
                )))
            }
        }
    }
    Ok(c)
}

/// Names of the scored columns, in report order.
pub const METRIC_COLUMNS: [&str; 6] = ["accuracy", "precision", "recall", "f1", "iou_road", "miou"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub iou_road: Option<f64>,
    pub miou: Option<f64>,
    pub counts: ConfusionCounts,
    /// Number of classes including background.
    pub num_classes: usize,
}

impl MetricsReport {
    pub fn values(&self) -> [Option<f64>; 6] {
        [
            self.accuracy,
            self.precision,
            self.recall,
            self.f1,
            self.iou_road,
            self.miou,
        ]
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Harmonic mean of precision and recall. Zero when both are zero.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn compute_metrics(counts: ConfusionCounts) -> Result<MetricsReport> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::InvalidArgument(
            "metrics need at least one evaluated pixel".into(),
        ));
    }
    let ConfusionCounts { tp, fp, fn_, tn } = counts;
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) => Some(f1_score(p, r)),
        _ => None,
    };
    let iou_road = ratio(tp, tp + fp + fn_);
    Ok(MetricsReport {
        accuracy: ratio(tp + tn, total),
        precision,
        recall,
        f1,
        iou_road,
        miou: iou_road,
        counts,
        num_classes: 2,
    })
}

/// Unweighted mean of each metric over several reports, skipping undefined entries.
pub fn mean_of(reports: &[MetricsReport]) -> [Option<f64>; 6] {
    let mut out = [None; 6];
    for (k, slot) in out.iter_mut().enumerate() {
        let vals: Vec<f64> = reports.iter().filter_map(|r| r.values()[k]).collect();
        if !vals.is_empty() {
            *slot = Some(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    out
}
