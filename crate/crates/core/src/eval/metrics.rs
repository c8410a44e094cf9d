use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Matching;
use crate::error::{Error, Result};

/// Pixel counts indexed `[predicted cluster, ground-truth class]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(k_pred: usize, k_gt: usize) -> Self {
        Self {
            counts: Array2::zeros((k_pred, k_gt)),
        }
    }

    pub fn from_counts(counts: Array2<u64>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidArgument("confusion matrix is empty".into()));
        }
        Ok(Self { counts })
    }

    pub fn k_pred(&self) -> usize {
        self.counts.nrows()
    }

    pub fn k_gt(&self) -> usize {
        self.counts.ncols()
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Adds one image; `ignore` pixels in `gt` are skipped.
    pub fn accumulate(&mut self, pred: &Array2<u32>, gt: &Array2<u32>, ignore: u32) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!("prediction {:?} vs labels {:?}", pred.dim(), gt.dim())));
        }
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if g == ignore {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.k_pred() {
                return Err(Error::LabelOutOfRange { label: p, classes: self.k_pred() });
            }
            if g >= self.k_gt() {
                return Err(Error::LabelOutOfRange { label: g, classes: self.k_gt() });
            }
            self.counts[[p, g]] += 1;
        }
        Ok(())
    }

    pub fn merge(mut self, other: &Self) -> Self {
        self.counts += &other.counts;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub accuracy: f64,
    pub miou: f64,
    pub pixels: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub miou: f64,
    /// `None` for classes with neither ground-truth nor predicted pixels.
    pub per_class_iou: Vec<Option<f64>>,
    /// Ground-truth class per predicted cluster.
    pub matching: Vec<Option<usize>>,
    pub pixels: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub partitions: BTreeMap<String, PartitionReport>,
}

/// (accuracy, mIoU, per-class IoU, pixels) over the gt columns in `classes`.
fn restricted(cm: &ConfusionMatrix, m: &Matching, classes: &[usize]) -> (f64, f64, Vec<Option<f64>>, u64) {
    let total: u64 = classes.iter().map(|&g| cm.counts.column(g).sum()).sum();
    let mut tp_sum = 0u64;
    let mut ious = Vec::with_capacity(classes.len());
    for &g in classes {
        let gt_total = cm.counts.column(g).sum();
        let (tp, pred_total) = match m.gt_to_pred(g) {
            Some(p) => (
                cm.counts[[p, g]],
                classes.iter().map(|&c| cm.counts[[p, c]]).sum::<u64>(),
            ),
            None => (0, 0),
        };
        tp_sum += tp;
        let denom = gt_total + pred_total - tp;
        ious.push((denom > 0).then(|| tp as f64 / denom as f64));
    }
    let present: Vec<f64> = ious.iter().flatten().copied().collect();
    let miou = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    let acc = if total == 0 { 0.0 } else { tp_sum as f64 / total as f64 };
    (acc, miou, ious, total)
}

pub fn metrics(cm: &ConfusionMatrix, matching: &Matching) -> MetricsReport {
    let all: Vec<usize> = (0..cm.k_gt()).collect();
    let (accuracy, miou, per_class_iou, pixels) = restricted(cm, matching, &all);
    MetricsReport {
        accuracy,
        miou,
        per_class_iou,
        matching: matching.pred_to_gt.clone(),
        pixels,
        partitions: BTreeMap::new(),
    }
}

/// Metrics over subsets of ground-truth classes, keeping the global matching.
pub fn partition_metrics(
    cm: &ConfusionMatrix,
    matching: &Matching,
    partitions: &[(String, Vec<usize>)],
) -> Result<BTreeMap<String, PartitionReport>> {
    let mut seen = vec![false; cm.k_gt()];
    let mut out = BTreeMap::new();
    for (name, classes) in partitions {
        if classes.is_empty() {
            return Err(Error::InvalidArgument(format!("partition `{name}` is empty")));
        }
        for &c in classes {
            if c >= cm.k_gt() {
                return Err(Error::LabelOutOfRange { label: c, classes: cm.k_gt() });
            }
            if std::mem::replace(&mut seen[c], true) {
                return Err(Error::InvalidArgument(format!("class {c} appears in more than one partition")));
            }
        }
        let (accuracy, miou, _, pixels) = restricted(cm, matching, classes);
        out.insert(name.clone(), PartitionReport { accuracy, miou, pixels });
    }
    Ok(out)
}
