//! Confusion-matrix based segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `K x K` counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InvalidArgument(
                "confusion matrix needs at least one class".into(),
            ));
        }
        Ok(Self {
            classes,
            counts: vec![0; classes * classes],
        })
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if classes == 0 || counts.len() != classes * classes {
            return Err(Error::shape(
                "confusion_matrix",
                format!("{} counts for {classes} classes", counts.len()),
            ));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per pixel. Nothing is added if any class is out of
    /// range.
    pub fn update(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape(
                "confusion_update",
                format!("{} predictions for {} labels", pred.len(), truth.len()),
            ));
        }
        let k = self.classes;
        if let Some((i, (&p, &t))) = pred
            .iter()
            .zip(truth)
            .enumerate()
            .find(|(_, (&p, &t))| p >= k || t >= k)
        {
            return Err(Error::InvalidArgument(format!(
                "pixel {i}: prediction {p} / truth {t} outside [0, {k})"
            )));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub oa: f64,
    pub miou: f64,
    pub per_class: Vec<ClassMetrics>,
    pub mean_f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Overall accuracy is `trace / total`. Classes absent from both truth and
/// prediction report zeros and are left out of the means.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArgument("confusion matrix is empty".into()));
    }
    let k = cm.classes;
    let mut per_class = Vec::with_capacity(k);
    let (mut iou_sum, mut f1_sum, mut present) = (0.0, 0.0, 0usize);
    let mut trace = 0;
    for c in 0..k {
        let tp = cm.get(c, c);
        let row: u64 = (0..k).map(|p| cm.get(c, p)).sum();
        let col: u64 = (0..k).map(|t| cm.get(t, c)).sum();
        let (fp, fn_) = (col - tp, row - tp);
        trace += tp;
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let iou = ratio(tp, tp + fp + fn_);
        if tp + fp + fn_ > 0 {
            iou_sum += iou;
            f1_sum += f1;
            present += 1;
        }
        per_class.push(ClassMetrics {
            class: c,
            precision,
            recall,
            f1,
            iou,
        });
    }
    let mean = |s: f64| {
        if present == 0 {
            0.0
        } else {
            s / present as f64
        }
    };
    Ok(MetricsReport {
        oa: ratio(trace, total),
        miou: mean(iou_sum),
        per_class,
        mean_f1: mean(f1_sum),
    })
}
