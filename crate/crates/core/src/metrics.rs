//! Confusion counting and the four segmentation metrics (precision, recall,
//! DSC, IoU), per class and aggregated.
//!
//! Aggregation conventions:
//! - "micro" sums TP/FP/FN over foreground classes and images before
//!   computing metrics; it is the primary overall mode and satisfies
//!   DSC = 2*IoU/(1+IoU) exactly.
//! - "macro" averages per-class metrics; classes absent from both
//!   prediction and ground truth are excluded from the average.
//! - Background (class 0) is excluded from overall tissue metrics.

use crate::data::{TissueMask, CLASS_NAMES};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// One-vs-rest pixel counts per class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: Vec<u64>,
    pub false_pos: Vec<u64>,
    pub false_neg: Vec<u64>,
}

impl ConfusionCounts {
    pub fn zeros(num_classes: usize) -> Self {
        ConfusionCounts {
            true_pos: vec![0; num_classes],
            false_pos: vec![0; num_classes],
            false_neg: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.true_pos.len()
    }

    /// Counts merge associatively; evaluation reduces per-image counts.
    pub fn merge(&mut self, other: &ConfusionCounts) {
        assert_eq!(self.num_classes(), other.num_classes());
        for c in 0..self.num_classes() {
            self.true_pos[c] += other.true_pos[c];
            self.false_pos[c] += other.false_pos[c];
            self.false_neg[c] += other.false_neg[c];
        }
    }

    /// Sum TP/FP/FN over the foreground classes (1..).
    pub fn foreground_totals(&self) -> (u64, u64, u64) {
        let tp = self.true_pos.iter().skip(1).sum();
        let fp = self.false_pos.iter().skip(1).sum();
        let fneg = self.false_neg.iter().skip(1).sum();
        (tp, fp, fneg)
    }
}

/// Exact per-pixel one-vs-rest counts via a joint class histogram.
pub fn confusion_counts(
    pred: &TissueMask,
    gt: &TissueMask,
    num_classes: usize,
) -> Result<ConfusionCounts> {
    if pred.labels.dim() != gt.labels.dim() {
        return Err(Error::shape_mismatch(
            "confusion_counts",
            &[pred.height(), pred.width()],
            &[gt.height(), gt.width()],
        ));
    }
    let mut joint = vec![0u64; num_classes * num_classes];
    for (&p, &g) in pred.labels.iter().zip(gt.labels.iter()) {
        if p as usize >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: p,
                num_classes,
            });
        }
        if g as usize >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: g,
                num_classes,
            });
        }
        joint[p as usize * num_classes + g as usize] += 1;
    }
    let mut counts = ConfusionCounts::zeros(num_classes);
    for c in 0..num_classes {
        let tp = joint[c * num_classes + c];
        let pred_total: u64 = (0..num_classes).map(|g| joint[c * num_classes + g]).sum();
        let gt_total: u64 = (0..num_classes).map(|p| joint[p * num_classes + c]).sum();
        counts.true_pos[c] = tp;
        counts.false_pos[c] = pred_total - tp;
        counts.false_neg[c] = gt_total - tp;
    }
    Ok(counts)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub dsc: f64,
    pub iou: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics from raw counts for one class.
///
/// A class absent from both prediction and ground truth scores 1.0 across
/// the board; predicted-but-absent scores 0.0 (the ratios vanish).
pub fn metrics_for(tp: u64, fp: u64, fneg: u64) -> ClassMetrics {
    if tp + fp + fneg == 0 {
        return ClassMetrics {
            precision: 1.0,
            recall: 1.0,
            dsc: 1.0,
            iou: 1.0,
        };
    }
    ClassMetrics {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fneg),
        dsc: ratio(2 * tp, 2 * tp + fp + fneg),
        iou: ratio(tp, tp + fp + fneg),
    }
}

/// Per-class metrics for a full [`ConfusionCounts`].
pub fn metrics_from_counts(counts: &ConfusionCounts) -> Vec<ClassMetrics> {
    (0..counts.num_classes())
        .map(|c| metrics_for(counts.true_pos[c], counts.false_pos[c], counts.false_neg[c]))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: usize,
    pub name: String,
    pub metrics: ClassMetrics,
    pub present_in_gt: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassRow>,
    /// Count-sum aggregation over foreground classes: the primary overall mode.
    pub overall_micro: ClassMetrics,
    /// Mean of per-class metrics over foreground classes that occur at all.
    pub overall_macro: ClassMetrics,
    pub images: usize,
}

/// Reduce per-image counts into the dataset report.
pub fn aggregate_report(per_image: &[ConfusionCounts]) -> Result<MetricsReport> {
    let first = per_image
        .first()
        .ok_or_else(|| Error::EmptyDataset("aggregate_report over zero images".into()))?;
    let num_classes = first.num_classes();
    let mut total = ConfusionCounts::zeros(num_classes);
    for counts in per_image {
        total.merge(counts);
    }
    let per_class: Vec<ClassRow> = (0..num_classes)
        .map(|c| ClassRow {
            class: c,
            name: CLASS_NAMES.get(c).unwrap_or(&"class").to_string(),
            metrics: metrics_for(total.true_pos[c], total.false_pos[c], total.false_neg[c]),
            present_in_gt: total.true_pos[c] + total.false_neg[c] > 0,
        })
        .collect();

    let (tp, fp, fneg) = total.foreground_totals();
    let overall_micro = metrics_for(tp, fp, fneg);

    // Macro: classes absent from both pred and gt are excluded.
    let contributing: Vec<&ClassRow> = per_class
        .iter()
        .skip(1)
        .filter(|row| {
            total.true_pos[row.class] + total.false_pos[row.class] + total.false_neg[row.class]
                > 0
        })
        .collect();
    let overall_macro = if contributing.is_empty() {
        ClassMetrics {
            precision: 1.0,
            recall: 1.0,
            dsc: 1.0,
            iou: 1.0,
        }
    } else {
        let n = contributing.len() as f64;
        ClassMetrics {
            precision: contributing.iter().map(|r| r.metrics.precision).sum::<f64>() / n,
            recall: contributing.iter().map(|r| r.metrics.recall).sum::<f64>() / n,
            dsc: contributing.iter().map(|r| r.metrics.dsc).sum::<f64>() / n,
            iou: contributing.iter().map(|r| r.metrics.iou).sum::<f64>() / n,
        }
    };

    Ok(MetricsReport {
        per_class,
        overall_micro,
        overall_macro,
        images: per_image.len(),
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// CSV with per-class rows and the two overall rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,precision,recall,dsc,iou\n");
        for row in &self.per_class {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                row.name,
                row.metrics.precision,
                row.metrics.recall,
                row.metrics.dsc,
                row.metrics.iou
            ));
        }
        for (label, m) in [
            ("overall_micro", &self.overall_micro),
            ("overall_macro", &self.overall_macro),
        ] {
            out.push_str(&format!(
                "{label},{:.6},{:.6},{:.6},{:.6}\n",
                m.precision, m.recall, m.dsc, m.iou
            ));
        }
        out
    }
}
