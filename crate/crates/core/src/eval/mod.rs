//! Top-1 metrics for long-tailed behavior prediction.

mod report;

pub use report::{
    compare_reports, evaluate, evaluate_predictions, ClassRow, MetricDelta, MetricsReport,
    Protocol, REPORT_SCHEMA_VERSION,
};

use serde::{Deserialize, Serialize};

use crate::data::{BehaviorId, FrequencyCategory};
use crate::error::{invalid, Result};

/// One-vs-rest counts per behavior.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl ConfusionCounts {
    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }

    /// TP + FN: samples whose label is `c`.
    pub fn support(&self, c: usize) -> u64 {
        self.tp[c] + self.fn_[c]
    }

    /// TP + FP: samples predicted as `c`.
    pub fn predicted(&self, c: usize) -> u64 {
        self.tp[c] + self.fp[c]
    }

    pub fn total(&self) -> u64 {
        (0..self.num_classes()).map(|c| self.support(c)).sum()
    }

    pub fn precision(&self, c: usize) -> Option<f64> {
        let d = self.predicted(c);
        (d > 0).then(|| self.tp[c] as f64 / d as f64)
    }

    pub fn recall(&self, c: usize) -> Option<f64> {
        let d = self.support(c);
        (d > 0).then(|| self.tp[c] as f64 / d as f64)
    }
}

pub fn confusion_counts(
    predictions: &[BehaviorId],
    labels: &[BehaviorId],
    num_classes: usize,
) -> Result<ConfusionCounts> {
    if predictions.len() != labels.len() {
        invalid!("{} predictions for {} labels", predictions.len(), labels.len());
    }
    if labels.is_empty() {
        invalid!("no samples to count");
    }
    let mut c = ConfusionCounts {
        tp: vec![0; num_classes],
        fp: vec![0; num_classes],
        fn_: vec![0; num_classes],
    };
    for (&p, &y) in predictions.iter().zip(labels) {
        if p.0 >= num_classes || y.0 >= num_classes {
            invalid!("behavior id outside {num_classes} classes");
        }
        if p == y {
            c.tp[y.0] += 1;
        } else {
            c.fp[p.0] += 1;
            c.fn_[y.0] += 1;
        }
    }
    Ok(c)
}

/// Precision averaged with weights TP + FP; classes never predicted carry
/// no weight. `None` when nothing was predicted.
pub fn weighted_precision(c: &ConfusionCounts) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0u64;
    for k in 0..c.num_classes() {
        if let Some(p) = c.precision(k) {
            num += c.predicted(k) as f64 * p;
            den += c.predicted(k);
        }
    }
    (den > 0).then(|| num / den as f64)
}

/// Recall averaged with weights TP + FN (support). Equals micro accuracy.
pub fn weighted_recall(c: &ConfusionCounts) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0u64;
    for k in 0..c.num_classes() {
        if let Some(r) = c.recall(k) {
            num += c.support(k) as f64 * r;
            den += c.support(k);
        }
    }
    (den > 0).then(|| num / den as f64)
}

/// Class-averaged recall over all classes and within each frequency bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroAccuracies {
    pub overall: Option<f64>,
    pub head: Option<f64>,
    pub medium: Option<f64>,
    pub tail: Option<f64>,
}

/// Mean recall over classes present in the evaluated labels. A bin with no
/// present class is `None`.
pub fn macro_accuracies(c: &ConfusionCounts, categories: &[FrequencyCategory]) -> MacroAccuracies {
    assert_eq!(categories.len(), c.num_classes(), "one category per class");
    let mean = |keep: &dyn Fn(FrequencyCategory) -> bool| {
        let recalls: Vec<f64> = (0..c.num_classes())
            .filter(|&k| keep(categories[k]))
            .filter_map(|k| c.recall(k))
            .collect();
        (!recalls.is_empty()).then(|| recalls.iter().sum::<f64>() / recalls.len() as f64)
    };
    MacroAccuracies {
        overall: mean(&|_| true),
        head: mean(&|f| f == FrequencyCategory::Head),
        medium: mean(&|f| f == FrequencyCategory::Medium),
        tail: mean(&|f| f == FrequencyCategory::Tail),
    }
}
