use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{confusion_counts, macro_accuracies, weighted_precision, weighted_recall, ConfusionCounts};
use crate::data::{BehaviorId, FrequencyCategory, FrequencyProfile, Sample};
use crate::error::{invalid, Error, Result};
use crate::model::Model;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    RealDistribution,
    Balanced,
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" | "real-distribution" => Ok(Protocol::RealDistribution),
            "balanced" => Ok(Protocol::Balanced),
            other => Err(Error::Invalid(format!("unknown protocol {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub behavior: String,
    pub category: FrequencyCategory,
    pub support: u64,
    pub predicted: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// The six metrics under one protocol. `None` marks an undefined value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub protocol: Protocol,
    pub samples: u64,
    pub prec_w: Option<f64>,
    pub rec_w: Option<f64>,
    pub overall: Option<f64>,
    pub head: Option<f64>,
    pub medium: Option<f64>,
    pub tail: Option<f64>,
    pub classes: Vec<ClassRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |x| format!("{x:.4}"))
}

impl MetricsReport {
    pub fn from_counts(counts: &ConfusionCounts, profile: &FrequencyProfile, protocol: Protocol) -> Self {
        let m = macro_accuracies(counts, &profile.categories);
        let classes = (0..counts.num_classes())
            .map(|c| ClassRow {
                behavior: profile.vocab.names()[c].clone(),
                category: profile.categories[c],
                support: counts.support(c),
                predicted: counts.predicted(c),
                precision: counts.precision(c),
                recall: counts.recall(c),
            })
            .collect();
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            protocol,
            samples: counts.total(),
            prec_w: weighted_precision(counts),
            rec_w: weighted_recall(counts),
            overall: m.overall,
            head: m.head,
            medium: m.medium,
            tail: m.tail,
            classes,
        }
    }

    /// Metric name and value, in table order.
    pub fn metrics(&self) -> [(&'static str, Option<f64>); 6] {
        [
            ("Prec_w", self.prec_w),
            ("Rec_w", self.rec_w),
            ("Overall", self.overall),
            ("Head", self.head),
            ("Medium", self.medium),
            ("Tail", self.tail),
        ]
    }

    /// Aligned one-row table; undefined values print as `-`.
    pub fn to_table(&self, label: &str) -> String {
        let mut out = format!("{:<24}", "Model");
        for (name, _) in self.metrics() {
            let _ = write!(out, "{name:>9}");
        }
        out.push('\n');
        let _ = write!(out, "{label:<24}");
        for (_, v) in self.metrics() {
            let _ = write!(out, "{:>9}", cell(v));
        }
        out.push('\n');
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let report: Self = serde_json::from_slice(&bytes)?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported report schema {}", report.schema_version)));
        }
        Ok(report)
    }
}

/// Scores fixed predictions. Bins come from `profile`, which should describe
/// the training distribution.
pub fn evaluate_predictions(
    predictions: &[BehaviorId],
    labels: &[BehaviorId],
    profile: &FrequencyProfile,
    protocol: Protocol,
) -> Result<MetricsReport> {
    let counts = confusion_counts(predictions, labels, profile.vocab.len())?;
    Ok(MetricsReport::from_counts(&counts, profile, protocol))
}

/// Top-1 predictions of `model` on `testset`, scored.
pub fn evaluate(model: &Model, testset: &[Sample], profile: &FrequencyProfile, protocol: Protocol) -> Result<MetricsReport> {
    if testset.is_empty() {
        invalid!("empty test set");
    }
    if model.vocab_size() != profile.vocab.len() {
        invalid!("model and profile disagree on vocabulary size");
    }
    let preds: Vec<BehaviorId> = model.predict_batch(testset)?.into_iter().map(|o| o.argmax).collect();
    let labels: Vec<BehaviorId> = testset.iter().map(|s| s.target).collect();
    evaluate_predictions(&preds, &labels, profile, protocol)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: String,
    pub base: Option<f64>,
    pub other: Option<f64>,
    /// other - base.
    pub delta: Option<f64>,
    /// other / base.
    pub ratio: Option<f64>,
}

/// Raw difference and ratio per metric between two reports.
pub fn compare_reports(base: &MetricsReport, other: &MetricsReport) -> Vec<MetricDelta> {
    base.metrics()
        .iter()
        .zip(other.metrics())
        .map(|(&(name, a), (_, b))| {
            let (delta, ratio) = match (a, b) {
                (Some(a), Some(b)) => (Some(b - a), (a != 0.0).then(|| b / a)),
                _ => (None, None),
            };
            MetricDelta {
                metric: name.to_owned(),
                base: a,
                other: b,
                delta,
                ratio,
            }
        })
        .collect()
}
