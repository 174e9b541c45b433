//! Per-sample difficulty: confidence uncertainty blended with a confusion
//! penalty.

use serde::{Deserialize, Serialize};

use crate::data::{BehaviorId, Partition};
use crate::error::{invalid, Result};

/// 0 when the prediction is wrong but lands on the same side of the
/// anchor/tail partition as the truth, 1 otherwise (correct predictions
/// included).
pub fn confusion_penalty(
    predicted: BehaviorId,
    truth: BehaviorId,
    partition_of: impl Fn(BehaviorId) -> Partition,
) -> u8 {
    if predicted != truth && partition_of(predicted) == partition_of(truth) {
        0
    } else {
        1
    }
}

/// `lambda * (1 - p) + (1 - lambda) * d`.
pub fn difficulty_score(confidence: f64, penalty: u8, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        invalid!("lambda must lie in [0, 1], got {lambda}");
    }
    if !(0.0..=1.0).contains(&confidence) {
        invalid!("confidence must lie in [0, 1], got {confidence}");
    }
    Ok(lambda * (1.0 - confidence) + (1.0 - lambda) * f64::from(penalty))
}

/// Divides by the maximum. An all-zero pool stays zero and is flagged.
pub fn normalize_difficulty(scores: &[f64]) -> (Vec<f64>, bool) {
    assert!(!scores.is_empty(), "cannot normalise an empty pool");
    let max = scores.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return (vec![0.0; scores.len()], true);
    }
    (scores.iter().map(|s| s / max).collect(), false)
}

/// Scoring result for one pool sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRecord {
    pub index: usize,
    pub truth: BehaviorId,
    pub predicted: BehaviorId,
    pub confidence: f64,
    pub d_confusion: u8,
    pub difficulty: f64,
    /// Difficulty divided by the maximum within the sample's behavior pool.
    pub normalized: f64,
    #[serde(skip)]
    pub embedding: Vec<f64>,
}
