//! Frequency analysis and the anchor/tail partition.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{BehaviorId, Sample, Vocabulary};
use crate::error::{invalid, Result};

/// Frequency cut-offs. All bounds are closed from below: a behavior with
/// proportion exactly `head` is head, exactly `medium` is medium, and exactly
/// `anchor` is an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub anchor: f64,
    pub head: f64,
    pub medium: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            anchor: 0.01,
            head: 0.05,
            medium: 0.01,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        let Thresholds { anchor, head, medium } = *self;
        if !(anchor > 0.0 && anchor < 1.0) {
            invalid!("anchor threshold {anchor} must lie in (0, 1)");
        }
        if !(medium > 0.0 && medium < head && head < 1.0) {
            invalid!("need 0 < medium ({medium}) < head ({head}) < 1");
        }
        Ok(())
    }
}

/// Anchor (frequent) or tail (rare) side of the training-stage partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Anchor,
    Tail,
}

/// Evaluation bin by frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrequencyCategory {
    Head,
    Medium,
    Tail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyProfile {
    pub vocab: Vocabulary,
    pub thresholds: Thresholds,
    pub counts: Vec<u64>,
    pub proportions: Vec<f64>,
    pub anchor_set: BTreeSet<BehaviorId>,
    pub tail_set: BTreeSet<BehaviorId>,
    pub categories: Vec<FrequencyCategory>,
}

impl FrequencyProfile {
    pub fn partition(&self, id: BehaviorId) -> Partition {
        if self.anchor_set.contains(&id) {
            Partition::Anchor
        } else {
            Partition::Tail
        }
    }

    pub fn category(&self, id: BehaviorId) -> FrequencyCategory {
        self.categories[id.0]
    }

    pub fn is_anchor(&self, id: BehaviorId) -> bool {
        self.anchor_set.contains(&id)
    }
}

/// Counts sample targets and assigns every vocabulary entry to the anchor or
/// tail side and to a head/medium/tail bin. Behaviors never seen as targets
/// get proportion 0 and land in the tail.
pub fn compute_frequency_profile(
    samples: &[Sample],
    vocab: &Vocabulary,
    thresholds: Thresholds,
) -> Result<FrequencyProfile> {
    thresholds.validate()?;
    if samples.is_empty() {
        invalid!("cannot profile an empty sample set");
    }
    let mut counts = vec![0u64; vocab.len()];
    for s in samples {
        if s.target.0 >= counts.len() {
            invalid!("target id {} outside vocabulary", s.target.0);
        }
        counts[s.target.0] += 1;
    }
    let total = samples.len() as f64;
    let proportions: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();

    let mut anchor_set = BTreeSet::new();
    let mut tail_set = BTreeSet::new();
    let mut categories = Vec::with_capacity(vocab.len());
    for (i, &p) in proportions.iter().enumerate() {
        if p >= thresholds.anchor {
            anchor_set.insert(BehaviorId(i));
        } else {
            tail_set.insert(BehaviorId(i));
        }
        categories.push(if p >= thresholds.head {
            FrequencyCategory::Head
        } else if p >= thresholds.medium {
            FrequencyCategory::Medium
        } else {
            FrequencyCategory::Tail
        });
    }
    Ok(FrequencyProfile {
        vocab: vocab.clone(),
        thresholds,
        counts,
        proportions,
        anchor_set,
        tail_set,
        categories,
    })
}

/// Samples split by whether their target is an anchor behavior.
#[derive(Debug, Clone, Default)]
pub struct CategorySplit {
    pub anchor: Vec<Sample>,
    pub tail: Vec<Sample>,
}

pub fn split_by_category(samples: &[Sample], profile: &FrequencyProfile) -> CategorySplit {
    let (anchor, tail) = samples
        .iter()
        .cloned()
        .partition(|s| profile.is_anchor(s.target));
    CategorySplit { anchor, tail }
}
