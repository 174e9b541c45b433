use rand::seq::index::sample as sample_indices;
use serde::Serialize;

use super::{BehaviorId, Sample};
use crate::rng::Rng;

/// Behaviors that had fewer samples than requested.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BalanceReport {
    pub per_class: usize,
    /// (behavior, available) for every represented behavior below `per_class`.
    pub shortfalls: Vec<(BehaviorId, usize)>,
}

/// Draws `per_class` samples per represented behavior uniformly without
/// replacement, or all of them when fewer exist. Output is grouped by
/// behavior id, each group in original order.
pub fn build_balanced_testset(
    samples: &[Sample],
    vocab_size: usize,
    per_class: usize,
    rng: &mut Rng,
) -> (Vec<Sample>, BalanceReport) {
    assert!(per_class >= 1, "per_class must be at least 1");
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); vocab_size];
    for (i, s) in samples.iter().enumerate() {
        by_class[s.target.0].push(i);
    }
    let mut out = Vec::new();
    let mut report = BalanceReport {
        per_class,
        shortfalls: Vec::new(),
    };
    for (class, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() <= per_class {
            if members.len() < per_class {
                report.shortfalls.push((BehaviorId(class), members.len()));
            }
            out.extend(members.iter().map(|&i| samples[i].clone()));
        } else {
            let mut picked = sample_indices(rng, members.len(), per_class).into_vec();
            picked.sort_unstable();
            out.extend(picked.into_iter().map(|j| samples[members[j]].clone()));
        }
    }
    (out, report)
}
