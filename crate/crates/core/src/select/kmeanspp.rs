//! Difficulty-weighted K-Means++ seeding.

use crate::rng::Rng;
use rand::Rng as _;

/// Index drawn with probability proportional to `weights`, or `None` if
/// they sum to zero.
pub(crate) fn draw_proportional(weights: &[f64], rng: &mut Rng) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut target = rng.random::<f64>() * total;
    let mut last = None;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        last = Some(i);
        if target < w {
            return Some(i);
        }
        target -= w;
    }
    last
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Chosen seeds and whether weights had to be replaced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Seeding {
    pub indices: Vec<usize>,
    /// All weights were zero, so uniform weights were used.
    pub uniform_fallback: bool,
}

/// Picks `k` distinct points. The first is drawn with probability
/// proportional to its weight, each later one proportional to
/// `weight * squared distance to the nearest pick`. The picks themselves are
/// the selection; no Lloyd iterations follow.
///
/// When every remaining point has zero seeding mass (duplicates of picks or
/// zero weight) the next pick falls back to weight alone, then to uniform,
/// so exactly `min(k, n)` indices are always returned.
pub fn weighted_kmeanspp_select(
    embeddings: &[Vec<f64>],
    weights: &[f64],
    k: usize,
    rng: &mut Rng,
) -> Seeding {
    assert_eq!(embeddings.len(), weights.len(), "one weight per embedding");
    let n = embeddings.len();
    let uniform_fallback = n > 0 && weights.iter().all(|&w| w <= 0.0);
    if k >= n {
        return Seeding {
            indices: (0..n).collect(),
            uniform_fallback,
        };
    }
    if k == 0 {
        return Seeding {
            indices: Vec::new(),
            uniform_fallback,
        };
    }
    let weights: Vec<f64> = if uniform_fallback {
        vec![1.0; n]
    } else {
        weights.iter().map(|&w| w.max(0.0)).collect()
    };

    let mut picked = vec![false; n];
    let mut indices = Vec::with_capacity(k);
    let first = draw_proportional(&weights, rng).expect("weights have positive mass");
    picked[first] = true;
    indices.push(first);
    let mut nearest: Vec<f64> = embeddings
        .iter()
        .map(|e| squared_distance(e, &embeddings[first]))
        .collect();

    let mut mass = vec![0.0; n];
    while indices.len() < k {
        for i in 0..n {
            mass[i] = if picked[i] { 0.0 } else { weights[i] * nearest[i] };
        }
        let next = draw_proportional(&mass, rng)
            .or_else(|| {
                for i in 0..n {
                    mass[i] = if picked[i] { 0.0 } else { weights[i] };
                }
                draw_proportional(&mass, rng)
            })
            .unwrap_or_else(|| {
                let open: Vec<usize> = (0..n).filter(|&i| !picked[i]).collect();
                open[rng.random_range(0..open.len())]
            });
        picked[next] = true;
        indices.push(next);
        for (i, e) in embeddings.iter().enumerate() {
            let d = squared_distance(e, &embeddings[next]);
            if d < nearest[i] {
                nearest[i] = d;
            }
        }
    }
    Seeding {
        indices,
        uniform_fallback,
    }
}
