//! Interchangeable per-behavior selection rules, looked up by name.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;

use super::kmeanspp::weighted_kmeanspp_select;
use crate::error::{invalid, Result};
use crate::rng::Rng;

/// Candidates of one behavior pool.
#[derive(Debug, Clone, Copy)]
pub struct SelectionPool<'a> {
    pub embeddings: &'a [Vec<f64>],
    /// Normalised difficulty per candidate.
    pub weights: &'a [f64],
}

impl SelectionPool<'_> {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Positions into the pool, plus whether uniform weights were substituted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Picks {
    pub indices: Vec<usize>,
    pub uniform_fallback: bool,
}

pub trait SelectionStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Chooses `min(k, pool.len())` distinct positions.
    fn select(&self, pool: SelectionPool<'_>, k: usize, rng: &mut Rng) -> Picks;
}

/// Difficulty-weighted K-Means++ seeding in embedding space.
#[derive(Debug, Default, Clone, Copy)]
pub struct WeightedKmeans;

impl SelectionStrategy for WeightedKmeans {
    fn name(&self) -> &'static str {
        "kmeans"
    }

    fn select(&self, pool: SelectionPool<'_>, k: usize, rng: &mut Rng) -> Picks {
        let s = weighted_kmeanspp_select(pool.embeddings, pool.weights, k, rng);
        Picks {
            indices: s.indices,
            uniform_fallback: s.uniform_fallback,
        }
    }
}

/// Uniform sampling without replacement; ignores difficulty.
#[derive(Debug, Default, Clone, Copy)]
pub struct UniformRandom;

impl SelectionStrategy for UniformRandom {
    fn name(&self) -> &'static str {
        "random"
    }

    fn select(&self, pool: SelectionPool<'_>, k: usize, rng: &mut Rng) -> Picks {
        let n = pool.len();
        let indices = if k >= n {
            (0..n).collect()
        } else {
            sample_indices(rng, n, k).into_vec()
        };
        Picks {
            indices,
            uniform_fallback: false,
        }
    }
}

/// The `k` hardest candidates, without any diversity term. Ties keep pool
/// order.
#[derive(Debug, Default, Clone, Copy)]
pub struct TopDifficulty;

impl SelectionStrategy for TopDifficulty {
    fn name(&self) -> &'static str {
        "topk"
    }

    fn select(&self, pool: SelectionPool<'_>, k: usize, _rng: &mut Rng) -> Picks {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.sort_by(|&a, &b| pool.weights[b].total_cmp(&pool.weights[a]).then(a.cmp(&b)));
        order.truncate(k);
        Picks {
            indices: order,
            uniform_fallback: false,
        }
    }
}

/// Name-to-strategy table.
#[derive(Clone)]
pub struct StrategyRegistry {
    strategies: BTreeMap<&'static str, Arc<dyn SelectionStrategy>>,
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self {
            strategies: BTreeMap::new(),
        }
    }

    /// `kmeans`, `random` and `topk`.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(WeightedKmeans));
        r.register(Arc::new(UniformRandom));
        r.register(Arc::new(TopDifficulty));
        r
    }

    pub fn register(&mut self, strategy: Arc<dyn SelectionStrategy>) {
        self.strategies.insert(strategy.name(), strategy);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn SelectionStrategy>> {
        match self.strategies.get(name) {
            Some(s) => Ok(Arc::clone(s)),
            None => invalid!("unknown selection strategy {name:?}; known: {:?}", self.names()),
        }
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.strategies.keys().copied().collect()
    }
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn builtin_names() {
        let r = StrategyRegistry::builtin();
        assert_eq!(r.names(), vec!["kmeans", "random", "topk"]);
        assert!(r.get("herding").is_err());
    }

    #[test]
    fn topk_takes_hardest() {
        let emb = vec![vec![0.0]; 5];
        let w = [0.2, 0.9, 0.5, 0.9, 0.1];
        let p = TopDifficulty.select(SelectionPool { embeddings: &emb, weights: &w }, 3, &mut seeded(0));
        assert_eq!(p.indices, vec![1, 3, 2]);
    }

    #[test]
    fn random_is_distinct_and_sized() {
        let emb = vec![vec![0.0]; 30];
        let w = [1.0; 30];
        let p = UniformRandom.select(SelectionPool { embeddings: &emb, weights: &w }, 12, &mut seeded(4));
        let mut idx = p.indices.clone();
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 12);
    }
}
