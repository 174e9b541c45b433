//! Difficulty scoring and class-balanced subset selection.

mod difficulty;
mod kmeanspp;
mod strategy;

pub use difficulty::{confusion_penalty, difficulty_score, normalize_difficulty, DifficultyRecord};
pub use kmeanspp::{weighted_kmeanspp_select, Seeding};
pub use strategy::{
    Picks, SelectionPool, SelectionStrategy, StrategyRegistry, TopDifficulty, UniformRandom,
    WeightedKmeans,
};

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BehaviorId, FrequencyProfile, Sample};
use crate::error::{invalid, Error, Result};
use crate::model::{Model, PredictionOutput};
use crate::rng;

/// Scoring options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringConfig {
    pub lambda: f64,
    /// Swap the two penalty branches (correct or cross-side predictions get
    /// 0, same-side mistakes 1).
    pub invert_penalty: bool,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            invert_penalty: false,
        }
    }
}

/// Scores one pool from precomputed reference predictions. Normalisation
/// happens per target behavior.
pub fn score_predictions(
    pool: &[Sample],
    predictions: &[PredictionOutput],
    profile: &FrequencyProfile,
    cfg: ScoringConfig,
) -> Result<Vec<DifficultyRecord>> {
    if pool.len() != predictions.len() {
        invalid!("{} samples but {} predictions", pool.len(), predictions.len());
    }
    let mut records = pool
        .iter()
        .zip(predictions)
        .enumerate()
        .map(|(index, (s, out))| {
            let confidence = out.confidence(s.target).clamp(0.0, 1.0);
            let mut d = confusion_penalty(out.argmax, s.target, |b| profile.partition(b));
            if cfg.invert_penalty {
                d = 1 - d;
            }
            Ok(DifficultyRecord {
                index,
                truth: s.target,
                predicted: out.argmax,
                confidence,
                d_confusion: d,
                difficulty: difficulty_score(confidence, d, cfg.lambda)?,
                normalized: 0.0,
                embedding: out.embedding.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut by_class: BTreeMap<BehaviorId, Vec<usize>> = BTreeMap::new();
    for r in &records {
        by_class.entry(r.truth).or_default().push(r.index);
    }
    for members in by_class.values() {
        let scores: Vec<f64> = members.iter().map(|&i| records[i].difficulty).collect();
        let (norm, _) = normalize_difficulty(&scores);
        for (&i, v) in members.iter().zip(norm) {
            records[i].normalized = v;
        }
    }
    Ok(records)
}

/// Runs the reference model over the pool and scores every sample.
pub fn score_pool(
    reference: &Model,
    pool: &[Sample],
    profile: &FrequencyProfile,
    cfg: ScoringConfig,
) -> Result<Vec<DifficultyRecord>> {
    let predictions = reference.predict_batch(pool)?;
    score_predictions(pool, &predictions, profile, cfg)
}

/// One behavior's line in the selection report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub behavior: BehaviorId,
    pub label: String,
    pub pool_size: usize,
    pub picked: usize,
    /// Every difficulty in the pool was zero.
    pub degenerate_pool: bool,
    /// Fewer candidates than requested.
    pub shortfall: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub strategy: String,
    pub per_category: usize,
    pub total_selected: usize,
    pub categories: Vec<CategoryReport>,
    /// Behaviors with no samples in the pool.
    pub skipped: Vec<String>,
}

/// Selected pool indices grouped by behavior.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancedSelection {
    pub selected: BTreeMap<BehaviorId, Vec<usize>>,
    pub report: SelectionReport,
}

impl BalancedSelection {
    /// Pool indices of every pick, behavior by behavior.
    pub fn indices(&self) -> Vec<usize> {
        self.selected.values().flatten().copied().collect()
    }
}

/// For every behavior, picks `min(per_category, n_c)` of the pool samples
/// with that target using `strategy` over the records' normalised
/// difficulty. Each behavior draws from its own substream of `seed`.
pub fn select_balanced_subset(
    records: &[DifficultyRecord],
    profile: &FrequencyProfile,
    per_category: usize,
    strategy: &dyn SelectionStrategy,
    seed: u64,
) -> Result<BalancedSelection> {
    if per_category == 0 {
        invalid!("samples per category must be at least 1");
    }
    let mut by_class: BTreeMap<BehaviorId, Vec<usize>> = BTreeMap::new();
    for (pos, r) in records.iter().enumerate() {
        by_class.entry(r.truth).or_default().push(pos);
    }

    let results: Vec<(BehaviorId, Vec<usize>, CategoryReport)> = by_class
        .par_iter()
        .map(|(&behavior, members)| {
            let embeddings: Vec<Vec<f64>> = members.iter().map(|&i| records[i].embedding.clone()).collect();
            let weights: Vec<f64> = members.iter().map(|&i| records[i].normalized).collect();
            let mut stream = rng::substream(seed, &format!("select/{}", behavior.0));
            let picks = strategy.select(SelectionPool { embeddings: &embeddings, weights: &weights }, per_category, &mut stream);
            let chosen: Vec<usize> = picks.indices.iter().map(|&p| records[members[p]].index).collect();
            let report = CategoryReport {
                behavior,
                label: profile.vocab.name(behavior).unwrap_or("?").to_owned(),
                pool_size: members.len(),
                picked: chosen.len(),
                degenerate_pool: weights.iter().all(|&w| w <= 0.0),
                shortfall: members.len() < per_category,
            };
            (behavior, chosen, report)
        })
        .collect();

    let mut selected = BTreeMap::new();
    let mut categories = Vec::new();
    for (b, chosen, report) in results {
        selected.insert(b, chosen);
        categories.push(report);
    }
    let skipped = profile
        .vocab
        .ids()
        .filter(|b| !selected.contains_key(b))
        .map(|b| profile.vocab.name(b).unwrap_or("?").to_owned())
        .collect();
    let total_selected = selected.values().map(Vec::len).sum();
    Ok(BalancedSelection {
        selected,
        report: SelectionReport {
            strategy: strategy.name().to_owned(),
            per_category,
            total_selected,
            categories,
            skipped,
        },
    })
}

#[derive(Serialize)]
struct RecordLine<'a> {
    index: usize,
    truth: &'a str,
    predicted: &'a str,
    confidence: f64,
    d_confusion: u8,
    difficulty: f64,
    normalized: f64,
}

/// Audit export: one `{index, truth, predicted, confidence, d_confusion,
/// difficulty, normalized}` object per line.
pub fn write_difficulty_jsonl(
    records: &[DifficultyRecord],
    profile: &FrequencyProfile,
    path: impl AsRef<Path>,
) -> Result<usize> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut out = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        let line = RecordLine {
            index: r.index,
            truth: profile.vocab.name(r.truth)?,
            predicted: profile.vocab.name(r.predicted)?,
            confidence: r.confidence,
            d_confusion: r.d_confusion,
            difficulty: r.difficulty,
            normalized: r.normalized,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(records.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{compute_frequency_profile, Thresholds, Vocabulary};
    use crate::model::tests::random_sample;
    use crate::model::ModelConfig;
    use crate::rng::seeded;

    fn setup(counts: &[usize]) -> (Vec<Sample>, FrequencyProfile, Model) {
        let v = Vocabulary::new((0..counts.len()).map(|i| format!("b{i}")).collect()).unwrap();
        let mut rng = seeded(1);
        let mut pool = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                let mut s = random_sample(&mut rng, counts.len(), 4);
                s.target = BehaviorId(c);
                pool.push(s);
            }
        }
        let profile = compute_frequency_profile(&pool, &v, Thresholds::default()).unwrap();
        let cfg = ModelConfig { window: 4, embed_dim: 6, hidden_dim: 5, ..ModelConfig::default() };
        let model = Model::init(&v, cfg, &mut rng).unwrap();
        (pool, profile, model)
    }

    #[test]
    fn per_category_counts_are_exact() {
        let (pool, profile, model) = setup(&[300, 120, 40, 7, 2]);
        let records = score_pool(&model, &pool, &profile, ScoringConfig::default()).unwrap();
        for strat in StrategyRegistry::builtin().names() {
            let s = StrategyRegistry::builtin().get(strat).unwrap();
            let sel = select_balanced_subset(&records, &profile, 20, s.as_ref(), 9).unwrap();
            let expected: usize = [300, 120, 40, 7, 2].iter().map(|&n: &usize| n.min(20)).sum();
            assert_eq!(sel.report.total_selected, expected);
            for (b, idx) in &sel.selected {
                assert!(idx.iter().all(|&i| pool[i].target == *b));
                let mut d = idx.clone();
                d.sort_unstable();
                d.dedup();
                assert_eq!(d.len(), idx.len());
            }
            let small = sel.report.categories.iter().find(|c| c.behavior == BehaviorId(3)).unwrap();
            assert_eq!((small.pool_size, small.picked, small.shortfall), (7, 7, true));
        }
    }

    #[test]
    fn max_normalised_difficulty_per_pool_is_one() {
        let (pool, profile, model) = setup(&[50, 30, 20]);
        let records = score_pool(&model, &pool, &profile, ScoringConfig::default()).unwrap();
        for c in 0..3 {
            let max = records
                .iter()
                .filter(|r| r.truth == BehaviorId(c))
                .map(|r| r.normalized)
                .fold(0.0, f64::max);
            assert!((max - 1.0).abs() < 1e-15);
        }
        for r in &records {
            let expected = 0.5 * (1.0 - r.confidence) + 0.5 * f64::from(r.d_confusion);
            assert_eq!(r.difficulty, expected);
        }
    }

    #[test]
    fn lambda_extremes_isolate_components() {
        let (pool, profile, model) = setup(&[40, 25]);
        let at = |lambda| {
            score_pool(&model, &pool, &profile, ScoringConfig { lambda, invert_penalty: false }).unwrap()
        };
        for r in at(0.0) {
            assert_eq!(r.difficulty, f64::from(r.d_confusion));
        }
        for r in at(1.0) {
            assert_eq!(r.difficulty, 1.0 - r.confidence);
        }
    }

    #[test]
    fn missing_behaviors_are_reported() {
        let (pool, profile, model) = setup(&[30, 0, 10]);
        let records = score_pool(&model, &pool, &profile, ScoringConfig::default()).unwrap();
        let sel = select_balanced_subset(&records, &profile, 5, &WeightedKmeans, 1).unwrap();
        assert_eq!(sel.report.skipped, vec!["b1".to_owned()]);
        assert_eq!(sel.report.total_selected, 10);
    }

    #[test]
    fn selection_is_deterministic() {
        let (pool, profile, model) = setup(&[80, 60, 30]);
        let records = score_pool(&model, &pool, &profile, ScoringConfig::default()).unwrap();
        let a = select_balanced_subset(&records, &profile, 10, &WeightedKmeans, 5).unwrap();
        let b = select_balanced_subset(&records, &profile, 10, &WeightedKmeans, 5).unwrap();
        assert_eq!(a, b);
    }
}
