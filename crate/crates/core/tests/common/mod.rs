#![allow(dead_code)]

use progtune_core::data::{BehaviorEvent, BehaviorId, Sample, TargetContext, Vocabulary};
use progtune_core::model::{Model, ModelConfig};
use progtune_core::rng::{seeded, Rng};
use rand::Rng as _;

pub const LOCATIONS: [&str; 5] = ["home", "workplace", "gym", "mall", "restaurant"];

pub fn vocab(n: usize) -> Vocabulary {
    Vocabulary::new((0..n).map(|i| format!("behavior {i:02}")).collect()).unwrap()
}

pub fn random_event(rng: &mut Rng, vocab: usize) -> BehaviorEvent {
    BehaviorEvent {
        location: LOCATIONS[rng.random_range(0..LOCATIONS.len())].into(),
        day_of_week: rng.random_range(1..=7),
        hour: rng.random_range(0..24),
        behavior: BehaviorId(rng.random_range(0..vocab)),
    }
}

pub fn random_sample(rng: &mut Rng, vocab: usize, window: usize) -> Sample {
    let history = (0..window).map(|_| random_event(rng, vocab)).collect();
    let ctx = random_event(rng, vocab);
    Sample {
        history,
        target: BehaviorId(rng.random_range(0..vocab)),
        target_context: TargetContext::from(&ctx),
    }
}

/// A model whose parameters are spread wider than the initialiser's, so
/// the tanh layer is away from its linear regime.
pub fn random_model(vocab_size: usize, config: ModelConfig, scale: f64, seed: u64) -> Model {
    let mut rng = seeded(seed);
    let mut m = Model::init(&vocab(vocab_size), config, &mut rng).unwrap();
    for p in m.params_mut() {
        *p = scale * (2.0 * rng.random::<f64>() - 1.0);
    }
    m
}
