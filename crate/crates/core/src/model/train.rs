//! Mini-batch training loop shared by both tuning stages.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{dpo_loss_encoded, sft_loss_encoded, DpoExample};
use super::optim::{cosine_schedule, OptimizerConfig, OptimizerRegistry};
use super::{EncodedSample, Model};
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Sft,
    Dpo,
}

/// Training examples for one of the two objectives.
#[derive(Debug, Clone, Copy)]
pub enum TrainData<'a> {
    Sft(&'a [EncodedSample]),
    Dpo { pairs: &'a [DpoExample], beta: f64 },
}

impl TrainData<'_> {
    pub fn kind(&self) -> LossKind {
        match self {
            TrainData::Sft(_) => LossKind::Sft,
            TrainData::Dpo { .. } => LossKind::Dpo,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TrainData::Sft(x) => x.len(),
            TrainData::Dpo { pairs, .. } => pairs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn loss(&self, model: &Model, idx: &[usize]) -> (f64, Vec<f64>) {
        match self {
            TrainData::Sft(x) => {
                let batch: Vec<&EncodedSample> = idx.iter().map(|&i| &x[i]).collect();
                sft_loss_encoded(model, &batch)
            }
            TrainData::Dpo { pairs, beta } => {
                let batch: Vec<&DpoExample> = idx.iter().map(|&i| &pairs[i]).collect();
                dpo_loss_encoded(model, &batch, *beta)
            }
        }
    }
}

/// Per-epoch record. Epoch 0 describes the starting parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub mean_loss: f64,
    pub validation: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch, or the last epoch without a
    /// validator.
    pub model: Model,
    pub trace: Vec<EpochTrace>,
    pub best_epoch: usize,
}

fn full_loss(model: &Model, data: &TrainData<'_>) -> f64 {
    let idx: Vec<usize> = (0..data.len()).collect();
    idx.chunks(256)
        .map(|c| data.loss(model, c).0 * c.len() as f64)
        .sum::<f64>()
        / data.len() as f64
}

/// Runs `cfg.epochs` shuffled passes with the cosine schedule. When a
/// validator is given it is scored after every epoch (and on the starting
/// parameters) and the highest-scoring parameters are returned; ties keep
/// the earlier epoch.
pub fn train(
    model: &Model,
    data: TrainData<'_>,
    cfg: &OptimizerConfig,
    validator: Option<&dyn Fn(&Model) -> f64>,
    rng: &mut Rng,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let TrainData::Dpo { beta, .. } = data {
        if !(beta > 0.0) {
            invalid!("beta must be positive, got {beta}");
        }
    }
    if data.is_empty() {
        invalid!("no training examples");
    }
    let mut current = model.clone();
    let start_val = validator.map(|v| v(&current));
    let mut trace = vec![EpochTrace {
        epoch: 0,
        mean_loss: full_loss(&current, &data),
        validation: start_val,
    }];
    let mut best = (current.clone(), 0usize, start_val.unwrap_or(f64::NEG_INFINITY));

    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut optimizer = OptimizerRegistry::builtin().build(cfg, current.num_params())?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grad) = data.loss(&current, batch);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { step, loss });
            }
            sum += loss * batch.len() as f64;
            let lr = cosine_schedule(cfg, step, total);
            optimizer.step(current.params_mut(), &grad, lr);
            step += 1;
        }
        let validation = validator.map(|v| v(&current));
        trace.push(EpochTrace {
            epoch,
            mean_loss: sum / data.len() as f64,
            validation,
        });
        match validation {
            Some(score) if score > best.2 => best = (current.clone(), epoch, score),
            Some(_) => {}
            None => best = (current.clone(), epoch, f64::NEG_INFINITY),
        }
    }
    Ok(TrainOutcome {
        model: best.0,
        trace,
        best_epoch: best.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{random_sample, vocab};
    use crate::model::ModelConfig;
    use crate::rng::seeded;

    fn data(n: usize) -> (Model, Vec<EncodedSample>) {
        let v = vocab(5);
        let cfg = ModelConfig { window: 3, embed_dim: 8, hidden_dim: 8, ..ModelConfig::default() };
        let m = Model::init(&v, cfg, &mut seeded(1)).unwrap();
        let mut rng = seeded(2);
        let xs = (0..n)
            .map(|_| {
                let mut s = random_sample(&mut rng, 5, 3);
                // Target is the last history behavior: learnable.
                s.target = s.history[2].behavior;
                m.encode(&s).unwrap()
            })
            .collect();
        (m, xs)
    }

    #[test]
    fn zero_epochs_leave_parameters() {
        let (m, xs) = data(16);
        let cfg = OptimizerConfig { epochs: 0, ..OptimizerConfig::default() };
        let out = train(&m, TrainData::Sft(&xs), &cfg, None, &mut seeded(3)).unwrap();
        assert_eq!(out.model, m);
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn loss_decreases_on_learnable_data() {
        let (m, xs) = data(200);
        let cfg = OptimizerConfig { epochs: 8, lr_max: 0.5, ..OptimizerConfig::default() };
        let out = train(&m, TrainData::Sft(&xs), &cfg, None, &mut seeded(3)).unwrap();
        let first = out.trace[0].mean_loss;
        let last = out.trace.last().unwrap().mean_loss;
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn traces_are_reproducible() {
        let (m, xs) = data(40);
        let cfg = OptimizerConfig { epochs: 3, ..OptimizerConfig::default() };
        let a = train(&m, TrainData::Sft(&xs), &cfg, None, &mut seeded(7)).unwrap();
        let b = train(&m, TrainData::Sft(&xs), &cfg, None, &mut seeded(7)).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn divergence_aborts() {
        let (m, xs) = data(40);
        let cfg = OptimizerConfig { epochs: 3, lr_max: 1e300, lr_min: 1e300, ..OptimizerConfig::default() };
        assert!(matches!(
            train(&m, TrainData::Sft(&xs), &cfg, None, &mut seeded(7)),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn validator_picks_best_epoch() {
        let (m, xs) = data(40);
        let cfg = OptimizerConfig { epochs: 4, ..OptimizerConfig::default() };
        // Prefers the untouched parameters.
        let start = m.clone();
        let v = move |x: &Model| if x == &start { 1.0 } else { 0.0 };
        let out = train(&m, TrainData::Sft(&xs), &cfg, Some(&v), &mut seeded(7)).unwrap();
        assert_eq!(out.best_epoch, 0);
        assert_eq!(out.model, m);
    }
}
