//! Compact categorical next-behavior predictor.
//!
//! Each history event is embedded as the sum of its behavior, hour-bucket,
//! weekday and hashed-location embeddings. History events are pooled with a
//! learned weight per position, the next event's time and place are added,
//! and a `tanh` hidden layer feeds a softmax over the vocabulary. The hidden
//! activation doubles as the sample embedding used for selection.

mod checkpoint;
mod loss;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use loss::{
    dpo_loss, dpo_loss_encoded, sft_loss, sft_loss_encoded, sigmoid, softplus, DpoExample, PreferencePair,
};
pub use optim::{
    cosine_schedule, optimizer_names, AdamW, Optimizer, OptimizerConfig, OptimizerRegistry, Sgd,
};
pub use train::{train, EpochTrace, LossKind, TrainData, TrainOutcome};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{hour_bucket, BehaviorId, Sample, Vocabulary};
use crate::error::{invalid, Result};
use crate::prompt::AuxiliaryPair;
use crate::rng::Rng;

pub const HOUR_BUCKETS: usize = 4;
pub const DAYS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub location_buckets: usize,
    /// History length L.
    pub window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_dim: 64,
            location_buckets: 16,
            window: 20,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.location_buckets == 0 || self.window == 0 {
            invalid!("model dimensions must be positive: {self:?}");
        }
        Ok(())
    }
}

/// Offsets of each parameter block inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub behavior: usize,
    pub hour: usize,
    pub day: usize,
    pub location: usize,
    pub position: usize,
    pub hidden_w: usize,
    pub hidden_b: usize,
    pub output_w: usize,
    pub output_b: usize,
    pub len: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig, vocab: usize) -> Self {
        let e = cfg.embed_dim;
        let h = cfg.hidden_dim;
        let behavior = 0;
        let hour = behavior + vocab * e;
        let day = hour + HOUR_BUCKETS * e;
        let location = day + DAYS * e;
        let position = location + cfg.location_buckets * e;
        let hidden_w = position + cfg.window;
        let hidden_b = hidden_w + h * e;
        let output_w = hidden_b + h;
        let output_b = output_w + vocab * h;
        let len = output_b + vocab;
        Self {
            behavior,
            hour,
            day,
            location,
            position,
            hidden_w,
            hidden_b,
            output_w,
            output_b,
            len,
        }
    }
}

/// Sample reduced to embedding-table indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSample {
    pub behaviors: Vec<usize>,
    pub hours: Vec<usize>,
    pub days: Vec<usize>,
    pub locations: Vec<usize>,
    pub ctx_hour: usize,
    pub ctx_day: usize,
    pub ctx_location: usize,
    pub target: usize,
}

fn hash64(text: &str, salt: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(salt.as_bytes());
    hasher.update([0u8]);
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Location string to embedding bucket.
pub fn location_bucket(location: &str, buckets: usize) -> usize {
    (hash64(location, "loc") % buckets as u64) as usize
}

/// Trainable parameters plus their shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    vocab_size: usize,
    layout: Layout,
    params: Vec<f64>,
}

/// Output of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutput {
    pub log_probs: Vec<f64>,
    /// Hidden activation, the sample's embedding.
    pub embedding: Vec<f64>,
    /// Most probable behavior; ties go to the lowest id.
    pub argmax: BehaviorId,
}

impl PredictionOutput {
    pub fn confidence(&self, y: BehaviorId) -> f64 {
        self.log_probs[y.0].exp()
    }

    /// Most probable behavior other than `excluded` (lowest id on ties).
    pub fn best_excluding(&self, excluded: BehaviorId) -> Option<BehaviorId> {
        argmax_where(&self.log_probs, |i| i != excluded.0).map(BehaviorId)
    }
}

fn argmax_where(values: &[f64], keep: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if !keep(i) {
            continue;
        }
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Activations {
    pub pooled: Vec<f64>,
    pub hidden: Vec<f64>,
    pub log_probs: Vec<f64>,
}

pub(crate) fn log_softmax(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    logits.iter_mut().for_each(|l| *l -= lse);
}

impl Model {
    /// Scaled-uniform initialisation: every block is drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, position weights start at 1.
    pub fn init(vocab: &Vocabulary, config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let mut model = Self::zeros(vocab.len(), config)?;
        let l = model.layout;
        let e = config.embed_dim as f64;
        let mut fill = |params: &mut [f64], fan_in: f64| {
            let bound = 1.0 / fan_in.sqrt();
            params.iter_mut().for_each(|p| *p = rng.random_range(-bound..bound));
        };
        // Embedding rows enter through a d_e-wide sum.
        fill(&mut model.params[l.behavior..l.position], e);
        fill(&mut model.params[l.hidden_w..l.hidden_b], e);
        fill(&mut model.params[l.hidden_b..l.output_w], e);
        fill(&mut model.params[l.output_w..l.len], config.hidden_dim as f64);
        model.params[l.position..l.hidden_w].iter_mut().for_each(|w| *w = 1.0);
        Ok(model)
    }

    pub fn zeros(vocab_size: usize, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        if vocab_size < 2 {
            invalid!("vocabulary must have at least 2 behaviors");
        }
        let layout = Layout::new(&config, vocab_size);
        Ok(Self {
            config,
            vocab_size,
            layout,
            params: vec![0.0; layout.len],
        })
    }

    pub fn from_params(vocab_size: usize, config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        let mut model = Self::zeros(vocab_size, config)?;
        if params.len() != model.params.len() {
            invalid!("expected {} parameters, got {}", model.params.len(), params.len());
        }
        if params.iter().any(|p| !p.is_finite()) {
            invalid!("parameters must be finite");
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Output projection shape as (rows, cols).
    pub fn output_shape(&self) -> (usize, usize) {
        (self.vocab_size, self.config.hidden_dim)
    }

    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn encode(&self, sample: &Sample) -> Result<EncodedSample> {
        if sample.history.len() != self.config.window {
            invalid!(
                "history length {} does not match window {}",
                sample.history.len(),
                self.config.window
            );
        }
        if sample.target.0 >= self.vocab_size {
            invalid!("target id {} outside vocabulary", sample.target.0);
        }
        let nb = self.config.location_buckets;
        let mut enc = EncodedSample {
            behaviors: Vec::with_capacity(self.config.window),
            hours: Vec::with_capacity(self.config.window),
            days: Vec::with_capacity(self.config.window),
            locations: Vec::with_capacity(self.config.window),
            ctx_hour: hour_bucket(sample.target_context.hour),
            ctx_day: usize::from(sample.target_context.day.clamp(1, 7) - 1),
            ctx_location: location_bucket(&sample.target_context.location, nb),
            target: sample.target.0,
        };
        for e in &sample.history {
            if e.behavior.0 >= self.vocab_size {
                invalid!("history behavior id {} outside vocabulary", e.behavior.0);
            }
            enc.behaviors.push(e.behavior.0);
            enc.hours.push(hour_bucket(e.hour));
            enc.days.push(usize::from(e.day_of_week.clamp(1, 7) - 1));
            enc.locations.push(location_bucket(&e.location, nb));
        }
        Ok(enc)
    }

    pub fn encode_all(&self, samples: &[Sample]) -> Result<Vec<EncodedSample>> {
        samples.iter().map(|s| self.encode(s)).collect()
    }

    /// Maps an auxiliary (input, output) pair onto the model's input space:
    /// input tokens are hashed into pseudo-events and the output text into a
    /// label, so auxiliary records train through the same loss as behavior
    /// records.
    pub fn encode_auxiliary(&self, pair: &AuxiliaryPair) -> EncodedSample {
        let w = self.config.window;
        let nb = self.config.location_buckets;
        let tokens: Vec<&str> = pair.input.split_whitespace().collect();
        let token = |i: usize| -> String {
            if tokens.is_empty() {
                format!("#{i}")
            } else {
                format!("{}#{}", tokens[i % tokens.len()], i / tokens.len())
            }
        };
        let mut enc = EncodedSample {
            behaviors: Vec::with_capacity(w),
            hours: Vec::with_capacity(w),
            days: Vec::with_capacity(w),
            locations: Vec::with_capacity(w),
            ctx_hour: (hash64(&pair.input, "ctx-hour") % HOUR_BUCKETS as u64) as usize,
            ctx_day: (hash64(&pair.input, "ctx-day") % DAYS as u64) as usize,
            ctx_location: (hash64(&pair.input, "ctx-loc") % nb as u64) as usize,
            target: (hash64(&pair.output, "aux-label") % self.vocab_size as u64) as usize,
        };
        for i in 0..w {
            let h = hash64(&token(i), "aux-token");
            enc.behaviors.push((h % self.vocab_size as u64) as usize);
            enc.hours.push(((h >> 16) % HOUR_BUCKETS as u64) as usize);
            enc.days.push(((h >> 24) % DAYS as u64) as usize);
            enc.locations.push(((h >> 32) % nb as u64) as usize);
        }
        enc
    }

    fn event_feature(&self, x: &EncodedSample, i: usize, out: &mut [f64]) {
        let e = self.config.embed_dim;
        let l = &self.layout;
        let p = &self.params;
        let b = l.behavior + x.behaviors[i] * e;
        let h = l.hour + x.hours[i] * e;
        let d = l.day + x.days[i] * e;
        let loc = l.location + x.locations[i] * e;
        for k in 0..e {
            out[k] = p[b + k] + p[h + k] + p[d + k] + p[loc + k];
        }
    }

    pub(crate) fn forward_encoded(&self, x: &EncodedSample) -> Activations {
        let e = self.config.embed_dim;
        let hd = self.config.hidden_dim;
        let w = self.config.window;
        let l = &self.layout;
        let p = &self.params;

        let mut pooled = vec![0.0; e];
        let mut feat = vec![0.0; e];
        for i in 0..w {
            self.event_feature(x, i, &mut feat);
            let weight = p[l.position + i] / w as f64;
            for k in 0..e {
                pooled[k] += weight * feat[k];
            }
        }
        let h = l.hour + x.ctx_hour * e;
        let d = l.day + x.ctx_day * e;
        let loc = l.location + x.ctx_location * e;
        for k in 0..e {
            pooled[k] += p[h + k] + p[d + k] + p[loc + k];
        }

        let mut hidden = vec![0.0; hd];
        for (j, out) in hidden.iter_mut().enumerate() {
            let row = &p[l.hidden_w + j * e..l.hidden_w + (j + 1) * e];
            let a: f64 = row.iter().zip(&pooled).map(|(w, z)| w * z).sum::<f64>() + p[l.hidden_b + j];
            *out = a.tanh();
        }

        let mut log_probs = vec![0.0; self.vocab_size];
        for (c, out) in log_probs.iter_mut().enumerate() {
            let row = &p[l.output_w + c * hd..l.output_w + (c + 1) * hd];
            *out = row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>() + p[l.output_b + c];
        }
        log_softmax(&mut log_probs);
        Activations {
            pooled,
            hidden,
            log_probs,
        }
    }

    /// Accumulates into `grad` the gradient of a loss whose derivative with
    /// respect to the logits is `dlogits`.
    pub(crate) fn backward(&self, x: &EncodedSample, act: &Activations, dlogits: &[f64], grad: &mut [f64]) {
        let e = self.config.embed_dim;
        let hd = self.config.hidden_dim;
        let w = self.config.window;
        let l = &self.layout;
        let p = &self.params;

        let mut dhidden = vec![0.0; hd];
        for (c, &g) in dlogits.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[l.output_b + c] += g;
            let base = l.output_w + c * hd;
            for j in 0..hd {
                grad[base + j] += g * act.hidden[j];
                dhidden[j] += g * p[base + j];
            }
        }

        let mut dpooled = vec![0.0; e];
        for j in 0..hd {
            let da = dhidden[j] * (1.0 - act.hidden[j] * act.hidden[j]);
            grad[l.hidden_b + j] += da;
            let base = l.hidden_w + j * e;
            for k in 0..e {
                grad[base + k] += da * act.pooled[k];
                dpooled[k] += da * p[base + k];
            }
        }

        for (table, idx) in [
            (l.hour, x.ctx_hour),
            (l.day, x.ctx_day),
            (l.location, x.ctx_location),
        ] {
            let base = table + idx * e;
            for k in 0..e {
                grad[base + k] += dpooled[k];
            }
        }

        let mut feat = vec![0.0; e];
        for i in 0..w {
            self.event_feature(x, i, &mut feat);
            grad[l.position + i] += feat.iter().zip(&dpooled).map(|(f, d)| f * d).sum::<f64>() / w as f64;
            let scale = p[l.position + i] / w as f64;
            for (table, idx) in [
                (l.behavior, x.behaviors[i]),
                (l.hour, x.hours[i]),
                (l.day, x.days[i]),
                (l.location, x.locations[i]),
            ] {
                let base = table + idx * e;
                for k in 0..e {
                    grad[base + k] += scale * dpooled[k];
                }
            }
        }
    }

    pub fn predict_encoded(&self, x: &EncodedSample) -> PredictionOutput {
        let act = self.forward_encoded(x);
        let argmax = BehaviorId(argmax_where(&act.log_probs, |_| true).expect("vocabulary is non-empty"));
        PredictionOutput {
            log_probs: act.log_probs,
            embedding: act.hidden,
            argmax,
        }
    }

    pub fn forward(&self, sample: &Sample) -> Result<PredictionOutput> {
        Ok(self.predict_encoded(&self.encode(sample)?))
    }

    /// Forward pass over many samples, in input order.
    pub fn predict_batch(&self, samples: &[Sample]) -> Result<Vec<PredictionOutput>> {
        let encoded = self.encode_all(samples)?;
        Ok(self.predict_encoded_batch(&encoded))
    }

    pub fn predict_encoded_batch(&self, encoded: &[EncodedSample]) -> Vec<PredictionOutput> {
        encoded.par_iter().map(|x| self.predict_encoded(x)).collect()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{BehaviorEvent, TargetContext};
    use crate::rng::seeded;

    pub(crate) fn vocab(n: usize) -> Vocabulary {
        Vocabulary::new((0..n).map(|i| format!("b{i:02}")).collect()).unwrap()
    }

    pub(crate) fn random_sample(rng: &mut Rng, vocab: usize, window: usize) -> Sample {
        const LOCS: [&str; 4] = ["home", "workplace", "gym", "mall"];
        let history = (0..window)
            .map(|i| BehaviorEvent {
                location: LOCS[rng.random_range(0..4)].into(),
                day_of_week: 1 + (i % 7) as u8,
                hour: rng.random_range(0..24),
                behavior: BehaviorId(rng.random_range(0..vocab)),
            })
            .collect();
        Sample {
            history,
            target: BehaviorId(rng.random_range(0..vocab)),
            target_context: TargetContext {
                day: rng.random_range(1..=7),
                hour: rng.random_range(0..24),
                location: LOCS[rng.random_range(0..4)].into(),
            },
        }
    }

    #[test]
    fn init_is_seeded() {
        let v = vocab(37);
        let a = Model::init(&v, ModelConfig::default(), &mut seeded(1)).unwrap();
        let b = Model::init(&v, ModelConfig::default(), &mut seeded(1)).unwrap();
        let c = Model::init(&v, ModelConfig::default(), &mut seeded(2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
        assert_eq!(a.output_shape(), (37, 64));
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = Model::zeros(37, ModelConfig::default()).unwrap();
        let s = random_sample(&mut seeded(3), 37, 20);
        let out = m.forward(&s).unwrap();
        for lp in &out.log_probs {
            assert!((lp + 37f64.ln()).abs() < 1e-12);
            assert!((lp - (-3.6109)).abs() < 1e-4);
        }
        assert!((out.confidence(BehaviorId(5)) - 1.0 / 37.0).abs() < 1e-12);
        // All logits tie, so the lowest id wins.
        assert_eq!(out.argmax, BehaviorId(0));
    }

    #[test]
    fn probabilities_normalise() {
        let v = vocab(11);
        let cfg = ModelConfig { window: 6, ..ModelConfig::default() };
        let mut rng = seeded(5);
        for _ in 0..20 {
            let m = Model::init(&v, cfg, &mut rng).unwrap();
            let out = m.forward(&random_sample(&mut rng, 11, 6)).unwrap();
            let total: f64 = out.log_probs.iter().map(|l| l.exp()).sum();
            assert!((total - 1.0).abs() < 1e-6);
            assert_eq!(out.embedding.len(), 64);
        }
    }

    #[test]
    fn equal_position_weights_make_pooling_order_free() {
        let v = vocab(9);
        let cfg = ModelConfig { window: 5, ..ModelConfig::default() };
        let m = Model::init(&v, cfg, &mut seeded(8)).unwrap();
        let s = random_sample(&mut seeded(9), 9, 5);
        let mut swapped = s.clone();
        swapped.history.swap(1, 3);
        let a = m.forward(&s).unwrap();
        let b = m.forward(&swapped).unwrap();
        for (x, y) in a.log_probs.iter().zip(&b.log_probs) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_matches_single() {
        let v = vocab(9);
        let cfg = ModelConfig { window: 4, ..ModelConfig::default() };
        let m = Model::init(&v, cfg, &mut seeded(8)).unwrap();
        let mut rng = seeded(10);
        let samples: Vec<Sample> = (0..7).map(|_| random_sample(&mut rng, 9, 4)).collect();
        let batch = m.predict_batch(&samples).unwrap();
        assert_eq!(batch.len(), 7);
        for (s, out) in samples.iter().zip(&batch) {
            assert_eq!(&m.forward(s).unwrap(), out);
        }
    }

    #[test]
    fn argmax_tie_breaks_low() {
        assert_eq!(argmax_where(&[0.1, 0.5, 0.5, 0.2], |_| true), Some(1));
        assert_eq!(argmax_where(&[0.1, 0.5, 0.5, 0.2], |i| i != 1), Some(2));
    }

    #[test]
    fn wrong_window_rejected() {
        let m = Model::zeros(5, ModelConfig { window: 3, ..ModelConfig::default() }).unwrap();
        let s = random_sample(&mut seeded(1), 5, 4);
        assert!(m.forward(&s).is_err());
    }
}
