use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RejectionPolicy;
use crate::data::io::{sample_from_json, sample_json};
use crate::data::{BehaviorId, FrequencyProfile, Sample, Vocabulary};
use crate::error::{invalid, Error, Result};
use crate::eval::{confusion_counts, macro_accuracies};
use crate::model::{
    train, DpoExample, EncodedSample, EpochTrace, LossKind, Model, OptimizerConfig, PreferencePair, TrainData,
};
use crate::prompt::{draw_auxiliary, filter_corpus, AuxiliaryCorpus};
use crate::rng::Rng;

/// Trained parameters plus the per-epoch record.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub model: Model,
    pub trace: Vec<EpochTrace>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxiliaryMix {
    pub count: usize,
    pub drawn_with_replacement: bool,
    pub filtered_corpus_size: usize,
}

/// Scores a model by Overall macro accuracy on a fixed encoded set.
pub struct MacroValidator<'a> {
    pub encoded: Vec<EncodedSample>,
    pub profile: &'a FrequencyProfile,
}

impl<'a> MacroValidator<'a> {
    /// `None` when there is nothing to validate on.
    pub fn new(model: &Model, samples: &[Sample], profile: &'a FrequencyProfile) -> Result<Option<Self>> {
        if samples.is_empty() {
            return Ok(None);
        }
        Ok(Some(Self {
            encoded: model.encode_all(samples)?,
            profile,
        }))
    }

    pub fn score(&self, model: &Model) -> f64 {
        let preds: Vec<BehaviorId> = model
            .predict_encoded_batch(&self.encoded)
            .into_iter()
            .map(|o| o.argmax)
            .collect();
        let labels: Vec<BehaviorId> = self.encoded.iter().map(|x| BehaviorId(x.target)).collect();
        let counts = confusion_counts(&preds, &labels, self.profile.vocab.len()).expect("validation labels in range");
        macro_accuracies(&counts, &self.profile.categories)
            .overall
            .unwrap_or(0.0)
    }
}

fn as_validator<'v>(v: Option<&'v MacroValidator<'_>>) -> Option<Box<dyn Fn(&Model) -> f64 + 'v>> {
    v.map(|v| Box::new(move |m: &Model| v.score(m)) as Box<dyn Fn(&Model) -> f64>)
}

/// Stage one: supervised training on `d_a` plus `floor(epsilon * |d_a|)`
/// auxiliary pairs, which share the cross-entropy objective with behavior
/// records.
#[allow(clippy::too_many_arguments)]
pub fn run_a_tuning(
    init: &Model,
    d_a: &[Sample],
    corpus: &AuxiliaryCorpus,
    epsilon: f64,
    max_len: usize,
    cfg: &OptimizerConfig,
    validator: Option<&MacroValidator<'_>>,
    rng: &mut Rng,
) -> Result<(StageOutcome, AuxiliaryMix)> {
    if d_a.is_empty() {
        invalid!("stage A needs at least one training sample");
    }
    let filtered = filter_corpus(corpus, max_len);
    let (picks, with_replacement) = draw_auxiliary(d_a.len(), filtered.len(), epsilon, rng)?;
    let mut data = init.encode_all(d_a)?;
    data.extend(picks.iter().map(|&i| init.encode_auxiliary(filtered[i])));
    let v = as_validator(validator);
    let out = train(init, TrainData::Sft(&data), cfg, v.as_deref(), rng)?;
    Ok((
        StageOutcome {
            model: out.model,
            trace: out.trace,
            best_epoch: out.best_epoch,
        },
        AuxiliaryMix {
            count: picks.len(),
            drawn_with_replacement: with_replacement,
            filtered_corpus_size: filtered.len(),
        },
    ))
}

/// One pair per sample: the truth is chosen, the reference model's top
/// prediction is rejected. When that prediction is correct the runner-up is
/// rejected instead, or the sample is dropped under [`RejectionPolicy::Drop`].
pub fn build_preference_pairs(
    samples: &[Sample],
    reference: &Model,
    policy: RejectionPolicy,
) -> Result<Vec<PreferencePair>> {
    if reference.vocab_size() < 2 {
        invalid!("preference pairs need at least two behaviors");
    }
    let outputs = reference.predict_batch(samples)?;
    let mut pairs = Vec::with_capacity(samples.len());
    for (s, out) in samples.iter().zip(outputs) {
        let rejected = if out.argmax != s.target {
            out.argmax
        } else {
            match policy {
                RejectionPolicy::Drop => continue,
                RejectionPolicy::RunnerUp => out.best_excluding(s.target).expect("vocabulary has two behaviors"),
            }
        };
        pairs.push(PreferencePair::new(s.clone(), s.target, rejected)?);
    }
    Ok(pairs)
}

/// Encodes pairs with the reference log-probabilities attached.
pub fn dpo_examples(reference: &Model, pairs: &[PreferencePair]) -> Result<Vec<DpoExample>> {
    pairs
        .iter()
        .map(|p| {
            let x = reference.encode(&p.sample)?;
            Ok(DpoExample::build(reference, x, p.chosen.0, p.rejected.0))
        })
        .collect()
}

/// Stage two: starts from `reference` and optimizes the preference loss, or
/// plain cross-entropy on the chosen responses when `loss` is SFT. The
/// reference model is only read.
pub fn run_b_tuning(
    reference: &Model,
    pairs: &[PreferencePair],
    beta: f64,
    loss: LossKind,
    cfg: &OptimizerConfig,
    validator: Option<&MacroValidator<'_>>,
    rng: &mut Rng,
) -> Result<StageOutcome> {
    if pairs.is_empty() {
        invalid!("stage B needs at least one preference pair");
    }
    let v = as_validator(validator);
    let out = match loss {
        LossKind::Dpo => {
            let examples = dpo_examples(reference, pairs)?;
            train(reference, TrainData::Dpo { pairs: &examples, beta }, cfg, v.as_deref(), rng)?
        }
        LossKind::Sft => {
            let samples: Vec<Sample> = pairs.iter().map(|p| p.sample.clone()).collect();
            let encoded = reference.encode_all(&samples)?;
            train(reference, TrainData::Sft(&encoded), cfg, v.as_deref(), rng)?
        }
    };
    Ok(StageOutcome {
        model: out.model,
        trace: out.trace,
        best_epoch: out.best_epoch,
    })
}

/// Mean of `beta * ((log pi(y_w) - log ref(y_w)) - (log pi(y_l) - log ref(y_l)))`.
pub fn mean_implicit_margin(policy: &Model, reference: &Model, pairs: &[PreferencePair], beta: f64) -> Result<f64> {
    if pairs.is_empty() {
        invalid!("no pairs");
    }
    let examples = dpo_examples(reference, pairs)?;
    let total: f64 = policy
        .predict_encoded_batch(&examples.iter().map(|e| e.input.clone()).collect::<Vec<_>>())
        .iter()
        .zip(&examples)
        .map(|(out, e)| {
            beta * ((out.log_probs[e.chosen] - e.ref_chosen) - (out.log_probs[e.rejected] - e.ref_rejected))
        })
        .sum();
    Ok(total / pairs.len() as f64)
}

/// One `{"sample": .., "chosen": name, "rejected": name}` object per line.
pub fn write_pairs_jsonl(pairs: &[PreferencePair], vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut out = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for p in pairs {
        let line = serde_json::json!({
            "sample": sample_json(&p.sample, vocab)?,
            "chosen": vocab.name(p.chosen)?,
            "rejected": vocab.name(p.rejected)?,
        });
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(pairs.len())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PairLine {
    sample: serde_json::Value,
    chosen: String,
    rejected: String,
}

pub fn load_pairs_jsonl(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<PreferencePair>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: Error| match e {
            Error::Parse { message, .. } | Error::LineValidation { message, .. } => Error::LineValidation {
                line: i + 1,
                message,
            },
            other => other,
        };
        let raw: PairLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let sample = sample_from_json(raw.sample, vocab).map_err(at)?;
        let chosen = vocab.id(&raw.chosen).map_err(at)?;
        let rejected = vocab.id(&raw.rejected).map_err(at)?;
        if chosen != sample.target {
            return Err(Error::LineValidation {
                line: i + 1,
                message: "chosen response differs from the sample's target".into(),
            });
        }
        pairs.push(PreferencePair::new(sample, chosen, rejected).map_err(|e| Error::LineValidation {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{compute_frequency_profile, Thresholds};
    use crate::model::tests::{random_sample, vocab};
    use crate::model::{dpo_loss, ModelConfig};
    use crate::rng::seeded;

    fn setup(n: usize) -> (Vocabulary, Model, Vec<Sample>) {
        let v = vocab(5);
        let cfg = ModelConfig { window: 4, ..Default::default() };
        let mut rng = seeded(11);
        let m = Model::init(&v, cfg, &mut rng).unwrap();
        let samples = (0..n).map(|_| random_sample(&mut rng, 5, 4)).collect();
        (v, m, samples)
    }

    #[test]
    fn pairs_follow_the_reference_prediction() {
        let (_, m, samples) = setup(40);
        let pairs = build_preference_pairs(&samples, &m, RejectionPolicy::RunnerUp).unwrap();
        assert_eq!(pairs.len(), samples.len());
        for (p, s) in pairs.iter().zip(&samples) {
            let out = m.forward(s).unwrap();
            assert_eq!(p.chosen, s.target);
            assert_ne!(p.chosen, p.rejected);
            if out.argmax != s.target {
                assert_eq!(p.rejected, out.argmax);
            } else {
                assert_eq!(Some(p.rejected), out.best_excluding(s.target));
            }
        }
    }

    #[test]
    fn drop_policy_skips_correct_predictions() {
        let (_, m, samples) = setup(40);
        let wrong = samples.iter().filter(|s| m.forward(s).unwrap().argmax != s.target).count();
        let pairs = build_preference_pairs(&samples, &m, RejectionPolicy::Drop).unwrap();
        assert_eq!(pairs.len(), wrong);
    }

    #[test]
    fn single_behavior_vocabulary_rejected() {
        // A one-behavior model cannot exist, so no pair can be built for it.
        assert!(Model::zeros(1, ModelConfig { window: 4, ..Default::default() }).is_err());
    }

    #[test]
    fn zero_steps_keep_reference() {
        let (_, m, samples) = setup(16);
        let pairs = build_preference_pairs(&samples, &m, RejectionPolicy::RunnerUp).unwrap();
        let cfg = OptimizerConfig { epochs: 0, ..Default::default() };
        let out = run_b_tuning(&m, &pairs, 0.1, LossKind::Dpo, &cfg, None, &mut seeded(0)).unwrap();
        assert_eq!(out.model, m);
        let (loss, _) = dpo_loss(&out.model, &m, &pairs, 0.1).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn dpo_training_grows_the_margin_and_leaves_reference_alone() {
        let (_, m, samples) = setup(64);
        let before = m.checksum();
        let pairs = build_preference_pairs(&samples, &m, RejectionPolicy::RunnerUp).unwrap();
        let cfg = OptimizerConfig { epochs: 3, lr_max: 0.5, ..Default::default() };
        let a = run_b_tuning(&m, &pairs, 0.5, LossKind::Dpo, &cfg, None, &mut seeded(4)).unwrap();
        let b = run_b_tuning(&m, &pairs, 0.5, LossKind::Dpo, &cfg, None, &mut seeded(4)).unwrap();
        assert_eq!(m.checksum(), before);
        assert_eq!(a.model, b.model);
        assert!(mean_implicit_margin(&a.model, &m, &pairs, 0.5).unwrap() > 0.0);
    }

    #[test]
    fn stage_a_counts_auxiliary_records() {
        let (_, m, samples) = setup(100);
        let corpus = AuxiliaryCorpus::synthetic(30, &mut seeded(2));
        let cfg = OptimizerConfig { epochs: 1, ..Default::default() };
        let (_, mix) = run_a_tuning(&m, &samples, &corpus, 0.05, 512, &cfg, None, &mut seeded(3)).unwrap();
        assert_eq!(mix.count, 5);
        assert!(!mix.drawn_with_replacement);
        let (_, none) = run_a_tuning(&m, &samples, &corpus, 0.0, 512, &cfg, None, &mut seeded(3)).unwrap();
        assert_eq!(none.count, 0);
        assert!(run_a_tuning(&m, &[], &corpus, 0.05, 512, &cfg, None, &mut seeded(3)).is_err());
    }

    #[test]
    fn validator_scores_macro_accuracy() {
        let (v, m, samples) = setup(50);
        let profile = compute_frequency_profile(&samples, &v, Thresholds::default()).unwrap();
        let val = MacroValidator::new(&m, &samples, &profile).unwrap().unwrap();
        let s = val.score(&m);
        assert!((0.0..=1.0).contains(&s));
        assert!(MacroValidator::new(&m, &[], &profile).unwrap().is_none());
    }

    #[test]
    fn pairs_round_trip() {
        let (v, m, samples) = setup(10);
        let pairs = build_preference_pairs(&samples, &m, RejectionPolicy::RunnerUp).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        assert_eq!(write_pairs_jsonl(&pairs, &v, &path).unwrap(), 10);
        assert_eq!(load_pairs_jsonl(&path, &v).unwrap(), pairs);
    }
}
