//! Supervised and preference losses with analytic gradients.

use super::{EncodedSample, Model};
use crate::data::{BehaviorId, Sample};
use crate::error::{invalid, Result};

/// A sample with the preferred (`chosen`) and dispreferred (`rejected`)
/// behavior.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferencePair {
    pub sample: Sample,
    pub chosen: BehaviorId,
    pub rejected: BehaviorId,
}

impl PreferencePair {
    pub fn new(sample: Sample, chosen: BehaviorId, rejected: BehaviorId) -> Result<Self> {
        if chosen == rejected {
            invalid!("preference pair needs distinct responses, both are {}", chosen.0);
        }
        Ok(Self {
            sample,
            chosen,
            rejected,
        })
    }
}

/// Encoded pair with the frozen reference log-probabilities attached.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoExample {
    pub input: EncodedSample,
    pub chosen: usize,
    pub rejected: usize,
    pub ref_chosen: f64,
    pub ref_rejected: f64,
}

impl DpoExample {
    pub fn build(reference: &Model, input: EncodedSample, chosen: usize, rejected: usize) -> Self {
        let act = reference.forward_encoded(&input);
        Self {
            ref_chosen: act.log_probs[chosen],
            ref_rejected: act.log_probs[rejected],
            input,
            chosen,
            rejected,
        }
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean negative log-likelihood of the targets and its gradient.
pub fn sft_loss_encoded(model: &Model, batch: &[&EncodedSample]) -> (f64, Vec<f64>) {
    assert!(!batch.is_empty(), "SFT batch must be non-empty");
    let n = batch.len() as f64;
    let mut grad = vec![0.0; model.num_params()];
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; model.vocab_size()];
    for x in batch {
        let act = model.forward_encoded(x);
        loss -= act.log_probs[x.target];
        for (d, lp) in dlogits.iter_mut().zip(&act.log_probs) {
            *d = lp.exp() / n;
        }
        dlogits[x.target] -= 1.0 / n;
        model.backward(x, &act, &dlogits, &mut grad);
    }
    (loss / n, grad)
}

pub fn sft_loss(model: &Model, batch: &[Sample]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        invalid!("SFT batch must be non-empty");
    }
    let encoded = model.encode_all(batch)?;
    let refs: Vec<&EncodedSample> = encoded.iter().collect();
    Ok(sft_loss_encoded(model, &refs))
}

/// Mean DPO loss `-log sigmoid(beta * margin)` against precomputed reference
/// log-probabilities. Because `log p_w - log p_l` is a difference of logits,
/// the softmax terms cancel and each pair touches only two logits.
pub fn dpo_loss_encoded(policy: &Model, pairs: &[&DpoExample], beta: f64) -> (f64, Vec<f64>) {
    assert!(!pairs.is_empty(), "DPO batch must be non-empty");
    let n = pairs.len() as f64;
    let mut grad = vec![0.0; policy.num_params()];
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; policy.vocab_size()];
    for pair in pairs {
        assert_ne!(pair.chosen, pair.rejected, "chosen and rejected must differ");
        let x = &pair.input;
        let act = policy.forward_encoded(x);
        let margin = beta
            * ((act.log_probs[pair.chosen] - pair.ref_chosen)
                - (act.log_probs[pair.rejected] - pair.ref_rejected));
        loss += softplus(-margin);
        let g = -sigmoid(-margin) * beta / n;
        dlogits.iter_mut().for_each(|d| *d = 0.0);
        dlogits[pair.chosen] = g;
        dlogits[pair.rejected] = -g;
        policy.backward(x, &act, &dlogits, &mut grad);
    }
    (loss / n, grad)
}

/// DPO loss of `policy` against the frozen `reference`.
pub fn dpo_loss(
    policy: &Model,
    reference: &Model,
    pairs: &[PreferencePair],
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    if !(beta > 0.0) {
        invalid!("beta must be positive, got {beta}");
    }
    if pairs.is_empty() {
        invalid!("DPO needs at least one pair");
    }
    let examples = pairs
        .iter()
        .map(|p| {
            assert_ne!(p.chosen, p.rejected, "chosen and rejected must differ");
            Ok(DpoExample::build(reference, reference.encode(&p.sample)?, p.chosen.0, p.rejected.0))
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&DpoExample> = examples.iter().collect();
    Ok(dpo_loss_encoded(policy, &refs, beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{random_sample, vocab};
    use crate::model::ModelConfig;
    use crate::rng::seeded;
    use rand::Rng as _;

    #[test]
    fn uniform_model_sft_is_log_vocab() {
        let m = Model::zeros(37, ModelConfig::default()).unwrap();
        let mut rng = seeded(1);
        let batch: Vec<Sample> = (0..5).map(|_| random_sample(&mut rng, 37, 20)).collect();
        let (loss, grad) = sft_loss(&m, &batch).unwrap();
        assert!((loss - 37f64.ln()).abs() < 1e-12);
        assert!((loss - 3.6109).abs() < 1e-4);
        assert_eq!(grad.len(), m.num_params());
    }

    #[test]
    fn confident_model_has_vanishing_sft_loss() {
        let cfg = ModelConfig { window: 3, ..ModelConfig::default() };
        let mut m = Model::zeros(4, cfg).unwrap();
        let b = m.layout().output_b;
        m.params_mut()[b + 2] = 60.0;
        let mut s = random_sample(&mut seeded(2), 4, 3);
        s.target = BehaviorId(2);
        let (loss, _) = sft_loss(&m, &[s]).unwrap();
        assert!(loss >= 0.0 && loss < 1e-20);
    }

    #[test]
    fn dpo_at_reference_is_ln2() {
        let v = vocab(6);
        let cfg = ModelConfig { window: 4, ..ModelConfig::default() };
        let mut rng = seeded(3);
        let m = Model::init(&v, cfg, &mut rng).unwrap();
        let pairs: Vec<PreferencePair> = (0..9)
            .map(|_| {
                let s = random_sample(&mut rng, 6, 4);
                let c = rng.random_range(0..6);
                let r = (c + rng.random_range(1..6)) % 6;
                PreferencePair::new(s, BehaviorId(c), BehaviorId(r)).unwrap()
            })
            .collect();
        for beta in [0.1, 1.0, 10.0] {
            let (loss, _) = dpo_loss(&m, &m, &pairs, beta).unwrap();
            assert!((loss - std::f64::consts::LN_2).abs() < 1e-9);
        }
    }

    #[test]
    fn softplus_closed_forms() {
        assert!((softplus(-2.0) - 0.126928).abs() < 1e-6);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        let m = 1.5;
        let losses: Vec<f64> = [0.1, 1.0, 10.0].iter().map(|b| softplus(-b * m)).collect();
        assert!(losses[0] > losses[1] && losses[1] > losses[2]);
    }

    #[test]
    fn equal_responses_rejected() {
        let s = random_sample(&mut seeded(1), 3, 2);
        assert!(PreferencePair::new(s, BehaviorId(1), BehaviorId(1)).is_err());
    }

    #[test]
    fn dpo_validates_arguments() {
        let m = Model::zeros(3, ModelConfig { window: 2, ..ModelConfig::default() }).unwrap();
        let s = random_sample(&mut seeded(1), 3, 2);
        let p = PreferencePair::new(s, BehaviorId(0), BehaviorId(1)).unwrap();
        assert!(dpo_loss(&m, &m, &[p.clone()], 0.0).is_err());
        assert!(dpo_loss(&m, &m, &[], 0.1).is_err());
        assert!(dpo_loss(&m, &m, &[p], 0.1).is_ok());
    }
}
