use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{SyntheticSpec, Thresholds};
use crate::error::{invalid, Error, Result};
use crate::model::{LossKind, ModelConfig, OptimizerConfig, OptimizerRegistry};
use crate::select::StrategyRegistry;

/// What to do with a selected sample the reference model already gets right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectionPolicy {
    /// Reject the reference model's best non-truth behavior.
    RunnerUp,
    /// Emit no pair for the sample.
    Drop,
}

/// Every knob of a run. Loaded from TOML or JSON; unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Master seed. Every random choice draws from a named substream of it.
    pub seed: u64,
    /// Event log to train on. When absent, `synthetic` is generated.
    pub events: Option<PathBuf>,
    /// Generator settings. Its `window` is replaced by `model.window`.
    pub synthetic: SyntheticSpec,
    /// Auxiliary instruction corpus (JSONL of `{input, output}`). When
    /// absent, a synthetic corpus of `auxiliary_synthetic_size` pairs is used.
    pub auxiliary_corpus: Option<PathBuf>,
    pub auxiliary_synthetic_size: usize,
    /// Auxiliary pairs longer than this many tokens are dropped.
    pub auxiliary_max_len: usize,
    pub thresholds: Thresholds,
    /// Auxiliary mixing ratio.
    pub epsilon: f64,
    /// Weight of the confidence term in the difficulty score.
    pub lambda: f64,
    /// Samples selected per behavior.
    pub per_category: usize,
    pub beta: f64,
    pub model: ModelConfig,
    pub stage_a: OptimizerConfig,
    pub stage_b: OptimizerConfig,
    /// Registered selection strategy: `kmeans`, `random` or `topk`.
    pub strategy: String,
    pub invert_penalty: bool,
    pub rejection: RejectionPolicy,
    /// Train stage A on every behavior instead of anchors only.
    pub skip_stage_a: bool,
    /// Stop after stage A; the policy is the reference model.
    pub skip_stage_b: bool,
    pub b_loss: LossKind,
    /// Target size per behavior of the balanced test set.
    pub balanced_per_class: usize,
    /// Require events to be sorted within each user.
    pub strict_order: bool,
    /// `error`, `warn`, `info`, `debug` or `trace`. Read by the command line.
    pub log_level: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            events: None,
            synthetic: SyntheticSpec::default(),
            auxiliary_corpus: None,
            auxiliary_synthetic_size: 2_000,
            auxiliary_max_len: 512,
            thresholds: Thresholds::default(),
            epsilon: 0.05,
            lambda: 0.5,
            per_category: 20,
            beta: 0.1,
            model: ModelConfig::default(),
            stage_a: OptimizerConfig {
                lr_max: 0.4,
                ..OptimizerConfig::default()
            },
            stage_b: OptimizerConfig {
                lr_max: 0.01,
                ..OptimizerConfig::default()
            },
            strategy: "kmeans".into(),
            invert_penalty: false,
            rejection: RejectionPolicy::RunnerUp,
            skip_stage_a: false,
            skip_stage_b: false,
            b_loss: LossKind::Dpo,
            balanced_per_class: 500,
            strict_order: false,
            log_level: "info".into(),
        }
    }
}

impl PipelineConfig {
    /// Parses TOML, or JSON when the file name ends in `.json`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        };
        parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Tables given in the document overlay the defaults key by key, so a
    /// partial `[stage_b]` keeps the remaining stage-B defaults.
    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        let doc: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
        Self::overlay(serde_json::to_value(doc).map_err(|e| e.to_string())?)
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        Self::overlay(serde_json::from_str(text).map_err(|e| e.to_string())?)
    }

    fn overlay(doc: serde_json::Value) -> std::result::Result<Self, String> {
        fn merge(base: &mut serde_json::Value, top: serde_json::Value) {
            match (base, top) {
                (serde_json::Value::Object(b), serde_json::Value::Object(t)) => {
                    for (k, v) in t {
                        match b.get_mut(&k) {
                            Some(slot) => merge(slot, v),
                            None => {
                                b.insert(k, v);
                            }
                        }
                    }
                }
                (slot, v) => *slot = v,
            }
        }
        if !doc.is_object() {
            return Err("config must be a table".into());
        }
        let mut value = serde_json::to_value(Self::default()).map_err(|e| e.to_string())?;
        merge(&mut value, doc);
        serde_json::from_value(value).map_err(|e| e.to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        self.model.validate()?;
        if self.events.is_none() {
            self.synthetic.validate()?;
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            invalid!("epsilon must be non-negative, got {}", self.epsilon);
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            invalid!("lambda must lie in [0, 1], got {}", self.lambda);
        }
        if self.per_category == 0 {
            invalid!("per_category must be at least 1");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            invalid!("beta must be positive, got {}", self.beta);
        }
        if self.balanced_per_class == 0 {
            invalid!("balanced_per_class must be at least 1");
        }
        if self.epsilon > 0.0 && self.auxiliary_corpus.is_none() && self.auxiliary_synthetic_size == 0 {
            invalid!("epsilon > 0 needs an auxiliary corpus");
        }
        self.stage_a.validate()?;
        self.stage_b.validate()?;
        let optimizers = OptimizerRegistry::builtin();
        optimizers.get(&self.stage_a.name)?;
        optimizers.get(&self.stage_b.name)?;
        StrategyRegistry::builtin().get(&self.strategy)?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(bytes))
    }

    /// The generator spec with the window aligned to the model.
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            window: self.model.window,
            ..self.synthetic.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        PipelineConfig::default().validate().unwrap();
        let d = PipelineConfig::default();
        assert_eq!(
            (d.thresholds.anchor, d.epsilon, d.lambda, d.per_category, d.beta, d.model.window),
            (0.01, 0.05, 0.5, 20, 0.1, 20)
        );
    }

    #[test]
    fn toml_overrides_and_rejects_unknown_keys() {
        let cfg = PipelineConfig::from_toml("seed = 3\nepsilon = 0.0\n[stage_b]\nepochs = 2\n").unwrap();
        assert_eq!((cfg.seed, cfg.epsilon, cfg.stage_b.epochs), (3, 0.0, 2));
        assert_eq!(cfg.stage_b.batch_size, 8);
        assert_eq!(cfg.stage_b.lr_max, PipelineConfig::default().stage_b.lr_max);
        assert_ne!(cfg.stage_a.lr_max, cfg.stage_b.lr_max);
        assert!(PipelineConfig::from_toml("sed = 3\n").is_err());
        assert!(PipelineConfig::from_toml("[model]\nwidth = 3\n").is_err());
        let json = PipelineConfig::from_json(r#"{"beta": 0.5, "synthetic": {"num_users": 10}}"#).unwrap();
        assert_eq!((json.beta, json.synthetic.num_users, json.synthetic.num_behaviors), (0.5, 10, 30));
    }

    #[test]
    fn bad_values_rejected() {
        let bad = [
            PipelineConfig { beta: 0.0, ..Default::default() },
            PipelineConfig { lambda: 1.5, ..Default::default() },
            PipelineConfig { per_category: 0, ..Default::default() },
            PipelineConfig { strategy: "greedy".into(), ..Default::default() },
            PipelineConfig { epsilon: -0.1, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().unwrap_err().is_validation());
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let b = PipelineConfig { seed: 1, ..Default::default() };
        assert_eq!(a.content_hash(), PipelineConfig::default().content_hash());
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
