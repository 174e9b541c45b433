//! Versioned JSON checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::data::Vocabulary;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "progtune-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub vocabulary: Vec<String>,
    pub vocabulary_hash: String,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(model: &Model, vocab: &Vocabulary) -> Result<Self> {
        if vocab.len() != model.vocab_size() {
            return Err(Error::Checkpoint(format!(
                "model has {} outputs but vocabulary has {} entries",
                model.vocab_size(),
                vocab.len()
            )));
        }
        Ok(Self {
            format: FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: *model.config(),
            vocabulary: vocab.names().to_vec(),
            vocabulary_hash: vocab.content_hash(),
            params: model.params().to_vec(),
        })
    }

    pub fn into_model(self) -> Result<(Model, Vocabulary)> {
        if self.format != FORMAT {
            return Err(Error::Format(format!("not a checkpoint: format {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", self.version)));
        }
        let vocab = Vocabulary::new(self.vocabulary)?;
        if vocab.content_hash() != self.vocabulary_hash {
            return Err(Error::Checkpoint("stored vocabulary does not match its hash".into()));
        }
        let model = Model::from_params(vocab.len(), self.config, self.params)?;
        Ok((model, vocab))
    }
}

pub fn save_checkpoint(model: &Model, vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ckpt = Checkpoint::new(model, vocab)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, serde_json::to_vec(&ckpt)?).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint. When `expected` is given, the checkpoint's vocabulary
/// hash must match it.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&Vocabulary>) -> Result<(Model, Vocabulary)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
    if let Some(v) = expected {
        if v.content_hash() != ckpt.vocabulary_hash {
            return Err(Error::Checkpoint(format!(
                "{}: vocabulary hash {} does not match expected {}",
                path.display(),
                ckpt.vocabulary_hash,
                v.content_hash()
            )));
        }
    }
    ckpt.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::vocab;
    use crate::rng::seeded;

    #[test]
    fn round_trip_is_exact() {
        let v = vocab(7);
        let m = Model::init(&v, ModelConfig::default(), &mut seeded(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_checkpoint(&m, &v, &path).unwrap();
        let (back, bv) = load_checkpoint(&path, Some(&v)).unwrap();
        assert_eq!(back, m);
        assert_eq!(bv, v);
    }

    #[test]
    fn vocabulary_mismatch_rejected() {
        let v = vocab(7);
        let m = Model::init(&v, ModelConfig::default(), &mut seeded(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_checkpoint(&m, &v, &path).unwrap();
        let other = Vocabulary::new((0..7).map(|i| format!("x{i}")).collect()).unwrap();
        assert!(matches!(load_checkpoint(&path, Some(&other)), Err(Error::Checkpoint(_))));
    }
}
