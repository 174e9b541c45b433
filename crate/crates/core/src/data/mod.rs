//! Behavior events, windowed samples and long-tail partitioning.

mod balanced;
pub(crate) mod io;
mod profile;
mod split;
mod synth;
mod window;

pub use balanced::{build_balanced_testset, BalanceReport};
pub use io::{
    load_events, load_samples, parse_events, parse_samples, write_events, write_samples,
    EVENT_SCHEMA_VERSION,
};
pub use profile::{
    compute_frequency_profile, split_by_category, CategorySplit, FrequencyCategory,
    FrequencyProfile, Partition, Thresholds,
};
pub use split::{split_users, UserSplit};
pub use synth::{generate_synthetic_dataset, GroundTruth, SyntheticSpec, UserRules};
pub use window::{build_samples, WindowSummary};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Index into a [`Vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BehaviorId(pub usize);

impl BehaviorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered set of behavior labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    names: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, BehaviorId>,
}

impl Vocabulary {
    /// Builds a vocabulary keeping the given order. Names must be unique and
    /// there must be at least two.
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            invalid!("vocabulary needs at least 2 behaviors, got {}", names.len());
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if index.insert(name.clone(), BehaviorId(i)).is_some() {
                invalid!("duplicate behavior label {name:?}");
            }
        }
        Ok(Self { names, index })
    }

    /// Vocabulary of the distinct labels, sorted lexicographically.
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut names: Vec<String> = labels.into_iter().map(str::to_owned).collect();
        names.sort();
        names.dedup();
        Self::new(names)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: BehaviorId) -> Result<&str> {
        self.names
            .get(id.0)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownBehavior(format!("id {}", id.0)))
    }

    pub fn id(&self, name: &str) -> Result<BehaviorId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownBehavior(name.to_owned()))
    }

    pub fn ids(&self) -> impl Iterator<Item = BehaviorId> {
        (0..self.names.len()).map(BehaviorId)
    }

    /// Stable content hash, used to pair checkpoints with their data.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for name in &self.names {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;
    fn try_from(names: Vec<String>) -> Result<Self> {
        Self::new(names)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.names
    }
}

/// One behavior occurring at a place and time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BehaviorEvent {
    pub location: String,
    /// 1 = Monday .. 7 = Sunday.
    pub day_of_week: u8,
    /// 0..=23.
    pub hour: u8,
    pub behavior: BehaviorId,
}

impl BehaviorEvent {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if !(1..=7).contains(&self.day_of_week) {
            invalid!("day_of_week {} outside 1..=7", self.day_of_week);
        }
        if self.hour > 23 {
            invalid!("hour {} outside 0..=23", self.hour);
        }
        if self.behavior.0 >= vocab_size {
            invalid!("behavior id {} outside vocabulary of {}", self.behavior.0, vocab_size);
        }
        Ok(())
    }

    /// Key used for chronological ordering within one week.
    pub fn time_key(&self) -> (u8, u8) {
        (self.day_of_week, self.hour)
    }
}

/// Time and place of the event being predicted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetContext {
    pub day: u8,
    pub hour: u8,
    pub location: String,
}

impl From<&BehaviorEvent> for TargetContext {
    fn from(e: &BehaviorEvent) -> Self {
        Self {
            day: e.day_of_week,
            hour: e.hour,
            location: e.location.clone(),
        }
    }
}

/// A window of history plus the next behavior.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub history: Vec<BehaviorEvent>,
    pub target: BehaviorId,
    pub target_context: TargetContext,
}

/// Chronologically ordered events of one user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserStream {
    pub user: String,
    pub events: Vec<BehaviorEvent>,
}

/// Per-user event streams sharing one vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventLog {
    pub vocab: Vocabulary,
    pub users: Vec<UserStream>,
}

impl EventLog {
    pub fn num_events(&self) -> usize {
        self.users.iter().map(|u| u.events.len()).sum()
    }
}

/// Hour of day folded into four coarse buckets: 0-5, 6-11, 12-17, 18-23.
pub fn hour_bucket(hour: u8) -> usize {
    usize::from(hour.min(23) / 6)
}
