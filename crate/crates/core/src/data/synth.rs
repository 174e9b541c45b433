//! Synthetic long-tailed behavior logs with learnable history dependence.
//!
//! Behavior marginals follow a Zipf law over a seeded ranking of the
//! vocabulary. A shared routine table maps (hour bucket of the next event,
//! previous behavior) to a preferred next behavior; the table is built so
//! that the mass routed into each behavior matches its Zipf share. Every user
//! copies the routine table and replaces a fraction of its cells with
//! personal picks drawn from the same Zipf law. Each next event follows the
//! user's rule with probability `markov_coherence` and is a Zipf draw
//! otherwise.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{hour_bucket, BehaviorEvent, BehaviorId, EventLog, UserStream, Vocabulary};
use crate::error::{invalid, Result};
use crate::rng::{self, Rng};

const BASE_NAMES: &[&str] = &[
    "Video", "Music", "Social Media", "Messaging", "Gaming", "Online Shopping", "News",
    "Navigation", "Short Video", "Reading", "Exercise", "Weather Check", "Food Delivery",
    "Public Transit", "Photography", "Podcast", "Banking", "Email", "Calendar", "Live Stream",
    "Ride Hailing", "Cycling", "Fitness Tracking", "Sports Match", "Animation", "E-book",
    "Travel Booking", "Stock Trading", "Language Learning", "Meditation", "Recipe Browsing",
    "Car Audio", "Smart Home", "Job Search", "Dating", "Lottery", "Karaoke", "Parking",
    "Flight Status", "Museum Guide",
];

const HOME: &str = "home";
const WORK: &str = "workplace";
const OUTINGS: &[&str] = &["commute", "restaurant", "mall", "gym", "park", "cafe"];

/// Parameters of the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_behaviors: usize,
    pub num_users: usize,
    /// Target number of windowed samples over all users.
    pub num_samples: usize,
    pub zipf_exponent: f64,
    /// Probability that the next event follows the user's rule.
    pub markov_coherence: f64,
    pub rng_seed: u64,
    /// Window length the sample budget is computed for.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Fraction of routine-table cells each user replaces with personal picks.
    #[serde(default = "default_variation")]
    pub user_rule_variation: f64,
}

fn default_window() -> usize {
    20
}

fn default_variation() -> f64 {
    0.25
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_behaviors: 30,
            num_users: 200,
            num_samples: 20_000,
            zipf_exponent: 1.2,
            markov_coherence: 0.8,
            rng_seed: 0,
            window: default_window(),
            user_rule_variation: default_variation(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_behaviors < 2 {
            invalid!("num_behaviors must be at least 2");
        }
        if self.num_users == 0 {
            invalid!("num_users must be positive");
        }
        if !(self.zipf_exponent > 0.0 && self.zipf_exponent.is_finite()) {
            invalid!("zipf_exponent must be positive, got {}", self.zipf_exponent);
        }
        if !(0.0..=1.0).contains(&self.markov_coherence) {
            invalid!("markov_coherence must lie in [0, 1], got {}", self.markov_coherence);
        }
        if !(0.0..=1.0).contains(&self.user_rule_variation) {
            invalid!("user_rule_variation must lie in [0, 1]");
        }
        if self.window == 0 {
            invalid!("window must be positive");
        }
        Ok(())
    }

    /// Zipf probability of each rank (rank 0 is the most frequent).
    pub fn zipf_probabilities(&self) -> Vec<f64> {
        let raw: Vec<f64> = (1..=self.num_behaviors)
            .map(|k| (k as f64).powf(-self.zipf_exponent))
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }
}

/// One user's rule table, indexed `[hour_bucket][previous behavior]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRules {
    pub user: String,
    pub table: Vec<Vec<BehaviorId>>,
}

impl UserRules {
    pub fn preferred_next(&self, previous: BehaviorId, next_hour: u8) -> BehaviorId {
        self.table[hour_bucket(next_hour)][previous.0]
    }
}

/// Hidden generative structure, written next to the log for audits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SyntheticSpec,
    /// Zipf probability per behavior id.
    pub marginals: Vec<f64>,
    pub routine: Vec<Vec<BehaviorId>>,
    pub users: Vec<UserRules>,
}

fn behavior_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| match BASE_NAMES.get(i) {
            Some(name) => (*name).to_owned(),
            None => format!("Behavior {i:03}"),
        })
        .collect()
}

/// Routes each (hour bucket, previous) cell to a next behavior so that the
/// mass flowing into every behavior approximates its marginal. Cells carry
/// mass `marginal[prev] / 4`; the heaviest cells are placed first, each into
/// a random behavior among those that still need at least half of the cell.
fn routine_table(marginals: &[f64], rng: &mut Rng) -> Vec<Vec<BehaviorId>> {
    let n = marginals.len();
    let mut cells: Vec<(usize, usize)> = (0..4).flat_map(|h| (0..n).map(move |b| (h, b))).collect();
    cells.shuffle(rng);
    cells.sort_by(|a, b| marginals[b.1].total_cmp(&marginals[a.1]));
    let mut deficit = marginals.to_vec();
    let mut table = vec![vec![BehaviorId(0); n]; 4];
    for (h, prev) in cells {
        let mass = marginals[prev] / 4.0;
        let eligible: Vec<usize> = (0..n).filter(|&t| deficit[t] >= 0.5 * mass).collect();
        let target = if eligible.is_empty() {
            (0..n)
                .max_by(|&a, &b| deficit[a].total_cmp(&deficit[b]))
                .expect("vocabulary is non-empty")
        } else {
            eligible[rng.random_range(0..eligible.len())]
        };
        deficit[target] -= mass;
        table[h][prev] = BehaviorId(target);
    }
    table
}

fn location_for(hour: u8, day: u8, rng: &mut Rng) -> &'static str {
    let weekday = day <= 5;
    let roll: f64 = rng.random();
    match hour {
        0..=6 | 22..=23 => HOME,
        9..=17 if weekday && roll < 0.75 => WORK,
        _ if roll < 0.45 => HOME,
        _ => OUTINGS[rng.random_range(0..OUTINGS.len())],
    }
}

/// Generates a log whose windowed sample count is close to
/// `spec.num_samples`, together with the rules that produced it.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<(EventLog, GroundTruth)> {
    spec.validate()?;
    let n = spec.num_behaviors;
    let names = behavior_names(n);
    let vocab = Vocabulary::from_labels(names.iter().map(String::as_str))?;

    let mut setup = rng::substream(spec.rng_seed, "synth/setup");
    // rank -> behavior id
    let mut ranking: Vec<usize> = (0..n).collect();
    ranking.shuffle(&mut setup);
    let zipf = spec.zipf_probabilities();
    let mut marginals = vec![0.0; n];
    for (rank, &id) in ranking.iter().enumerate() {
        marginals[id] = zipf[rank];
    }
    let marginal_sampler = WeightedIndex::new(&marginals).expect("zipf weights are positive");
    let routine = routine_table(&marginals, &mut setup);

    let per_user = spec.num_samples.div_ceil(spec.num_users);
    let len = per_user + spec.window;
    let mut users = Vec::with_capacity(spec.num_users);
    let mut rules = Vec::with_capacity(spec.num_users);
    for u in 0..spec.num_users {
        let user = format!("user{u:05}");
        let mut r = rng::substream(spec.rng_seed, &format!("synth/{user}"));
        let table: Vec<Vec<BehaviorId>> = routine
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&cell| {
                        if r.random_bool(spec.user_rule_variation) {
                            BehaviorId(marginal_sampler.sample(&mut r))
                        } else {
                            cell
                        }
                    })
                    .collect()
            })
            .collect();
        let user_rules = UserRules {
            user: user.clone(),
            table,
        };

        let mut slots: Vec<(u8, u8)> = (0..len)
            .map(|_| (r.random_range(1..=7u8), r.random_range(0..24u8)))
            .collect();
        slots.sort_unstable();
        let mut events: Vec<BehaviorEvent> = Vec::with_capacity(len);
        for (day, hour) in slots {
            let behavior = match events.last() {
                Some(prev) if r.random_bool(spec.markov_coherence) => {
                    user_rules.preferred_next(prev.behavior, hour)
                }
                _ => BehaviorId(marginal_sampler.sample(&mut r)),
            };
            events.push(BehaviorEvent {
                location: location_for(hour, day, &mut r).to_owned(),
                day_of_week: day,
                hour,
                behavior,
            });
        }
        users.push(UserStream { user, events });
        rules.push(user_rules);
    }
    let truth = GroundTruth {
        spec: spec.clone(),
        marginals,
        routine,
        users: rules,
    };
    Ok((EventLog { vocab, users }, truth))
}
