use serde::Serialize;

use super::{EventLog, Sample, TargetContext};

/// Counts reported alongside windowed samples.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct WindowSummary {
    pub samples: usize,
    pub users_with_samples: usize,
    /// Users with at most `window` events, which yield nothing.
    pub short_users: usize,
}

/// Slides a window of `window` events over every user stream. Each position
/// `i >= window` becomes one sample predicting `events[i]` from
/// `events[i - window..i]`.
pub fn build_samples(log: &EventLog, window: usize) -> (Vec<Sample>, WindowSummary) {
    assert!(window >= 1, "window length must be at least 1");
    let mut samples = Vec::new();
    let mut summary = WindowSummary::default();
    for stream in &log.users {
        let events = &stream.events;
        if events.len() <= window {
            summary.short_users += 1;
            continue;
        }
        summary.users_with_samples += 1;
        for i in window..events.len() {
            samples.push(Sample {
                history: events[i - window..i].to_vec(),
                target: events[i].behavior,
                target_context: TargetContext::from(&events[i]),
            });
        }
    }
    summary.samples = samples.len();
    (samples, summary)
}
