//! JSONL readers and writers for event logs and samples.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BehaviorEvent, EventLog, Sample, TargetContext, UserStream, Vocabulary};
use crate::error::{Error, Result};

/// Schema version written in the optional header line of event files.
pub const EVENT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EventRecord {
    user: String,
    day: i64,
    hour: i64,
    location: String,
    behavior: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HistoryRecord {
    day: i64,
    hour: i64,
    location: String,
    behavior: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    history: Vec<HistoryRecord>,
    target: String,
    target_context: ContextRecord,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContextRecord {
    day: i64,
    hour: i64,
    location: String,
}

fn check_time(line: usize, day: i64, hour: i64) -> Result<(u8, u8)> {
    if !(1..=7).contains(&day) {
        return Err(Error::LineValidation {
            line,
            message: format!("day {day} outside 1..=7"),
        });
    }
    if !(0..=23).contains(&hour) {
        return Err(Error::LineValidation {
            line,
            message: format!("hour {hour} outside 0..=23"),
        });
    }
    Ok((day as u8, hour as u8))
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads an event log. With `strict_order`, events of a user must already be
/// in chronological order; otherwise each user's events are stably sorted.
pub fn load_events(path: impl AsRef<Path>, strict_order: bool) -> Result<EventLog> {
    parse_events(&read_to_string(path.as_ref())?, strict_order)
}

pub fn parse_events(text: &str, strict_order: bool) -> Result<EventLog> {
    let mut raw: Vec<(usize, EventRecord)> = Vec::new();
    let mut first = true;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if first {
            first = false;
            let value: serde_json::Value = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if value.get("schema_version").is_some() {
                let header: Header = serde_json::from_value(value).map_err(|e| Error::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
                if header.schema_version != EVENT_SCHEMA_VERSION {
                    return Err(Error::Format(format!(
                        "unsupported event schema version {} (expected {EVENT_SCHEMA_VERSION})",
                        header.schema_version
                    )));
                }
                continue;
            }
        }
        let rec: EventRecord = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        check_time(line_no, rec.day, rec.hour)?;
        raw.push((line_no, rec));
    }
    if raw.is_empty() {
        return Err(Error::EmptyLog);
    }

    let vocab = Vocabulary::from_labels(raw.iter().map(|(_, r)| r.behavior.as_str()))
        .map_err(|e| Error::Format(e.to_string()))?;

    // Users keep first-appearance order.
    let mut order: Vec<String> = Vec::new();
    let mut streams: BTreeMap<String, Vec<BehaviorEvent>> = BTreeMap::new();
    for (line_no, rec) in raw {
        let (day, hour) = check_time(line_no, rec.day, rec.hour)?;
        let event = BehaviorEvent {
            location: rec.location,
            day_of_week: day,
            hour,
            behavior: vocab.id(&rec.behavior)?,
        };
        let stream = streams.entry(rec.user.clone()).or_insert_with(|| {
            order.push(rec.user.clone());
            Vec::new()
        });
        if strict_order {
            if let Some(prev) = stream.last() {
                if event.time_key() < prev.time_key() {
                    return Err(Error::LineValidation {
                        line: line_no,
                        message: format!("event for user {:?} is out of chronological order", rec.user),
                    });
                }
            }
        }
        stream.push(event);
    }

    let users = order
        .into_iter()
        .map(|user| {
            let mut events = streams.remove(&user).unwrap_or_default();
            events.sort_by_key(BehaviorEvent::time_key);
            UserStream { user, events }
        })
        .collect();
    Ok(EventLog { vocab, users })
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Writes a schema header followed by one event per line, grouped by user in
/// log order and chronological within a user.
pub fn write_events(log: &EventLog, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let mut out = create(path)?;
    let io_err = |e| Error::io(path, e);
    serde_json::to_writer(&mut out, &Header { schema_version: EVENT_SCHEMA_VERSION })?;
    out.write_all(b"\n").map_err(io_err)?;
    let mut n = 0;
    for stream in &log.users {
        for e in &stream.events {
            let rec = EventRecord {
                user: stream.user.clone(),
                day: i64::from(e.day_of_week),
                hour: i64::from(e.hour),
                location: e.location.clone(),
                behavior: log.vocab.name(e.behavior)?.to_owned(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n").map_err(io_err)?;
            n += 1;
        }
    }
    out.flush().map_err(io_err)?;
    Ok(n)
}

fn sample_to_record(sample: &Sample, vocab: &Vocabulary) -> Result<SampleRecord> {
    let history = sample
        .history
        .iter()
        .map(|e| {
            Ok(HistoryRecord {
                day: i64::from(e.day_of_week),
                hour: i64::from(e.hour),
                location: e.location.clone(),
                behavior: vocab.name(e.behavior)?.to_owned(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleRecord {
        history,
        target: vocab.name(sample.target)?.to_owned(),
        target_context: ContextRecord {
            day: i64::from(sample.target_context.day),
            hour: i64::from(sample.target_context.hour),
            location: sample.target_context.location.clone(),
        },
    })
}

pub fn write_samples(samples: &[Sample], vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let mut out = create(path)?;
    for s in samples {
        serde_json::to_writer(&mut out, &sample_to_record(s, vocab)?)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(samples.len())
}

pub fn load_samples(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<Sample>> {
    parse_samples(&read_to_string(path.as_ref())?, vocab)
}

/// Parses sample JSONL against a known vocabulary. Labels outside it are
/// rejected.
pub fn parse_samples(text: &str, vocab: &Vocabulary) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let mut history = Vec::with_capacity(rec.history.len());
        for h in rec.history {
            let (day, hour) = check_time(line_no, h.day, h.hour)?;
            history.push(BehaviorEvent {
                location: h.location,
                day_of_week: day,
                hour,
                behavior: vocab.id(&h.behavior)?,
            });
        }
        if history.windows(2).any(|w| w[1].time_key() < w[0].time_key()) {
            return Err(Error::LineValidation {
                line: line_no,
                message: "history is not chronological".into(),
            });
        }
        let (day, hour) = check_time(line_no, rec.target_context.day, rec.target_context.hour)?;
        samples.push(Sample {
            history,
            target: vocab.id(&rec.target)?,
            target_context: TargetContext {
                day,
                hour,
                location: rec.target_context.location,
            },
        });
    }
    Ok(samples)
}

/// Serialises one sample as a JSON value (shared by other record formats).
pub(crate) fn sample_json(sample: &Sample, vocab: &Vocabulary) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(sample_to_record(sample, vocab)?)?)
}

pub(crate) fn sample_from_json(value: serde_json::Value, vocab: &Vocabulary) -> Result<Sample> {
    let line = serde_json::to_string(&value)?;
    parse_samples(&line, vocab)?
        .pop()
        .ok_or_else(|| Error::Format("empty sample record".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const THREE: &str = r#"{"user":"u1","day":1,"hour":8,"location":"home","behavior":"Music"}
{"user":"u1","day":1,"hour":9,"location":"workplace","behavior":"Video"}
{"user":"u1","day":2,"hour":20,"location":"home","behavior":"Music"}
"#;

    #[test]
    fn empty_file_is_empty_log() {
        assert!(matches!(parse_events("", false), Err(Error::EmptyLog)));
        assert!(matches!(parse_events("\n\n", true), Err(Error::EmptyLog)));
    }

    #[test]
    fn one_user_three_lines() {
        let log = parse_events(THREE, true).unwrap();
        assert_eq!(log.users.len(), 1);
        assert_eq!(log.users[0].events.len(), 3);
        assert_eq!(log.vocab.names(), ["Music", "Video"]);
    }

    #[test]
    fn bad_hour_names_line() {
        let text = THREE.replace("\"hour\":9", "\"hour\":25");
        match parse_events(&text, false) {
            Err(Error::LineValidation { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_names_line() {
        let text = format!("{THREE}{{not json\n");
        match parse_events(&text, false) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_schema_version() {
        let text = format!("{{\"schema_version\":9}}\n{THREE}");
        assert!(matches!(parse_events(&text, false), Err(Error::Format(_))));
        let ok = format!("{{\"schema_version\":1}}\n{THREE}");
        assert_eq!(parse_events(&ok, false).unwrap().num_events(), 3);
    }

    #[test]
    fn strict_order_flag() {
        let lines: Vec<&str> = THREE.lines().collect();
        let shuffled = format!("{}\n{}\n{}\n", lines[2], lines[0], lines[1]);
        assert!(matches!(
            parse_events(&shuffled, true),
            Err(Error::LineValidation { line: 2, .. })
        ));
        let relaxed = parse_events(&shuffled, false).unwrap();
        assert_eq!(relaxed, parse_events(THREE, true).unwrap());
    }

    #[test]
    fn write_then_read_events() {
        let log = parse_events(THREE, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        assert_eq!(write_events(&log, &path).unwrap(), 3);
        assert_eq!(load_events(&path, true).unwrap(), log);
    }

    #[test]
    fn samples_round_trip() {
        let log = parse_events(THREE, true).unwrap();
        let (samples, _) = super::super::build_samples(&log, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.jsonl");
        write_samples(&samples, &log.vocab, &path).unwrap();
        assert_eq!(load_samples(&path, &log.vocab).unwrap(), samples);
    }
}
