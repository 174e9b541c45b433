//! Instruction prompts, auxiliary-task mixing and instruction JSONL export.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, Vocabulary};
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;

pub const HISTORY: &str = "[HistoryHere]";
pub const NEXT_INTENT: &str = "[next-intent-info]";
pub const CANDIDATES: &str = "[CansHere]";
pub const OUTPUT: &str = "[Output]";

const CONTEXT_SENTENCE: &str =
    "Day of the week, the hour, and the place of the next behavior are [next-intent-info], respectively.";

const TEMPLATES: [&str; 3] = [
    "This user has done behaviors [HistoryHere] in the previous. Day of the week, the hour, and the place of the next behavior are [next-intent-info], respectively. Choose the answer from the following behavior candidate set: [CansHere]. The answer is [Output].",
    "The user's historical behavior information sequence is: [HistoryHere]. Day of the week, the hour, and the place of the next behavior are [next-intent-info], respectively. Given the following behavior candidate set: [CansHere], recommend one intention for this user to do next. The intent you recommend is [Output].",
    "The behavior history of this user is: [HistoryHere].Day of the week, the hour, and the place of the next behavior are [next-intent-info], respectively. Recommend a next intention for this user to do from the following behavior candidate set: [CansHere].The recommendation is [Output].",
];

const TASK_DEFINITION: &str =
    "Task: predict which behavior from the candidate set this user will do next.";
const ROLE: &str = "You are a mobile phone assistant that learns a user's habits from the \
order, time and place of the behaviors they have done.";

/// One of the three instruction templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    id: u8,
}

impl PromptTemplate {
    pub fn new(id: u8) -> Result<Self> {
        if !(1..=3).contains(&id) {
            invalid!("template id {id} not in 1..=3");
        }
        Ok(Self { id })
    }

    pub fn id(self) -> u8 {
        self.id
    }

    pub fn text(self) -> &'static str {
        TEMPLATES[usize::from(self.id - 1)]
    }
}

/// Which template each rendered record uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateChoice {
    /// Uniform over the three templates.
    #[default]
    Random,
    Fixed(u8),
}

impl TemplateChoice {
    pub fn sample(self, rng: &mut Rng) -> PromptTemplate {
        match self {
            TemplateChoice::Random => PromptTemplate {
                id: rng.random_range(1..=3),
            },
            TemplateChoice::Fixed(id) => PromptTemplate::new(id).expect("validated template id"),
        }
    }
}

/// Uniform template id in 1..=3.
pub fn sample_template(rng: &mut Rng) -> u8 {
    TemplateChoice::Random.sample(rng).id()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskTag {
    Behavior,
    Auxiliary,
}

/// A rendered training record: `instruction` carries the task definition and
/// role, `input` the filled template up to the answer slot, `output` the
/// answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub task_tag: TaskTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderOptions {
    /// Fill the next-event time and place sentence; drop it when false.
    pub include_context: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            include_context: true,
        }
    }
}

/// Renders one sample with the given template.
pub fn render_prompt(
    sample: &Sample,
    template: PromptTemplate,
    vocab: &Vocabulary,
    options: RenderOptions,
) -> Result<InstructionRecord> {
    let history = sample
        .history
        .iter()
        .map(|e| {
            Ok(format!(
                "({},{},{},{})",
                e.day_of_week,
                e.hour,
                e.location,
                vocab.name(e.behavior)?
            ))
        })
        .collect::<Result<Vec<_>>>()?
        .join(",");
    let candidates = vocab.names().join(", ");
    let ctx = &sample.target_context;
    let intent = format!("{}, {}, {}", ctx.day, ctx.hour, ctx.location);

    let mut text = template.text().to_owned();
    if !options.include_context {
        text = text.replace(&format!("{CONTEXT_SENTENCE} "), "");
        text = text.replace(CONTEXT_SENTENCE, "");
    }
    let text = text
        .replace(HISTORY, &history)
        .replace(NEXT_INTENT, &intent)
        .replace(CANDIDATES, &candidates);
    let input = match text.find(OUTPUT) {
        Some(at) => text[..at].trim_end().to_owned(),
        None => text,
    };
    Ok(InstructionRecord {
        instruction: format!("{TASK_DEFINITION} {ROLE}"),
        input,
        output: vocab.name(sample.target)?.to_owned(),
        task_tag: TaskTag::Behavior,
    })
}

/// Renders every sample, drawing templates from `choice`.
pub fn render_all(
    samples: &[Sample],
    vocab: &Vocabulary,
    choice: TemplateChoice,
    options: RenderOptions,
    rng: &mut Rng,
) -> Result<Vec<InstructionRecord>> {
    samples
        .iter()
        .map(|s| render_prompt(s, choice.sample(rng), vocab, options))
        .collect()
}

/// Generic (input, output) pair used only as an auxiliary task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxiliaryPair {
    pub input: String,
    pub output: String,
}

impl AuxiliaryPair {
    /// Whitespace-delimited token estimate of input plus output.
    pub fn token_len(&self) -> usize {
        self.input.split_whitespace().count() + self.output.split_whitespace().count()
    }

    pub fn to_record(&self) -> InstructionRecord {
        InstructionRecord {
            instruction: String::new(),
            input: self.input.clone(),
            output: self.output.clone(),
            task_tag: TaskTag::Auxiliary,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuxiliaryCorpus {
    pub pairs: Vec<AuxiliaryPair>,
}

impl AuxiliaryCorpus {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let pair: AuxiliaryPair = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if pair.token_len() == 0 {
                return Err(Error::LineValidation {
                    line: i + 1,
                    message: "auxiliary pair has no tokens".into(),
                });
            }
            pairs.push(pair);
        }
        Ok(Self { pairs })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<usize> {
        write_jsonl(path.as_ref(), &self.pairs)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Deterministic placeholder corpus of short conversation-like pairs.
    pub fn synthetic(size: usize, rng: &mut Rng) -> Self {
        const WORDS: &[&str] = &[
            "how", "can", "I", "plan", "a", "trip", "what", "is", "the", "best", "way", "to",
            "learn", "cook", "rice", "explain", "why", "sky", "blue", "write", "poem", "about",
            "rain", "summarize", "this", "article", "please", "help", "me", "fix", "my", "code",
            "budget", "week", "recommend", "book", "song", "movie", "tips", "sleep", "better",
        ];
        let words = |lo: usize, hi: usize, rng: &mut Rng| {
            let n = rng.random_range(lo..=hi);
            (0..n)
                .map(|_| WORDS[rng.random_range(0..WORDS.len())])
                .collect::<Vec<_>>()
                .join(" ")
        };
        let pairs = (0..size)
            .map(|_| AuxiliaryPair {
                input: words(4, 24, rng),
                output: words(4, 60, rng),
            })
            .collect();
        Self { pairs }
    }
}

/// Result of mixing auxiliary records into behavior records.
#[derive(Debug, Clone)]
pub struct MixOutcome {
    pub records: Vec<InstructionRecord>,
    /// Indices into the filtered corpus, in draw order.
    pub auxiliary_indices: Vec<usize>,
    pub auxiliary_count: usize,
    /// Set when the filtered corpus was too small and pairs were reused.
    pub drawn_with_replacement: bool,
    pub filtered_corpus_size: usize,
}

/// Corpus pairs no longer than `max_len` tokens.
pub fn filter_corpus(corpus: &AuxiliaryCorpus, max_len: usize) -> Vec<&AuxiliaryPair> {
    corpus.pairs.iter().filter(|p| p.token_len() <= max_len).collect()
}

/// Draws `floor(epsilon * n)` indices into a pool of `pool` items, without
/// replacement when the pool is large enough.
pub fn draw_auxiliary(
    n: usize,
    pool: usize,
    epsilon: f64,
    rng: &mut Rng,
) -> Result<(Vec<usize>, bool)> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        invalid!("epsilon must be non-negative, got {epsilon}");
    }
    let count = (epsilon * n as f64).floor() as usize;
    if count == 0 {
        return Ok((Vec::new(), false));
    }
    if pool == 0 {
        invalid!("epsilon {epsilon} > 0 needs a non-empty auxiliary corpus");
    }
    if count <= pool {
        Ok((sample_indices(rng, pool, count).into_vec(), false))
    } else {
        Ok(((0..count).map(|_| rng.random_range(0..pool)).collect(), true))
    }
}

/// Adds `floor(epsilon * |behavior_records|)` auxiliary records drawn from
/// the length-filtered corpus, then shuffles everything together.
pub fn mix_auxiliary(
    behavior_records: Vec<InstructionRecord>,
    corpus: &AuxiliaryCorpus,
    epsilon: f64,
    max_len: usize,
    rng: &mut Rng,
) -> Result<MixOutcome> {
    let filtered = filter_corpus(corpus, max_len);
    let (indices, with_replacement) = draw_auxiliary(behavior_records.len(), filtered.len(), epsilon, rng)?;
    let mut records = behavior_records;
    records.extend(indices.iter().map(|&i| filtered[i].to_record()));
    records.shuffle(rng);
    Ok(MixOutcome {
        auxiliary_count: indices.len(),
        auxiliary_indices: indices,
        records,
        drawn_with_replacement: with_replacement,
        filtered_corpus_size: filtered.len(),
    })
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<usize> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(items.len())
}

/// Writes one `{instruction, input, output, task_tag}` object per line.
pub fn export_instruction_jsonl(records: &[InstructionRecord], path: impl AsRef<Path>) -> Result<usize> {
    write_jsonl(path.as_ref(), records)
}

pub fn read_instruction_jsonl(path: impl AsRef<Path>) -> Result<Vec<InstructionRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
