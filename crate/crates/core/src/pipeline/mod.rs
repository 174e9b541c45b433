//! The two-stage run: anchor-only supervised training (with auxiliary
//! records mixed in), difficulty scoring, balanced selection, preference
//! pairs and preference training against the frozen stage-one model.

mod config;
mod stages;

pub use config::{PipelineConfig, RejectionPolicy};
pub use stages::{
    build_preference_pairs, dpo_examples, load_pairs_jsonl, mean_implicit_margin, run_a_tuning, run_b_tuning,
    write_pairs_jsonl, AuxiliaryMix, MacroValidator, StageOutcome,
};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    build_balanced_testset, build_samples, compute_frequency_profile, generate_synthetic_dataset, load_events,
    split_by_category, split_users, write_samples, BalanceReport, EventLog, FrequencyProfile, Sample, Thresholds,
    Vocabulary,
};
use crate::error::{invalid, Error, Result};
use crate::eval::{compare_reports, evaluate, MetricDelta, MetricsReport, Protocol};
use crate::model::{save_checkpoint, EpochTrace, LossKind, Model, PreferencePair};
use crate::prompt::AuxiliaryCorpus;
use crate::rng::{substream, substream_seed};
use crate::select::{
    score_pool, select_balanced_subset, write_difficulty_jsonl, BalancedSelection, DifficultyRecord, ScoringConfig,
    SelectionReport, StrategyRegistry,
};

pub const MANIFEST_FORMAT: &str = "progtune-run";
pub const MANIFEST_VERSION: u32 = 1;

/// Users per split, by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitUsers {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSummary {
    pub behaviors: usize,
    pub users: usize,
    pub events: usize,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub test_samples: usize,
    pub balanced_samples: usize,
    /// Behaviors with fewer test samples than the balanced target.
    pub balanced_shortfalls: usize,
    pub anchors: usize,
    pub tails: usize,
    pub anchor_train_samples: usize,
    pub tail_train_samples: usize,
}

/// Windowed splits, the training-distribution profile and both test sets.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub users: SplitUsers,
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
    pub balanced: Vec<Sample>,
    pub balance: BalanceReport,
    pub profile: FrequencyProfile,
    pub summary: DataSummary,
}

impl PreparedData {
    pub fn vocab(&self) -> &Vocabulary {
        &self.profile.vocab
    }
}

/// Splits users 8:1:1, windows every split and profiles the training
/// samples.
pub fn prepare_data(
    log: &EventLog,
    window: usize,
    thresholds: Thresholds,
    balanced_per_class: usize,
    seed: u64,
) -> Result<PreparedData> {
    let split = split_users(log, &mut substream(seed, "split"));
    let names = |l: &EventLog| l.users.iter().map(|u| u.user.clone()).collect::<Vec<_>>();
    let (train, _) = build_samples(&split.train, window);
    let (validation, _) = build_samples(&split.validation, window);
    let (test, _) = build_samples(&split.test, window);
    if train.is_empty() {
        invalid!("no training samples: every training user has at most {window} events");
    }
    let profile = compute_frequency_profile(&train, &log.vocab, thresholds)?;
    let (balanced, balance) = build_balanced_testset(
        &test,
        log.vocab.len(),
        balanced_per_class,
        &mut substream(seed, "balanced"),
    );
    let by_side = split_by_category(&train, &profile);
    let summary = DataSummary {
        behaviors: log.vocab.len(),
        users: log.users.len(),
        events: log.num_events(),
        train_samples: train.len(),
        validation_samples: validation.len(),
        test_samples: test.len(),
        balanced_samples: balanced.len(),
        balanced_shortfalls: balance.shortfalls.len(),
        anchors: profile.anchor_set.len(),
        tails: profile.tail_set.len(),
        anchor_train_samples: by_side.anchor.len(),
        tail_train_samples: by_side.tail.len(),
    };
    Ok(PreparedData {
        users: SplitUsers {
            train: names(&split.train),
            validation: names(&split.validation),
            test: names(&split.test),
        },
        train,
        validation,
        test,
        balanced,
        balance,
        profile,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub examples: usize,
    pub best_epoch: usize,
    pub trace: Vec<EpochTrace>,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReports {
    pub real_distribution: MetricsReport,
    pub balanced: MetricsReport,
}

impl ProtocolReports {
    pub fn get(&self, protocol: Protocol) -> &MetricsReport {
        match protocol {
            Protocol::RealDistribution => &self.real_distribution,
            Protocol::Balanced => &self.balanced,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolDeltas {
    pub real_distribution: Vec<MetricDelta>,
    pub balanced: Vec<MetricDelta>,
}

/// Machine-readable record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub seeds: BTreeMap<String, u64>,
    pub data: DataSummary,
    pub auxiliary: AuxiliaryMix,
    pub stage_a: StageSummary,
    pub selection: Option<SelectionReport>,
    pub pairs: usize,
    pub stage_b: Option<StageSummary>,
    pub reference_metrics: ProtocolReports,
    pub policy_metrics: ProtocolReports,
    /// Policy minus reference.
    pub deltas: ProtocolDeltas,
    /// Artifact name to file name inside the output directory.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_slice(&bytes)?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("not a v{MANIFEST_VERSION} run manifest")));
        }
        Ok(m)
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub data: PreparedData,
    pub reference: Model,
    pub policy: Model,
    pub records: Vec<DifficultyRecord>,
    pub selection: Option<BalancedSelection>,
    pub pairs: Vec<PreferencePair>,
    pub manifest: RunManifest,
}

/// Writes artifacts into an optional directory and remembers their names.
struct Artifacts {
    dir: Option<PathBuf>,
    written: BTreeMap<String, String>,
}

impl Artifacts {
    fn new(dir: Option<&Path>) -> Result<Self> {
        if let Some(d) = dir {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        Ok(Self {
            dir: dir.map(Path::to_path_buf),
            written: BTreeMap::new(),
        })
    }

    fn put(&mut self, name: &str, file: &str, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        if let Some(dir) = &self.dir {
            write(&dir.join(file))?;
            self.written.insert(name.to_owned(), file.to_owned());
        }
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, file: &str, value: &T) -> Result<()> {
        self.put(name, file, |p| write_json(p, value))
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_trace(path: &Path, trace: &[EpochTrace]) -> Result<()> {
    let mut text = String::new();
    for t in trace {
        text.push_str(&serde_json::to_string(t)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn evaluate_both(model: &Model, data: &PreparedData) -> Result<ProtocolReports> {
    Ok(ProtocolReports {
        real_distribution: evaluate(model, &data.test, &data.profile, Protocol::RealDistribution)?,
        balanced: evaluate(model, &data.balanced, &data.profile, Protocol::Balanced)?,
    })
}

/// Loads the configured event log and auxiliary corpus (generating either
/// when no path is set) and runs every stage.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: Option<&Path>) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let log = match &cfg.events {
        Some(path) => load_events(path, cfg.strict_order)?,
        None => generate_synthetic_dataset(&cfg.synthetic_spec())?.0,
    };
    let corpus = match &cfg.auxiliary_corpus {
        Some(path) => AuxiliaryCorpus::load(path)?,
        None => AuxiliaryCorpus::synthetic(cfg.auxiliary_synthetic_size, &mut substream(cfg.seed, "aux-corpus")),
    };
    run_pipeline_on(cfg, &log, &corpus, out_dir)
}

/// Runs every stage on an in-memory log and corpus. With `out_dir`, each
/// artifact is written as soon as its stage finishes, so a failing stage
/// leaves the earlier ones on disk.
pub fn run_pipeline_on(
    cfg: &PipelineConfig,
    log: &EventLog,
    corpus: &AuxiliaryCorpus,
    out_dir: Option<&Path>,
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let seed = cfg.seed;
    let seeds: BTreeMap<String, u64> = ["split", "balanced", "aux-corpus", "init", "train/a", "select", "train/b"]
        .into_iter()
        .map(|n| (n.to_owned(), substream_seed(seed, n)))
        .collect();
    let mut art = Artifacts::new(out_dir)?;

    let data = prepare_data(log, cfg.model.window, cfg.thresholds, cfg.balanced_per_class, seed)?;
    let vocab = data.vocab().clone();
    log::info!(
        "data: {} train / {} validation / {} test samples, {} anchors, {} tails",
        data.train.len(),
        data.validation.len(),
        data.test.len(),
        data.summary.anchors,
        data.summary.tails
    );
    art.json("profile", "profile.json", &data.profile)?;
    art.json("split", "split.json", &data.users)?;
    art.put("balanced_testset", "testset_balanced.jsonl", |p| {
        write_samples(&data.balanced, &vocab, p).map(drop)
    })?;
    art.put("testset", "testset.jsonl", |p| write_samples(&data.test, &vocab, p).map(drop))?;

    // Stage A.
    let init = Model::init(&vocab, cfg.model, &mut substream(seed, "init"))?;
    let validator = MacroValidator::new(&init, &data.validation, &data.profile)?;
    let d_a: Vec<Sample> = if cfg.skip_stage_a {
        data.train.clone()
    } else {
        split_by_category(&data.train, &data.profile).anchor
    };
    let (stage_a, auxiliary) = run_a_tuning(
        &init,
        &d_a,
        corpus,
        cfg.epsilon,
        cfg.auxiliary_max_len,
        &cfg.stage_a,
        validator.as_ref(),
        &mut substream(seed, "train/a"),
    )?;
    let reference = stage_a.model;
    log::info!(
        "stage A: {} samples + {} auxiliary, best epoch {}",
        d_a.len(),
        auxiliary.count,
        stage_a.best_epoch
    );
    art.put("reference", "reference.ckpt.json", |p| save_checkpoint(&reference, &vocab, p))?;
    art.put("trace_a", "trace_a.jsonl", |p| write_trace(p, &stage_a.trace))?;
    let reference_metrics = evaluate_both(&reference, &data)?;
    art.json("metrics_reference_real", "metrics/reference_real.json", &reference_metrics.real_distribution)?;
    art.json("metrics_reference_balanced", "metrics/reference_balanced.json", &reference_metrics.balanced)?;
    let stage_a_summary = StageSummary {
        examples: d_a.len() + auxiliary.count,
        best_epoch: stage_a.best_epoch,
        trace: stage_a.trace,
        checksum: reference.checksum(),
    };

    // Stage B.
    let mut records = Vec::new();
    let mut selection = None;
    let mut pairs = Vec::new();
    let mut stage_b_summary = None;
    let policy = if cfg.skip_stage_b {
        reference.clone()
    } else {
        let scoring = ScoringConfig {
            lambda: cfg.lambda,
            invert_penalty: cfg.invert_penalty,
        };
        records = score_pool(&reference, &data.train, &data.profile, scoring)?;
        art.put("difficulty", "difficulty.jsonl", |p| {
            write_difficulty_jsonl(&records, &data.profile, p).map(drop)
        })?;
        let strategy = StrategyRegistry::builtin().get(&cfg.strategy)?;
        let chosen = select_balanced_subset(
            &records,
            &data.profile,
            cfg.per_category,
            strategy.as_ref(),
            seeds["select"],
        )?;
        art.json("selection", "selection_report.json", &chosen.report)?;
        let selected: Vec<Sample> = chosen.indices().iter().map(|&i| data.train[i].clone()).collect();
        pairs = build_preference_pairs(&selected, &reference, cfg.rejection)?;
        art.put("pairs", "pairs.jsonl", |p| write_pairs_jsonl(&pairs, &vocab, p).map(drop))?;
        log::info!("selection: {} samples, {} pairs", selected.len(), pairs.len());
        let stage_b = run_b_tuning(
            &reference,
            &pairs,
            cfg.beta,
            cfg.b_loss,
            &cfg.stage_b,
            validator.as_ref(),
            &mut substream(seed, "train/b"),
        )?;
        debug_assert_eq!(reference.checksum(), stage_a_summary.checksum);
        art.put("trace_b", "trace_b.jsonl", |p| write_trace(p, &stage_b.trace))?;
        log::info!("stage B: best epoch {}", stage_b.best_epoch);
        stage_b_summary = Some(StageSummary {
            examples: pairs.len(),
            best_epoch: stage_b.best_epoch,
            trace: stage_b.trace,
            checksum: stage_b.model.checksum(),
        });
        selection = Some(chosen);
        stage_b.model
    };
    art.put("policy", "policy.ckpt.json", |p| save_checkpoint(&policy, &vocab, p))?;
    let policy_metrics = evaluate_both(&policy, &data)?;
    art.json("metrics_policy_real", "metrics/policy_real.json", &policy_metrics.real_distribution)?;
    art.json("metrics_policy_balanced", "metrics/policy_balanced.json", &policy_metrics.balanced)?;

    let deltas = ProtocolDeltas {
        real_distribution: compare_reports(&reference_metrics.real_distribution, &policy_metrics.real_distribution),
        balanced: compare_reports(&reference_metrics.balanced, &policy_metrics.balanced),
    };
    let mut manifest = RunManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        config_hash: cfg.content_hash(),
        config: cfg.clone(),
        seeds,
        data: data.summary.clone(),
        auxiliary,
        stage_a: stage_a_summary,
        selection: selection.as_ref().map(|s| s.report.clone()),
        pairs: pairs.len(),
        stage_b: stage_b_summary,
        reference_metrics,
        policy_metrics,
        deltas,
        artifacts: BTreeMap::new(),
    };
    if let Some(dir) = out_dir {
        manifest.artifacts = art.written.clone();
        manifest.artifacts.insert("manifest".into(), "manifest.json".into());
        write_json(&dir.join("manifest.json"), &manifest)?;
    }
    Ok(PipelineOutcome {
        data,
        reference,
        policy,
        records,
        selection,
        pairs,
        manifest,
    })
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(<sha2::Sha256 as sha2::Digest>::digest(bytes)))
}

/// Stage-B loss name accepted on the command line.
pub fn parse_loss(name: &str) -> Result<LossKind> {
    match name {
        "dpo" => Ok(LossKind::Dpo),
        "sft" => Ok(LossKind::Sft),
        other => Err(Error::Invalid(format!("unknown stage-B loss {other:?}, expected dpo or sft"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;
    use crate::model::OptimizerConfig;

    fn small() -> PipelineConfig {
        PipelineConfig {
            seed: 5,
            synthetic: SyntheticSpec {
                num_behaviors: 12,
                num_users: 30,
                num_samples: 1_500,
                rng_seed: 5,
                ..Default::default()
            },
            model: crate::model::ModelConfig {
                window: 6,
                embed_dim: 8,
                hidden_dim: 16,
                ..Default::default()
            },
            stage_a: OptimizerConfig { epochs: 2, ..Default::default() },
            stage_b: OptimizerConfig { epochs: 1, ..Default::default() },
            auxiliary_synthetic_size: 100,
            per_category: 5,
            balanced_per_class: 20,
            ..Default::default()
        }
    }

    #[test]
    fn accounting_holds() {
        let out = run_pipeline(&small(), None).unwrap();
        let sel = out.selection.as_ref().unwrap();
        let expected: usize = sel.report.categories.iter().map(|c| c.pool_size.min(5)).sum();
        assert_eq!(out.pairs.len(), expected);
        assert!(out.pairs.iter().all(|p| p.chosen != p.rejected && p.chosen == p.sample.target));
        let anchors = out.manifest.data.anchor_train_samples;
        assert_eq!(out.manifest.auxiliary.count, anchors * 5 / 100);
        assert_eq!(out.manifest.stage_a.examples, anchors + out.manifest.auxiliary.count);
    }

    #[test]
    fn skip_b_keeps_reference() {
        let cfg = PipelineConfig { skip_stage_b: true, ..small() };
        let out = run_pipeline(&cfg, None).unwrap();
        assert_eq!(out.policy, out.reference);
        assert!(out.pairs.is_empty() && out.selection.is_none());
        assert!(out.manifest.deltas.balanced.iter().all(|d| d.delta.is_none_or(|x| x == 0.0)));
    }

    #[test]
    fn artifacts_written_and_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_pipeline(&small(), Some(a.path())).unwrap();
        run_pipeline(&small(), Some(b.path())).unwrap();
        let manifest = RunManifest::load(a.path().join("manifest.json")).unwrap();
        for file in manifest.artifacts.values() {
            let x = fs::read(a.path().join(file)).unwrap();
            let y = fs::read(b.path().join(file)).unwrap();
            assert_eq!(x, y, "{file} differs between runs");
        }
        assert!(manifest.artifacts.contains_key("pairs"));
    }
}
