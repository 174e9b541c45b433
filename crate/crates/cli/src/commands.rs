use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use progtune_core::data::{
    build_balanced_testset, generate_synthetic_dataset, load_events, load_samples, split_by_category, write_events,
    write_samples, FrequencyProfile, Sample, Thresholds,
};
use progtune_core::eval::{compare_reports, evaluate, MetricDelta, MetricsReport, Protocol};
use progtune_core::model::{load_checkpoint, save_checkpoint, Model, OptimizerConfig};
use progtune_core::pipeline::{
    build_preference_pairs, file_sha256, load_pairs_jsonl, parse_loss, prepare_data, run_a_tuning, run_b_tuning,
    run_pipeline, write_json, write_pairs_jsonl, MacroValidator, PipelineConfig, RejectionPolicy,
};
use progtune_core::prompt::{
    export_instruction_jsonl, mix_auxiliary, render_all, AuxiliaryCorpus, PromptTemplate, RenderOptions,
    TemplateChoice,
};
use progtune_core::rng::{substream, substream_seed};
use progtune_core::select::{score_pool, select_balanced_subset, write_difficulty_jsonl, ScoringConfig, StrategyRegistry};
use progtune_core::{Error, Result};
use serde::Serialize;
use serde_json::{json, Value};

use crate::{
    Cli, Command, CompareArgs, EvalArgs, ExportArgs, PairsArgs, PartitionArgs, RunArgs, ScoreArgs, SelectArgs,
    SelectionArgs, StageArgs, SynthArgs, Switch, ThresholdArgs, TrainAArgs, TrainBArgs,
};

const COMMAND_FORMAT: &str = "progtune-command";

#[derive(Debug, Serialize)]
struct FileRef {
    path: String,
    sha256: String,
}

/// Per-command manifest. Holds no timestamps so reruns are byte-identical.
#[derive(Debug, Serialize)]
struct CommandManifest<'a> {
    format: &'static str,
    version: u32,
    command: &'a str,
    seed: u64,
    config_hash: String,
    inputs: BTreeMap<String, FileRef>,
    outputs: BTreeMap<String, FileRef>,
    details: Value,
}

/// Output directory, resolved config and the files a command touched.
struct Ctx<'a> {
    command: &'a str,
    out: PathBuf,
    cfg: PipelineConfig,
    inputs: BTreeMap<String, FileRef>,
    outputs: BTreeMap<String, FileRef>,
}

impl<'a> Ctx<'a> {
    fn new(command: &'a str, out: &Path, cfg: PipelineConfig) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::Io {
            path: out.to_path_buf(),
            source: e,
        })?;
        Ok(Self {
            command,
            out: out.to_path_buf(),
            cfg,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    /// The explicit path, or the conventional file in the output directory.
    fn input(&mut self, name: &str, given: Option<&PathBuf>, default_file: &str) -> Result<PathBuf> {
        let path = given.cloned().unwrap_or_else(|| self.out.join(default_file));
        self.record_input(name, &path)?;
        Ok(path)
    }

    /// Like [`Ctx::input`], but a missing default file means "none".
    fn optional_input(&mut self, name: &str, given: Option<&PathBuf>, default_file: &str) -> Result<Option<PathBuf>> {
        match given {
            Some(p) => self.input(name, Some(p), default_file).map(Some),
            None => {
                let p = self.out.join(default_file);
                if p.exists() {
                    self.record_input(name, &p)?;
                    Ok(Some(p))
                } else {
                    Ok(None)
                }
            }
        }
    }

    fn record_input(&mut self, name: &str, path: &Path) -> Result<()> {
        let sha256 = file_sha256(path)?;
        self.inputs.insert(
            name.to_owned(),
            FileRef {
                path: path.display().to_string(),
                sha256,
            },
        );
        Ok(())
    }

    /// Path of an output file; call [`Ctx::wrote`] once it exists.
    fn output(&self, file: &str) -> PathBuf {
        self.out.join(file)
    }

    fn wrote(&mut self, name: &str, file: &str) -> Result<()> {
        let path = self.output(file);
        let sha256 = file_sha256(&path)?;
        self.outputs.insert(
            name.to_owned(),
            FileRef {
                path: file.to_owned(),
                sha256,
            },
        );
        Ok(())
    }

    fn finish(self, details: Value) -> Result<()> {
        let manifest = CommandManifest {
            format: COMMAND_FORMAT,
            version: 1,
            command: self.command,
            seed: self.cfg.seed,
            config_hash: self.cfg.content_hash(),
            inputs: self.inputs,
            outputs: self.outputs,
            details,
        };
        let file = format!("{}_manifest.json", self.command.replace('-', "_"));
        write_json(&self.out.join(file), &manifest)
    }
}

pub fn dispatch(cli: &Cli, cfg: PipelineConfig) -> Result<()> {
    let out = cli.out_dir.as_path();
    match &cli.command {
        Command::Synth(a) => synth(a, cli.seed, cfg, out),
        Command::Partition(a) => partition(a, cfg, out),
        Command::ExportPrompts(a) => export_prompts(a, cfg, out),
        Command::TrainA(a) => train_a(a, cfg, out),
        Command::Score(a) => score(a, cfg, out),
        Command::Select(a) => select(a, cfg, out),
        Command::Pairs(a) => pairs(a, cfg, out),
        Command::TrainB(a) => train_b(a, cfg, out),
        Command::Run(a) => run(a, cfg, out),
        Command::Eval(a) => eval(a, cfg, out),
        Command::Compare(a) => compare(a, cfg, out),
    }
}

fn load_profile(path: &Path) -> Result<FrequencyProfile> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Prefixes line-level errors with the file they came from.
fn in_file<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        Error::LineValidation { line, message } => Error::LineValidation {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

fn read_samples(path: &Path, profile: &FrequencyProfile) -> Result<Vec<Sample>> {
    in_file(path, load_samples(path, &profile.vocab))
}

fn parse_rejection(name: &str) -> Result<RejectionPolicy> {
    match name {
        "runner-up" => Ok(RejectionPolicy::RunnerUp),
        "drop" => Ok(RejectionPolicy::Drop),
        other => Err(Error::Invalid(format!("unknown rejection policy {other:?}, expected runner-up or drop"))),
    }
}

fn apply_thresholds(t: &mut Thresholds, a: &ThresholdArgs) {
    if let Some(v) = a.anchor_threshold {
        t.anchor = v;
    }
    if let Some(v) = a.head_threshold {
        t.head = v;
    }
    if let Some(v) = a.medium_threshold {
        t.medium = v;
    }
}

fn apply_stage(o: &mut OptimizerConfig, a: &StageArgs) {
    if let Some(v) = a.epochs {
        o.epochs = v;
    }
    if let Some(v) = a.lr {
        o.lr_max = v;
    }
    if let Some(v) = a.batch_size {
        o.batch_size = v;
    }
    if let Some(v) = &a.optimizer {
        o.name = v.clone();
    }
}

fn apply_selection(cfg: &mut PipelineConfig, a: &SelectionArgs) -> Result<()> {
    if let Some(v) = a.per_category {
        cfg.per_category = v;
    }
    if let Some(v) = &a.strategy {
        cfg.strategy = v.clone();
    }
    if a.kmeans == Some(Switch::Off) {
        if cfg.strategy != "kmeans" && cfg.strategy != "topk" {
            return Err(Error::Invalid(format!("--kmeans off conflicts with --select {}", cfg.strategy)));
        }
        cfg.strategy = "topk".into();
    }
    if let Some(v) = &a.rejection {
        cfg.rejection = parse_rejection(v)?;
    }
    Ok(())
}

/// The configured corpus, or the synthetic one a full run would build.
fn auxiliary_corpus(cfg: &PipelineConfig, given: Option<&PathBuf>, ctx: &mut Ctx<'_>) -> Result<AuxiliaryCorpus> {
    match given.or(cfg.auxiliary_corpus.as_ref()) {
        Some(p) => {
            ctx.record_input("corpus", p)?;
            in_file(p, AuxiliaryCorpus::load(p))
        }
        None => Ok(AuxiliaryCorpus::synthetic(
            cfg.auxiliary_synthetic_size,
            &mut substream(cfg.seed, "aux-corpus"),
        )),
    }
}

/// Model settings with the window taken from the samples themselves.
fn model_config_for(cfg: &PipelineConfig, samples: &[Sample]) -> progtune_core::model::ModelConfig {
    let mut m = cfg.model;
    if let Some(s) = samples.first() {
        if s.history.len() != m.window {
            log::info!("using window {} from the samples (config says {})", s.history.len(), m.window);
            m.window = s.history.len();
        }
    }
    m
}

fn synth(a: &SynthArgs, seed: Option<u64>, mut cfg: PipelineConfig, out: &Path) -> Result<()> {
    let mut spec = cfg.synthetic_spec();
    if let Some(s) = seed {
        spec.rng_seed = s;
    }
    if let Some(v) = a.behaviors {
        spec.num_behaviors = v;
    }
    if let Some(v) = a.users {
        spec.num_users = v;
    }
    if let Some(v) = a.samples {
        spec.num_samples = v;
    }
    if let Some(v) = a.zipf {
        spec.zipf_exponent = v;
    }
    if let Some(v) = a.coherence {
        spec.markov_coherence = v;
    }
    if let Some(v) = a.window {
        spec.window = v;
    }
    if let Some(v) = a.variation {
        spec.user_rule_variation = v;
    }
    if let Some(v) = a.aux_size {
        cfg.auxiliary_synthetic_size = v;
    }
    spec.validate()?;
    cfg.synthetic = spec.clone();
    let mut ctx = Ctx::new("synth", out, cfg)?;

    let (log, truth) = generate_synthetic_dataset(&spec)?;
    write_events(&log, ctx.output("events.jsonl"))?;
    ctx.wrote("events", "events.jsonl")?;
    write_json(&ctx.output("ground_truth.json"), &truth)?;
    ctx.wrote("ground_truth", "ground_truth.json")?;
    let corpus = AuxiliaryCorpus::synthetic(ctx.cfg.auxiliary_synthetic_size, &mut substream(ctx.cfg.seed, "aux-corpus"));
    corpus.save(ctx.output("auxiliary.jsonl"))?;
    ctx.wrote("auxiliary", "auxiliary.jsonl")?;

    println!(
        "wrote {} events for {} users over {} behaviors, {} auxiliary pairs",
        log.num_events(),
        log.users.len(),
        log.vocab.len(),
        corpus.len()
    );
    ctx.finish(json!({
        "spec": spec,
        "events": log.num_events(),
        "users": log.users.len(),
        "auxiliary_pairs": corpus.len(),
    }))
}

fn partition(a: &PartitionArgs, mut cfg: PipelineConfig, out: &Path) -> Result<()> {
    apply_thresholds(&mut cfg.thresholds, &a.thresholds);
    if let Some(w) = a.window {
        cfg.model.window = w;
    }
    if let Some(n) = a.balanced_per_class {
        cfg.balanced_per_class = n;
    }
    cfg.thresholds.validate()?;
    cfg.model.validate()?;
    if cfg.balanced_per_class == 0 {
        return Err(Error::Invalid("balanced_per_class must be at least 1".into()));
    }
    let events = a
        .events
        .clone()
        .or_else(|| cfg.events.clone())
        .ok_or_else(|| Error::Invalid("no event log: pass --events or set `events` in the config".into()))?;
    let mut ctx = Ctx::new("partition", out, cfg.clone())?;
    ctx.record_input("events", &events)?;
    let log = in_file(&events, load_events(&events, cfg.strict_order))?;
    let data = prepare_data(&log, cfg.model.window, cfg.thresholds, cfg.balanced_per_class, cfg.seed)?;
    let vocab = data.vocab().clone();

    write_json(&ctx.output("profile.json"), &data.profile)?;
    ctx.wrote("profile", "profile.json")?;
    write_json(&ctx.output("split.json"), &data.users)?;
    ctx.wrote("split", "split.json")?;
    for (name, file, samples) in [
        ("train", "samples_train.jsonl", &data.train),
        ("validation", "samples_validation.jsonl", &data.validation),
        ("testset", "testset.jsonl", &data.test),
        ("balanced_testset", "testset_balanced.jsonl", &data.balanced),
    ] {
        write_samples(samples, &vocab, ctx.output(file))?;
        ctx.wrote(name, file)?;
    }

    let p = &data.profile;
    println!("{:<4} {:<28} {:>8} {:>10}  {:<6} {}", "id", "behavior", "count", "share", "side", "bin");
    for id in vocab.ids() {
        println!(
            "{:<4} {:<28} {:>8} {:>9.3}%  {:<6} {:?}",
            id.0,
            vocab.name(id)?,
            p.counts[id.0],
            100.0 * p.proportions[id.0],
            if p.is_anchor(id) { "anchor" } else { "tail" },
            p.category(id)
        );
    }
    println!(
        "{} anchors, {} tails; {} train / {} validation / {} test samples",
        p.anchor_set.len(),
        p.tail_set.len(),
        data.train.len(),
        data.validation.len(),
        data.test.len()
    );
    ctx.finish(serde_json::to_value(&data.summary)?)
}

fn export_prompts(a: &ExportArgs, mut cfg: PipelineConfig, out: &Path) -> Result<()> {
    if let Some(v) = a.epsilon {
        cfg.epsilon = v;
    }
    if let Some(v) = a.max_len {
        cfg.auxiliary_max_len = v;
    }
    let choice = match a.template {
        Some(id) => TemplateChoice::Fixed(PromptTemplate::new(id)?.id()),
        None => TemplateChoice::Random,
    };
    let mut ctx = Ctx::new("export-prompts", out, cfg.clone())?;
    let profile = load_profile(&ctx.input("profile", a.profile.as_ref(), "profile.json")?)?;
    let samples_path = ctx.input("samples", a.samples.as_ref(), "samples_train.jsonl")?;
    let mut samples = read_samples(&samples_path, &profile)?;
    if a.anchor_only {
        samples = split_by_category(&samples, &profile).anchor;
    }
    let corpus = auxiliary_corpus(&cfg, a.corpus.as_ref(), &mut ctx)?;

    let mut rng = substream(cfg.seed, "prompts");
    let options = RenderOptions {
        include_context: !a.no_context,
    };
    let records = render_all(&samples, &profile.vocab, choice, options, &mut rng)?;
    let mixed = mix_auxiliary(records, &corpus, cfg.epsilon, cfg.auxiliary_max_len, &mut rng)?;
    export_instruction_jsonl(&mixed.records, ctx.output("instructions.jsonl"))?;
    ctx.wrote("instructions", "instructions.jsonl")?;
    println!(
        "wrote {} records ({} behavior, {} auxiliary{})",
        mixed.records.len(),
        samples.len(),
        mixed.auxiliary_count,
        if mixed.drawn_with_replacement { ", drawn with replacement" } else { "" }
    );
    ctx.finish(json!({
        "behavior_records": samples.len(),
        "auxiliary_records": mixed.auxiliary_count,
        "drawn_with_replacement": mixed.drawn_with_replacement,
        "filtered_corpus_size": mixed.filtered_corpus_size,
        "epsilon": cfg.epsilon,
        "template": a.template,
        "include_context": options.include_context,
        "anchor_only": a.anchor_only,
    }))
}

fn write_trace(path: &Path, trace: &[progtune_core::model::EpochTrace]) -> Result<()> {
    let mut text = String::new();
    for t in trace {
        text.push_str(&serde_json::to_string(t)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn train_a(a: &TrainAArgs, mut cfg: PipelineConfig, out: &Path) -> Result<()> {
    if let Some(v) = a.epsilon {
        cfg.epsilon = v;
    }
    if let Some(v) = a.max_len {
        cfg.auxiliary_max_len = v;
    }
    cfg.skip_stage_a |= a.skip_stage_a;
    apply_stage(&mut cfg.stage_a, &a.stage);
    cfg.stage_a.validate()?;
    let mut ctx = Ctx::new("train-a", out, cfg.clone())?;
    let profile = load_profile(&ctx.input("profile", a.profile.as_ref(), "profile.json")?)?;
    let train_path = ctx.input("train", a.train.as_ref(), "samples_train.jsonl")?;
    let train = read_samples(&train_path, &profile)?;
    let validation = match ctx.optional_input("validation", a.validation.as_ref(), "samples_validation.jsonl")? {
        Some(p) => read_samples(&p, &profile)?,
        None => Vec::new(),
    };
    let corpus = auxiliary_corpus(&cfg, a.corpus.as_ref(), &mut ctx)?;

    let model_cfg = model_config_for(&cfg, &train);
    let init = Model::init(&profile.vocab, model_cfg, &mut substream(cfg.seed, "init"))?;
    let validator = MacroValidator::new(&init, &validation, &profile)?;
    let d_a = if cfg.skip_stage_a {
        train
    } else {
        split_by_category(&train, &profile).anchor
    };
    let (stage, mix) = run_a_tuning(
        &init,
        &d_a,
        &corpus,
        cfg.epsilon,
        cfg.auxiliary_max_len,
        &cfg.stage_a,
        validator.as_ref(),
        &mut substream(cfg.seed, "train/a"),
    )?;
    save_checkpoint(&stage.model, &profile.vocab, ctx.output("reference.ckpt.json"))?;
    ctx.wrote("reference", "reference.ckpt.json")?;
    write_trace(&ctx.output("trace_a.jsonl"), &stage.trace)?;
    ctx.wrote("trace", "trace_a.jsonl")?;
    println!(
        "stage A: {} samples + {} auxiliary, best epoch {} of {}",
        d_a.len(),
        mix.count,
        stage.best_epoch,
        cfg.stage_a.epochs
    );
    ctx.finish(json!({
        "samples": d_a.len(),
        "auxiliary": mix,
        "best_epoch": stage.best_epoch,
        "trace": stage.trace,
        "checksum": stage.model.checksum(),
    }))
}

/// Loads checkpoint, pool and profile and scores the pool.
struct Scored {
    reference: Model,
    profile: FrequencyProfile,
    pool: Vec<Sample>,
    records: Vec<progtune_core::select::DifficultyRecord>,
}

fn score_inputs(a: &ScoreArgs, cfg: &mut PipelineConfig, ctx: &mut Ctx<'_>) -> Result<Scored> {
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    cfg.invert_penalty |= a.invert_penalty;
    ctx.cfg = cfg.clone();
    let profile = load_profile(&ctx.input("profile", a.profile.as_ref(), "profile.json")?)?;
    let ckpt = ctx.input("checkpoint", a.checkpoint.as_ref(), "reference.ckpt.json")?;
    let (reference, _) = load_checkpoint(&ckpt, Some(&profile.vocab))?;
    let pool_path = ctx.input("pool", a.pool.as_ref(), "samples_train.jsonl")?;
    let pool = read_samples(&pool_path, &profile)?;
    let scoring = ScoringConfig {
        lambda: cfg.lambda,
        invert_penalty: cfg.invert_penalty,
    };
    let records = score_pool(&reference, &pool, &profile, scoring)?;
    write_difficulty_jsonl(&records, &profile, ctx.output("difficulty.jsonl"))?;
    ctx.wrote("difficulty", "difficulty.jsonl")?;
    Ok(Scored {
        reference,
        profile,
        pool,
        records,
    })
}

fn score(a: &ScoreArgs, mut cfg: PipelineConfig, out: &Path) -> Result<()> {
    let mut ctx = Ctx::new("score", out, cfg.clone())?;
    let s = score_inputs(a, &mut cfg, &mut ctx)?;
    let mean = s.records.iter().map(|r| r.difficulty).sum::<f64>() / s.records.len().max(1) as f64;
    println!("scored {} samples, mean difficulty {mean:.4}", s.records.len());
    ctx.finish(json!({
        "samples": s.records.len(),
        "lambda": cfg.lambda,
        "invert_penalty": cfg.invert_penalty,
        "mean_difficulty": mean,
    }))
}

fn select(a: &SelectArgs, mut cfg: PipelineConfig, out: &Path) -> Result<()> {
    apply_selection(&mut cfg, &a.selection)?;
    if cfg.per_category == 0 {
        return Err(Error::Invalid("--per-category must be at least 1".into()));
    }
    let strategy = StrategyRegistry::builtin().get(&cfg.strategy)?;
    let mut ctx = Ctx::new("select", out, cfg.clone())?;
    let s = score_inputs(&a.score, &mut cfg, &mut ctx)?;
    let chosen = select_balanced_subset(
        &s.records,
        &s.profile,
        cfg.per_category,
        strategy.as_ref(),
        substream_seed(cfg.seed, "select"),
    )?;
    write_json(&ctx.output("selection_report.json"), &chosen.report)?;
    ctx.wrote("selection_report", "selection_report.json")?;
    let selected: Vec<Sample> = chosen.indices().iter().map(|&i| s.pool[i].clone()).collect();
    write_samples(&selected, &s.profile.vocab, ctx.output("selected.jsonl"))?;
    ctx.wrote("selected", "selected.jsonl")?;
    let pairs = build_preference_pairs(&selected, &s.reference, cfg.rejection)?;
    write_pairs_jsonl(&pairs, &s.profile.vocab, ctx.output("pairs.jsonl"))?;
    ctx.wrote("pairs", "pairs.jsonl")?;
    println!(
        "selected {} samples over {} behaviors with {}, {} pairs",
        selected.len(),
        chosen.report.categories.len(),
        cfg.strategy,
        pairs.len()
    );
    ctx.finish(json!({
        "strategy": cfg.strategy,
        "per_category": cfg.per_category,
        "selected": selected.len(),
        "pairs": pairs.len(),
    }))
}

fn pairs(a: &PairsArgs, mut cfg: PipelineConfig, out: &Path) -> Result<()> {
    if let Some(v) = &a.rejection {
        cfg.rejection = parse_rejection(v)?;
    }
    let mut ctx = Ctx::new("pairs", out, cfg.clone())?;
    let ckpt = ctx.input("checkpoint", a.checkpoint.as_ref(), "reference.ckpt.json")?;
    let (reference, vocab) = load_checkpoint(&ckpt, None)?;
    let samples_path = ctx.input("samples", a.samples.as_ref(), "selected.jsonl")?;
    let samples = in_file(&samples_path, load_samples(&samples_path, &vocab))?;
    let pairs = build_preference_pairs(&samples, &reference, cfg.rejection)?;
    write_pairs_jsonl(&pairs, &vocab, ctx.output("pairs.jsonl"))?;
    ctx.wrote("pairs", "pairs.jsonl")?;
    println!("{} pairs from {} samples", pairs.len(), samples.len());
    ctx.finish(json!({ "samples": samples.len(), "pairs": pairs.len(), "rejection": cfg.rejection }))
}

fn train_b(a: &TrainBArgs, mut cfg: PipelineConfig, out: &Path) -> Result<()> {
    if let Some(v) = a.beta {
        cfg.beta = v;
    }
    if let Some(v) = &a.b_loss {
        cfg.b_loss = parse_loss(v)?;
    }
    apply_stage(&mut cfg.stage_b, &a.stage);
    cfg.stage_b.validate()?;
    if !(cfg.beta > 0.0 && cfg.beta.is_finite()) {
        return Err(Error::Invalid(format!("beta must be positive, got {}", cfg.beta)));
    }
    let mut ctx = Ctx::new("train-b", out, cfg.clone())?;
    let profile = load_profile(&ctx.input("profile", a.profile.as_ref(), "profile.json")?)?;
    let ckpt = ctx.input("reference", a.reference.as_ref(), "reference.ckpt.json")?;
    let (reference, _) = load_checkpoint(&ckpt, Some(&profile.vocab))?;
    let pairs_path = ctx.input("pairs", a.pairs.as_ref(), "pairs.jsonl")?;
    let pairs = in_file(&pairs_path, load_pairs_jsonl(&pairs_path, &profile.vocab))?;
    let validation = match ctx.optional_input("validation", a.validation.as_ref(), "samples_validation.jsonl")? {
        Some(p) => read_samples(&p, &profile)?,
        None => Vec::new(),
    };
    let validator = MacroValidator::new(&reference, &validation, &profile)?;
    let stage = run_b_tuning(
        &reference,
        &pairs,
        cfg.beta,
        cfg.b_loss,
        &cfg.stage_b,
        validator.as_ref(),
        &mut substream(cfg.seed, "train/b"),
    )?;
    save_checkpoint(&stage.model, &profile.vocab, ctx.output("policy.ckpt.json"))?;
    ctx.wrote("policy", "policy.ckpt.json")?;
    write_trace(&ctx.output("trace_b.jsonl"), &stage.trace)?;
    ctx.wrote("trace", "trace_b.jsonl")?;
    println!("stage B: {} pairs, best epoch {} of {}", pairs.len(), stage.best_epoch, cfg.stage_b.epochs);
    ctx.finish(json!({
        "pairs": pairs.len(),
        "loss": cfg.b_loss,
        "beta": cfg.beta,
        "best_epoch": stage.best_epoch,
        "trace": stage.trace,
        "reference_checksum": reference.checksum(),
        "checksum": stage.model.checksum(),
    }))
}

fn protocol_name(p: Protocol) -> &'static str {
    match p {
        Protocol::RealDistribution => "real distribution",
        Protocol::Balanced => "balanced",
    }
}

fn run(a: &RunArgs, mut cfg: PipelineConfig, out: &Path) -> Result<()> {
    if let Some(p) = &a.events {
        cfg.events = Some(p.clone());
    }
    if let Some(p) = &a.corpus {
        cfg.auxiliary_corpus = Some(p.clone());
    }
    apply_thresholds(&mut cfg.thresholds, &a.thresholds);
    apply_selection(&mut cfg, &a.selection)?;
    if let Some(v) = a.epsilon {
        cfg.epsilon = v;
    }
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = a.beta {
        cfg.beta = v;
    }
    if let Some(v) = &a.b_loss {
        cfg.b_loss = parse_loss(v)?;
    }
    cfg.skip_stage_a |= a.skip_stage_a;
    cfg.skip_stage_b |= a.skip_stage_b;
    cfg.invert_penalty |= a.invert_penalty;
    cfg.validate()?;

    let outcome = run_pipeline(&cfg, Some(out))?;
    let m = &outcome.manifest;
    for protocol in [Protocol::RealDistribution, Protocol::Balanced] {
        println!("{} ({} samples)", protocol_name(protocol), m.policy_metrics.get(protocol).samples);
        let reference = m.reference_metrics.get(protocol).to_table("reference");
        let policy = m.policy_metrics.get(protocol).to_table("policy");
        print!("{reference}");
        // header only once
        print!("{}", policy.lines().skip(1).map(|l| format!("{l}\n")).collect::<String>());
    }
    Ok(())
}

fn eval(a: &EvalArgs, cfg: PipelineConfig, out: &Path) -> Result<()> {
    let protocols: Vec<Protocol> = match a.protocol.as_str() {
        "both" => vec![Protocol::RealDistribution, Protocol::Balanced],
        other => vec![other.parse()?],
    };
    let mut ctx = Ctx::new("eval", out, cfg.clone())?;
    let profile = load_profile(&ctx.input("profile", a.profile.as_ref(), "profile.json")?)?;
    let ckpt = ctx.input("checkpoint", a.checkpoint.as_ref(), "policy.ckpt.json")?;
    let (model, _) = load_checkpoint(&ckpt, Some(&profile.vocab))?;

    let mut reports = Vec::new();
    for protocol in protocols {
        let samples = match (protocol, &a.balanced_testset) {
            (Protocol::Balanced, Some(p)) => {
                ctx.record_input("balanced_testset", p)?;
                read_samples(p, &profile)?
            }
            _ => {
                let path = ctx.input("testset", a.testset.as_ref(), "testset.jsonl")?;
                let test = read_samples(&path, &profile)?;
                if protocol == Protocol::Balanced {
                    if cfg.balanced_per_class == 0 {
                        return Err(Error::Invalid("balanced_per_class must be at least 1".into()));
                    }
                    build_balanced_testset(&test, profile.vocab.len(), cfg.balanced_per_class, &mut substream(cfg.seed, "balanced")).0
                } else {
                    test
                }
            }
        };
        let report = evaluate(&model, &samples, &profile, protocol)?;
        let file = match protocol {
            Protocol::RealDistribution => "metrics_real.json",
            Protocol::Balanced => "metrics_balanced.json",
        };
        report.save(ctx.output(file))?;
        ctx.wrote(file.trim_end_matches(".json"), file)?;
        println!("{} ({} samples)", protocol_name(protocol), report.samples);
        print!("{}", report.to_table(&a.label));
        reports.push(report);
    }
    let summary: Vec<Value> = reports
        .iter()
        .map(|r| json!({ "protocol": r.protocol, "samples": r.samples, "metrics": BTreeMap::from(r.metrics()) }))
        .collect();
    ctx.finish(json!({ "checksum": model.checksum(), "reports": summary }))
}

fn compare(a: &CompareArgs, cfg: PipelineConfig, out: &Path) -> Result<()> {
    let mut ctx = Ctx::new("compare", out, cfg)?;
    ctx.record_input("base", &a.base)?;
    ctx.record_input("other", &a.other)?;
    let base = MetricsReport::load(&a.base)?;
    let other = MetricsReport::load(&a.other)?;
    if base.protocol != other.protocol {
        log::warn!("comparing a {:?} report with a {:?} report", base.protocol, other.protocol);
    }
    let deltas: Vec<MetricDelta> = compare_reports(&base, &other);
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |x| format!("{x:.4}"));
    println!("{:<8} {:>8} {:>8} {:>8} {:>8}", "metric", "base", "other", "delta", "ratio");
    for d in &deltas {
        println!(
            "{:<8} {:>8} {:>8} {:>8} {:>8}",
            d.metric,
            cell(d.base),
            cell(d.other),
            cell(d.delta),
            cell(d.ratio)
        );
    }
    write_json(&ctx.output("compare.json"), &deltas)?;
    ctx.wrote("compare", "compare.json")?;
    ctx.finish(json!({ "metrics": deltas.len() }))
}
