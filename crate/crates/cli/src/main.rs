//! `progtune`: stage-wise and end-to-end driver for the two-stage tuning
//! pipeline. Exit codes: 0 success, 2 validation error, 3 runtime error.

mod commands;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use progtune_core::pipeline::PipelineConfig;
use progtune_core::Error;

#[derive(Debug, Parser)]
#[command(name = "progtune", version, about = "Progressive two-stage tuning for long-tailed behavior prediction")]
pub struct Cli {
    /// TOML (or .json) run configuration. Flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Worker threads for scoring and selection. Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic long-tailed event log and auxiliary corpus.
    Synth(SynthArgs),
    /// Split users, window events and compute the anchor/tail profile.
    Partition(PartitionArgs),
    /// Render samples as instruction JSONL, optionally mixed with auxiliary pairs.
    ExportPrompts(ExportArgs),
    /// Anchor-stage supervised tuning; writes the reference checkpoint.
    TrainA(TrainAArgs),
    /// Difficulty scores of a pool under a checkpoint.
    Score(ScoreArgs),
    /// Class-balanced selection plus preference pairs.
    Select(SelectArgs),
    /// Preference pairs for a sample file.
    Pairs(PairsArgs),
    /// Preference tuning from a reference checkpoint.
    TrainB(TrainBArgs),
    /// Every stage end to end.
    Run(RunArgs),
    /// Metrics of a checkpoint under one or both test protocols.
    Eval(EvalArgs),
    /// Per-metric deltas between two metric reports.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub behaviors: Option<usize>,
    #[arg(long)]
    pub users: Option<usize>,
    /// Target number of windowed samples.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub zipf: Option<f64>,
    #[arg(long)]
    pub coherence: Option<f64>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub variation: Option<f64>,
    /// Size of the synthetic auxiliary corpus.
    #[arg(long)]
    pub aux_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ThresholdArgs {
    #[arg(long)]
    pub anchor_threshold: Option<f64>,
    #[arg(long)]
    pub head_threshold: Option<f64>,
    #[arg(long)]
    pub medium_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PartitionArgs {
    /// Event log JSONL. Defaults to the config's `events`.
    #[arg(long)]
    pub events: Option<PathBuf>,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub balanced_per_class: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Sample JSONL [default: <out-dir>/samples_train.jsonl].
    #[arg(long)]
    pub samples: Option<PathBuf>,
    /// [default: <out-dir>/profile.json]
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Auxiliary corpus JSONL. Without one a synthetic corpus is used.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Use template 1, 2 or 3 for every record instead of a random one.
    #[arg(long)]
    pub template: Option<u8>,
    /// Drop the next-event time and place sentence.
    #[arg(long)]
    pub no_context: bool,
    /// Export anchor-target samples only.
    #[arg(long)]
    pub anchor_only: bool,
}

#[derive(Debug, Args)]
pub struct StageArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Registered optimizer name (`sgd`, `adamw`).
    #[arg(long)]
    pub optimizer: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainAArgs {
    /// [default: <out-dir>/samples_train.jsonl]
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// [default: <out-dir>/samples_validation.jsonl when present]
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// [default: <out-dir>/profile.json]
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Train on every behavior instead of anchors only.
    #[arg(long)]
    pub skip_stage_a: bool,
    #[command(flatten)]
    pub stage: StageArgs,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// [default: <out-dir>/reference.ckpt.json]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// [default: <out-dir>/samples_train.jsonl]
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// [default: <out-dir>/profile.json]
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub invert_penalty: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct SelectionArgs {
    #[arg(long)]
    pub per_category: Option<usize>,
    /// Registered strategy: kmeans, random or topk.
    #[arg(long = "select")]
    pub strategy: Option<String>,
    /// `off` replaces K-Means++ seeding with pure top-difficulty picks.
    #[arg(long, value_enum)]
    pub kmeans: Option<Switch>,
    /// runner-up or drop.
    #[arg(long)]
    pub rejection: Option<String>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub score: ScoreArgs,
    #[command(flatten)]
    pub selection: SelectionArgs,
}

#[derive(Debug, Args)]
pub struct PairsArgs {
    /// [default: <out-dir>/reference.ckpt.json]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// [default: <out-dir>/selected.jsonl]
    #[arg(long)]
    pub samples: Option<PathBuf>,
    #[arg(long)]
    pub rejection: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainBArgs {
    /// [default: <out-dir>/reference.ckpt.json]
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// [default: <out-dir>/pairs.jsonl]
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// [default: <out-dir>/samples_validation.jsonl when present]
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// [default: <out-dir>/profile.json]
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// dpo or sft.
    #[arg(long)]
    pub b_loss: Option<String>,
    #[command(flatten)]
    pub stage: StageArgs,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub events: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
    #[command(flatten)]
    pub selection: SelectionArgs,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub b_loss: Option<String>,
    #[arg(long)]
    pub skip_stage_a: bool,
    #[arg(long)]
    pub skip_stage_b: bool,
    #[arg(long)]
    pub invert_penalty: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// [default: <out-dir>/policy.ckpt.json]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Real-distribution test samples [default: <out-dir>/testset.jsonl].
    #[arg(long)]
    pub testset: Option<PathBuf>,
    /// Balanced test samples. Without it the balanced set is drawn from
    /// `--testset` exactly as a full run draws it.
    #[arg(long)]
    pub balanced_testset: Option<PathBuf>,
    /// [default: <out-dir>/profile.json]
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// real, balanced or both.
    #[arg(long, default_value = "both")]
    pub protocol: String,
    /// Row label of the printed table.
    #[arg(long, default_value = "model")]
    pub label: String,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub base: PathBuf,
    pub other: PathBuf,
}

fn init_logging(level: &str) -> progtune_core::Result<()> {
    let filter: log::LevelFilter = level
        .parse()
        .map_err(|_| Error::Config(format!("unknown log_level {level:?}")))?;
    env_logger::Builder::new()
        .filter_level(filter)
        .format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().as_str(),
                "target": record.target(),
                "message": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .try_init()
        .ok();
    Ok(())
}

fn load_config(cli: &Cli) -> progtune_core::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn real_main(cli: &Cli) -> progtune_core::Result<()> {
    let cfg = load_config(cli)?;
    init_logging(&cfg.log_level)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Invalid("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    }
    commands::dispatch(cli, cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
