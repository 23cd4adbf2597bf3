use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use url::Url;

#[derive(Debug, Parser)]
#[command(
    name = "vecap",
    version,
    about = "Caption enrichment, sampling, toy training and retrieval evaluation"
)]
#[command(args_override_self = true)]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: log::LevelFilter,

    /// Flat key=value file with defaults for any flag; flags on the command
    /// line take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enrich a shard with generated and fused captions.
    Recaption(RecaptionArgs),
    /// Emit the caption each record contributes at a given epoch.
    Sample(SampleArgs),
    /// Train linear encoders with the contrastive loss on toy features.
    TrainToy(TrainToyArgs),
    /// Compute retrieval, zero-shot and leave-one-out metrics.
    Eval(EvalArgs),
    /// Summarise a shard.
    Stats(StatsArgs),
    /// Run the scriptable mock completion server.
    MockServe(MockServeArgs),
}

#[derive(Debug, Args)]
pub struct RecaptionArgs {
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long = "out", value_name = "PATH")]
    pub output: PathBuf,
    #[arg(long)]
    pub captioner_url: Url,
    #[arg(long)]
    pub fuser_url: Url,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    #[arg(long, default_value_t = 300)]
    pub max_alt_chars: usize,
    /// Records per read/enrich/write round.
    #[arg(long)]
    pub chunk_records: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub max_attempts: u32,
    #[arg(long, default_value_t = 250)]
    pub base_backoff_ms: u64,
    #[arg(long, default_value_t = 4000)]
    pub max_backoff_ms: u64,
    #[arg(long, default_value_t = 60)]
    pub timeout_secs: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Hcs,
    Random,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SchemeArg {
    Alttext,
    Vecap,
    Mixed,
    Ser,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ResampleArg {
    PerEpoch,
    PerStep,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "hcs")]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value = "mixed")]
    pub scheme: SchemeArg,
    #[arg(long, default_value_t = 0)]
    pub epoch: u64,
    #[arg(long, default_value_t = 0)]
    pub step: u64,
    #[arg(long, value_enum, default_value = "per-epoch")]
    pub resample: ResampleArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ReductionArg {
    Mean,
    Sum,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 5e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 50)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0.1)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 16)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 0.07)]
    pub init_tau: f64,
    /// Lower clamp on the temperature; 0 disables it.
    #[arg(long, default_value_t = 0.01)]
    pub min_tau: f64,
    #[arg(long)]
    pub fixed_tau: bool,
    #[arg(long, value_enum, default_value = "mean")]
    pub loss_reduction: ReductionArg,
    #[arg(long, default_value_t = 0.0)]
    pub aug_sigma: f64,
    #[arg(long, value_enum, default_value = "mixed")]
    pub scheme: SchemeArg,
    #[arg(long, value_enum, default_value = "per-epoch")]
    pub resample: ResampleArg,
    /// Synthetic pairs generated when no feature files are given.
    #[arg(long, default_value_t = 320)]
    pub pairs: usize,
    #[arg(long, default_value_t = 16)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 0.3)]
    pub alt_noise: f64,
    #[arg(long, default_value_t = 0.2)]
    pub vecap_noise: f64,
    /// Trailing pairs held out for evaluation.
    #[arg(long, default_value_t = 64)]
    pub holdout: usize,
    /// Image features (embedding file); requires --alt-features.
    #[arg(long, requires = "alt_features")]
    pub image_features: Option<PathBuf>,
    #[arg(long, requires = "image_features")]
    pub alt_features: Option<PathBuf>,
    #[arg(long, requires = "image_features")]
    pub vecap_features: Option<PathBuf>,
    /// Write per-step history as CSV.
    #[arg(long, value_name = "PATH")]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Json,
    Table,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Image embeddings.
    #[arg(long)]
    pub images: PathBuf,
    /// Text embeddings for image-text retrieval.
    #[arg(long)]
    pub texts: Option<PathBuf>,
    /// Image-to-text ground truth (JSONL); identity when absent.
    #[arg(long, requires = "texts")]
    pub gt: Option<PathBuf>,
    /// Class template embeddings for zero-shot classification.
    #[arg(long, requires = "labels")]
    pub classes: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub templates_per_class: usize,
    /// Image labels (JSONL) for zero-shot classification.
    #[arg(long, requires = "classes")]
    pub labels: Option<PathBuf>,
    /// Image labels (JSONL) for leave-one-out retrieval.
    #[arg(long)]
    pub map_labels: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub ks: Vec<usize>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: FormatArg,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub max_alt_chars: usize,
}

#[derive(Debug, Args)]
pub struct MockServeArgs {
    /// JSON behaviour script; plain echo when absent.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// 0 picks a free port.
    #[arg(long, default_value_t = 8089)]
    pub port: u16,
}
