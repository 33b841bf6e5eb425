//! Command-line flags. Every flag mirrors one configuration field, and the
//! parsed structs serialize back into the manifest's resolved config.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Serialize, Serializer};

use mmssl::augment::AugmentPolicy;
use mmssl::data::GenSpec;
use mmssl::losses::{LossConfig, NegativeMode};
use mmssl::model::ModelConfig;
use mmssl::train::{Method, ProbeConfig, TrainConfig, DEFAULT_FRACTIONS};
use mmssl::verify::{DEFAULT_SEEDS, DEFAULT_TOLERANCE};

#[derive(Debug, Parser)]
#[command(name = "mmssl", version, about = "Multi-modal self-supervised pre-training on synthetic paired data")]
pub struct Cli {
    /// File of `key = value` lines merged underneath the command-line flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired dataset.
    GenData(GenDataArgs),
    /// Self-supervised pre-training with one of the six methods.
    Pretrain(PretrainArgs),
    /// Linear probe on frozen encoders.
    Probe(ProbeArgs),
    /// Label-fraction fine-tuning sweep on frozen encoders.
    Sweep(SweepArgs),
    /// Finite-difference gradient checks over every objective and block.
    Gradcheck(GradcheckArgs),
    /// Re-run a command from its manifest.
    Replay(ReplayArgs),
}

pub const SUBCOMMANDS: [&str; 6] = ["gen-data", "pretrain", "probe", "sweep", "gradcheck", "replay"];

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: mmssl::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<NegativeMode, String> {
    s.parse().map_err(|e: mmssl::Error| e.to_string())
}

fn display<T: std::fmt::Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn gen_defaults() -> GenSpec {
    GenSpec::default()
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = gen_defaults().n_samples)]
    pub n: usize,
    /// Cross-modal noise in [0, 1].
    #[arg(long, default_value_t = 0.0, value_parser = unit_interval)]
    pub eta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = gen_defaults().latent_dim)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = gen_defaults().classes)]
    pub classes: usize,
    #[arg(long, default_value_t = gen_defaults().grid.height)]
    pub height: usize,
    #[arg(long, default_value_t = gen_defaults().grid.width)]
    pub width: usize,
    #[arg(long, default_value_t = gen_defaults().grid.channels)]
    pub channels: usize,
    #[arg(long, default_value_t = gen_defaults().vocab)]
    pub vocab: usize,
    #[arg(long, default_value_t = gen_defaults().seq_len)]
    pub seq_len: usize,
    /// Also write the paired synonym lexicon for this vocabulary.
    #[arg(long)]
    pub lexicon_out: Option<PathBuf>,
}

fn train_defaults() -> TrainConfig {
    TrainConfig::default()
}

fn loss_defaults() -> LossConfig {
    LossConfig::default()
}

fn model_defaults() -> ModelConfig {
    ModelConfig::default()
}

fn augment_defaults() -> AugmentPolicy {
    AugmentPolicy::default()
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct PretrainArgs {
    #[arg(long, value_parser = parse_method)]
    #[serde(serialize_with = "display")]
    pub method: Method,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics CSV path; defaults to the checkpoint path with `.csv` appended.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Independent runs with seeds `seed, seed+1, ...`.
    #[arg(long, default_value_t = 1)]
    pub runs: u64,
    /// Synonym lexicon file; defaults to the paired lexicon of the vocabulary.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,

    #[arg(long, default_value_t = train_defaults().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = train_defaults().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = train_defaults().learning_rate)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = train_defaults().adam.beta1)]
    pub beta1: f64,
    #[arg(long, default_value_t = train_defaults().adam.beta2)]
    pub beta2: f64,
    #[arg(long, default_value_t = train_defaults().adam.eps)]
    pub adam_eps: f64,
    /// Keep the dataset order fixed across epochs.
    #[arg(long)]
    pub no_shuffle: bool,

    #[arg(long, default_value_t = loss_defaults().temperature)]
    pub temperature: f64,
    #[arg(long, default_value_t = loss_defaults().margin)]
    pub margin: f64,
    #[arg(long, default_value_t = loss_defaults().lambda)]
    pub lambda: f64,
    #[arg(long, default_value_t = loss_defaults().lambda_u2v)]
    pub lambda_u2v: f64,
    #[arg(long, default_value_t = loss_defaults().lambda_v2u)]
    pub lambda_v2u: f64,
    #[arg(long, default_value_t = loss_defaults().lambda_f2f)]
    pub lambda_f2f: f64,
    #[arg(long, default_value_t = loss_defaults().lambda_f2i)]
    pub lambda_f2i: f64,
    #[arg(long, default_value_t = loss_defaults().lambda_f2t)]
    pub lambda_f2t: f64,
    #[arg(long, default_value_t = loss_defaults().negative_mode, value_parser = parse_mode)]
    #[serde(serialize_with = "display")]
    pub negative_mode: NegativeMode,

    #[arg(long, default_value_t = model_defaults().image_hidden)]
    pub image_hidden: usize,
    #[arg(long, default_value_t = model_defaults().d_enc)]
    pub d_enc: usize,
    #[arg(long, default_value_t = model_defaults().d_tok)]
    pub d_tok: usize,
    #[arg(long, default_value_t = model_defaults().head_hidden)]
    pub head_hidden: usize,
    #[arg(long, default_value_t = model_defaults().dim)]
    pub dim: usize,
    #[arg(long, default_value_t = model_defaults().heads)]
    pub heads: usize,

    #[arg(long, default_value_t = augment_defaults().noise_prob)]
    pub noise_prob: f64,
    #[arg(long, default_value_t = augment_defaults().noise_sigma)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = augment_defaults().mask_prob)]
    pub mask_prob: f64,
    #[arg(long, default_value_t = augment_defaults().mask_fraction)]
    pub mask_fraction: f64,
    #[arg(long, default_value_t = augment_defaults().rescale_prob)]
    pub rescale_prob: f64,
    #[arg(long, default_value_t = augment_defaults().rescale_range.0)]
    pub rescale_min: f64,
    #[arg(long, default_value_t = augment_defaults().rescale_range.1)]
    pub rescale_max: f64,
    #[arg(long, default_value_t = augment_defaults().synonym_prob)]
    pub synonym_prob: f64,
}

fn probe_defaults() -> ProbeConfig {
    ProbeConfig::default()
}

#[derive(Debug, Args, Serialize)]
pub struct SupervisedArgs {
    /// Pre-trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Metrics CSV path.
    #[arg(long)]
    pub metrics: PathBuf,
    #[arg(long, default_value_t = probe_defaults().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = probe_defaults().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = probe_defaults().learning_rate)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = probe_defaults().heldout_fraction)]
    pub heldout_fraction: f64,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct ProbeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: SupervisedArgs,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: SupervisedArgs,
    /// Comma-separated label fractions in (0, 1].
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_FRACTIONS)]
    pub fractions: Vec<f64>,
    /// Hidden width of the classification head.
    #[arg(long, default_value_t = probe_defaults().hidden)]
    pub hidden: usize,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct GradcheckArgs {
    /// Largest accepted relative error.
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    /// Seeds per operation.
    #[arg(long, default_value_t = DEFAULT_SEEDS)]
    pub seeds: u64,
    /// Optional CSV report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write outputs into this directory instead of their recorded paths.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}
