//! Command-line arguments.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::report::Format;

#[derive(Debug, Parser)]
#[command(
    name = "backlens",
    version,
    about = "Gradient structure, logit-lens projections and rank-1 edits on a toy transformer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Initialize a model from a config and write a checkpoint.
    GenModel(GenModelArgs),
    /// Generate a labeled synthetic corpus as JSONL.
    GenCorpus(GenCorpusArgs),
    /// Numerical rank of every MLP gradient against the n-token law.
    RankScan(ScanArgs),
    /// Logit-lens projections of one prompt, layer by token.
    LensTable(LensArgs),
    /// Mean vector norms per (layer, segment).
    SegmentNorms(SegmentArgs),
    /// Mean target-token rank of FF2 VJPs per (layer, segment).
    TargetRanks(ScanArgs),
    /// Analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Apply one edit to one prompt.
    Edit(EditArgs),
    /// Efficacy, paraphrase, neighborhood and KL metrics for edits.
    EvalEdits(EvalArgs),
    /// Decoder VJP as a signed sum of decoder columns.
    VjpDecompose(VjpArgs),
}

#[derive(Debug, Args)]
pub struct Output {
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct Inputs {
    /// Checkpoint file.
    #[arg(long)]
    pub model: PathBuf,
    /// JSONL corpus.
    #[arg(long)]
    pub corpus: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    /// JSON config; missing fields take the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, required_unless_present = "print_default")]
    pub out: Option<PathBuf>,
    /// Also write the toy vocabulary as a JSON array.
    #[arg(long)]
    pub vocab_out: Option<PathBuf>,
    /// Print the default config as JSON and exit.
    #[arg(long)]
    pub print_default: bool,
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Inclusive prompt length range, `a..b`.
    #[arg(long, default_value = "2..10")]
    pub len_range: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub paraphrases: usize,
    #[arg(long, default_value_t = 3)]
    pub neighbors: usize,
    /// Corpus path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct LensArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub output: Output,
    /// Corpus entry to project.
    #[arg(long, default_value_t = 0)]
    pub prompt: usize,
    /// ff1-inputs or ff2-vjps.
    #[arg(long, default_value = "ff2-vjps")]
    pub which: String,
    /// most-probable or least-probable; defaults to the source's own.
    #[arg(long)]
    pub convention: Option<String>,
    /// Tokens listed at each end of the distribution.
    #[arg(long)]
    pub k: Option<usize>,
    /// Apply ln_f before projecting.
    #[arg(long, conflicts_with = "no_ln")]
    pub apply_ln: bool,
    /// Project without ln_f.
    #[arg(long)]
    pub no_ln: bool,
    /// Vocabulary JSON; the toy vocabulary when omitted.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub output: Output,
    /// ff1-vjp, ff2-vjp, block-in-vjp, ff1-input or ff2-input.
    #[arg(long, default_value = "ff2-vjp")]
    pub quantity: String,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub output: Output,
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    /// Largest accepted relative error; exceeding it exits with 3.
    #[arg(long, default_value_t = 1e-6)]
    pub threshold: f64,
    /// Check only the first N prompts.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Record wall-clock time (makes the report non-reproducible).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub output: Output,
    #[arg(long, default_value_t = 0)]
    pub prompt: usize,
    /// sgd-backprop or forward-pass-shift.
    #[arg(long, default_value = "forward-pass-shift")]
    pub method: String,
    /// Learning rate; required for sgd-backprop.
    #[arg(long, allow_hyphen_values = true)]
    pub eta: Option<f64>,
    /// FF2 layer for forward-pass-shift.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Accept η ≥ 0 for sgd-backprop.
    #[arg(long)]
    pub allow_positive_eta: bool,
    /// Write the edited model to this checkpoint.
    #[arg(long)]
    pub save_model: Option<PathBuf>,
    /// Vocabulary JSON for the printed prediction.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub output: Output,
    /// sgd-backprop, forward-pass-shift or both.
    #[arg(long, default_value = "both")]
    pub method: String,
    /// Comma-separated SGD learning rates, or `grid`.
    #[arg(long, default_value = "grid", allow_hyphen_values = true)]
    pub sgd_eta: String,
    /// Comma-separated shift learning rates, `grid`, or `default`.
    #[arg(long, default_value = "default")]
    pub shift_eta: String,
    /// Comma-separated shift layers, `all`, or `default`.
    #[arg(long, default_value = "default")]
    pub layer: String,
    /// Size of the held-out set the KL column averages over.
    #[arg(long, default_value_t = 20)]
    pub held_out: usize,
    #[arg(long, default_value_t = 1_000_003)]
    pub held_out_seed: u64,
}

#[derive(Debug, Args)]
pub struct VjpArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub output: Output,
    /// Single corpus entry; every entry when omitted.
    #[arg(long)]
    pub prompt: Option<usize>,
    /// Largest accepted residual and |Σ coefficients|.
    #[arg(long, default_value_t = 1e-12)]
    pub tolerance: f64,
}
