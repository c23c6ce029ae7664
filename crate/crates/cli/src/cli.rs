//! Command-line surface.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use hanet_core::metrics::Aggregate;
use hanet_core::model::{DecoderSeed, Variant};

use crate::settings::{CommonOpts, ModelOpts, ShapeOpts, SynthOpts, TrainOpts};

#[derive(Parser, Debug)]
#[command(
    name = "hanet",
    version,
    about = "Hierarchical attention sequence segmentation: synthesize data, train, evaluate, predict, and benchmark",
    after_help = "Settings may also come from --config FILE (one `key = value` per line, \
                  same names as the long flags); explicit flags win. Exit codes: \
                  0 success, 1 invalid input, 2 runtime failure."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic labelled dataset (features, labels, manifest)
    Synth(SynthArgs),
    /// Train a model on a manifest of feature/label pairs
    Train(TrainArgs),
    /// Score predictions against ground truth
    Eval(EvalArgs),
    /// Run a trained model and export per-sequence prediction files
    Predict(PredictArgs),
    /// Compare analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Measure single-core inference throughput
    Bench(BenchArgs),
    /// Train one model per architecture setting and emit a CSV summary
    Sweep(SweepArgs),
}

#[derive(clap::Args, Debug)]
pub struct SynthArgs {
    /// Output directory for feature/label files and manifest.tsv.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub shape: ShapeOpts,
    #[command(flatten)]
    pub synth: SynthOpts,
    #[command(flatten)]
    pub common: CommonOpts,
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    /// Manifest of training sequences (features<TAB>labels per line).
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Where to write the trained checkpoint.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Manifest of validation sequences.
    #[arg(long, value_name = "FILE", conflicts_with = "holdout")]
    pub val: Option<PathBuf>,
    /// Hold out the last N training sequences for validation instead.
    #[arg(long, value_name = "N")]
    pub holdout: Option<usize>,
    /// Also write the per-epoch training log as JSON.
    #[arg(long, value_name = "FILE")]
    pub log_json: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelOpts,
    #[command(flatten)]
    pub shape: ShapeOpts,
    #[command(flatten)]
    pub train: TrainOpts,
    #[command(flatten)]
    pub common: CommonOpts,
}

#[derive(clap::Args, Debug)]
pub struct EvalArgs {
    /// Manifest of ground-truth sequences.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Evaluate this checkpoint in-process.
    #[arg(long, value_name = "FILE", required_unless_present = "pred", conflicts_with = "pred")]
    pub model: Option<PathBuf>,
    /// Evaluate prediction files exported by `predict` from this directory.
    #[arg(long, value_name = "DIR")]
    pub pred: Option<PathBuf>,
    /// Expected architecture variant; fails if the checkpoint differs.
    #[arg(long, value_name = "NAME")]
    pub variant: Option<Variant>,
    /// Score aggregation: per-video | pooled.
    #[arg(long, value_name = "MODE")]
    pub aggregate: Option<Aggregate>,
    /// Class id to exclude from the segmental metrics.
    #[arg(long, value_name = "ID")]
    pub background: Option<usize>,
    /// Also write the full per-sequence report as JSON.
    #[arg(long, value_name = "FILE")]
    pub json: Option<PathBuf>,
    /// Worker threads for per-sequence work.
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
    #[command(flatten)]
    pub common: CommonOpts,
}

#[derive(clap::Args, Debug)]
pub struct PredictArgs {
    /// Manifest of input sequences.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Trained checkpoint to run.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Output directory for per-sequence prediction files.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Expected architecture variant; fails if the checkpoint differs.
    #[arg(long, value_name = "NAME")]
    pub variant: Option<Variant>,
    /// Also export attention weights as CSV.
    #[arg(long)]
    pub attention: bool,
    /// Worker threads for per-sequence work.
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
    #[command(flatten)]
    pub common: CommonOpts,
}

#[derive(clap::Args, Debug)]
pub struct GradcheckArgs {
    /// Check one variant (full | minus-ve | minus-ve-se) or `all`.
    #[arg(long, value_name = "NAME")]
    pub variant: Option<String>,
    /// Also verify that a sabotaged gradient is caught.
    #[arg(long)]
    pub self_test: bool,
    /// Embedding / hidden width L.
    #[arg(long, value_name = "N")]
    pub embed_dim: Option<usize>,
    /// Frames per segment T.
    #[arg(long, value_name = "N")]
    pub segment_frames: Option<usize>,
    /// Segments per window N.
    #[arg(long, value_name = "N")]
    pub segments: Option<usize>,
    /// Decoder seeding: per-segment | last-segment.
    #[arg(long, value_name = "NAME")]
    pub decoder_seed: Option<DecoderSeed>,
    #[command(flatten)]
    pub shape: ShapeOpts,
    #[command(flatten)]
    pub common: CommonOpts,
}

#[derive(clap::Args, Debug)]
#[command(after_help = "`--config paper` selects the reference benchmark shape (embed_dim 200, \
                        segment_frames 50, segments 5, feat_dim 2048, classes 6); any other \
                        value is read as a settings file.")]
pub struct BenchArgs {
    /// Seconds to spend measuring.
    #[arg(long, value_name = "X")]
    pub budget_s: Option<f64>,
    /// Stop after this many forward passes even under budget.
    #[arg(long, value_name = "N")]
    pub max_windows: Option<usize>,
    /// Also write the throughput report as JSON.
    #[arg(long, value_name = "FILE")]
    pub json: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelOpts,
    #[command(flatten)]
    pub shape: ShapeOpts,
    #[command(flatten)]
    pub common: CommonOpts,
}

#[derive(clap::Args, Debug)]
pub struct SweepArgs {
    /// Where to write the CSV summary.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Embedding widths to sweep.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    pub embed_dims: Option<Vec<usize>>,
    /// Frames-per-segment values to sweep.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    pub frame_counts: Option<Vec<usize>>,
    /// Segments-per-window values to sweep.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    pub segment_counts: Option<Vec<usize>>,
    /// Generated sequences held out for validation.
    #[arg(long, value_name = "N")]
    pub val_sequences: Option<usize>,
    #[command(flatten)]
    pub model: ModelOpts,
    #[command(flatten)]
    pub shape: ShapeOpts,
    #[command(flatten)]
    pub synth: SynthOpts,
    #[command(flatten)]
    pub train: TrainOpts,
    #[command(flatten)]
    pub common: CommonOpts,
}
