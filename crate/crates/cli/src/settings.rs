//! The optional `key = value` config file and its merge with command-line
//! flags.
//!
//! One key per line; `#` starts a comment; keys use the long flag names with
//! `-` or `_` interchangeably. The file shares one namespace across all
//! subcommands so a single file can configure a whole pipeline; each
//! subcommand reads the keys it understands. Unknown keys are errors, and an
//! explicit flag always wins over a file entry.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use hanet_core::data::{SynthSpec, TransitionModel};
use hanet_core::metrics::Aggregate;
use hanet_core::model::{DecoderSeed, ModelConfig, Variant};
use hanet_core::train::TrainConfig;

use crate::error::CliError;

/// Every config-file key, all optional. Flags win over these.
#[derive(Debug, Default, Clone)]
pub struct Settings {
    pub embed_dim: Option<usize>,
    pub segment_frames: Option<usize>,
    pub segments: Option<usize>,
    pub feat_dim: Option<usize>,
    pub classes: Option<usize>,
    pub variant: Option<Variant>,
    pub decoder_seed: Option<DecoderSeed>,

    pub learning_rate: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub shuffle: Option<bool>,
    pub patience: Option<usize>,
    pub clip_norm: Option<f64>,

    pub sequences: Option<usize>,
    pub min_len: Option<usize>,
    pub max_len: Option<usize>,
    pub mean_action_len: Option<f64>,
    pub noise_sigma: Option<f64>,
    pub transitions: Option<String>,
    pub transition_bias: Option<f64>,

    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub holdout: Option<usize>,
    pub background: Option<usize>,
    pub aggregate: Option<Aggregate>,
    pub budget_s: Option<f64>,
    pub max_windows: Option<usize>,
    pub val_sequences: Option<usize>,
    pub embed_dims: Option<Vec<usize>>,
    pub frame_counts: Option<Vec<usize>>,
    pub segment_counts: Option<Vec<usize>>,
}

impl Settings {
    /// Loads the file when a path is given, otherwise returns the empty
    /// settings (every field `None`).
    pub fn load_opt(path: Option<&Path>) -> Result<Settings, CliError> {
        match path {
            Some(p) => Settings::load(p),
            None => Ok(Settings::default()),
        }
    }

    pub fn load(path: &Path) -> Result<Settings, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
        let mut s = Settings::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |msg: String| {
                CliError::invalid(format!("{}:{}: {msg}", path.display(), idx + 1))
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got {line:?}")))?;
            let key = key.trim().replace('-', "_");
            let value = value.trim();
            s.assign(&key, value)
                .map_err(|msg| at(format!("key `{key}`: {msg}")))?;
        }
        Ok(s)
    }

    fn assign(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "embed_dim" => set(&mut self.embed_dim, value),
            "segment_frames" => set(&mut self.segment_frames, value),
            "segments" => set(&mut self.segments, value),
            "feat_dim" => set(&mut self.feat_dim, value),
            "classes" => set(&mut self.classes, value),
            "variant" => set(&mut self.variant, value),
            "decoder_seed" => set(&mut self.decoder_seed, value),
            "learning_rate" => set(&mut self.learning_rate, value),
            "beta1" => set(&mut self.beta1, value),
            "beta2" => set(&mut self.beta2, value),
            "epsilon" => set(&mut self.epsilon, value),
            "epochs" => set(&mut self.epochs, value),
            "batch_size" => set(&mut self.batch_size, value),
            "shuffle" => set(&mut self.shuffle, value),
            "patience" => set(&mut self.patience, value),
            "clip_norm" => set(&mut self.clip_norm, value),
            "sequences" => set(&mut self.sequences, value),
            "min_len" => set(&mut self.min_len, value),
            "max_len" => set(&mut self.max_len, value),
            "mean_action_len" => set(&mut self.mean_action_len, value),
            "noise_sigma" => set(&mut self.noise_sigma, value),
            "transitions" => {
                self.transitions = Some(value.to_string());
                Ok(())
            }
            "transition_bias" => set(&mut self.transition_bias, value),
            "seed" => set(&mut self.seed, value),
            "threads" => set(&mut self.threads, value),
            "holdout" => set(&mut self.holdout, value),
            "background" => set(&mut self.background, value),
            "aggregate" => set(&mut self.aggregate, value),
            "budget_s" => set(&mut self.budget_s, value),
            "max_windows" => set(&mut self.max_windows, value),
            "val_sequences" => set(&mut self.val_sequences, value),
            "embed_dims" => set_list(&mut self.embed_dims, value),
            "frame_counts" => set_list(&mut self.frame_counts, value),
            "segment_counts" => set_list(&mut self.segment_counts, value),
            _ => Err("unknown key".to_string()),
        }
    }
}

fn set<T: FromStr>(slot: &mut Option<T>, value: &str) -> Result<(), String>
where
    T::Err: fmt::Display,
{
    *slot = Some(value.parse::<T>().map_err(|e| e.to_string())?);
    Ok(())
}

/// Parses a comma-separated list of positive integers.
pub fn parse_usize_list(value: &str) -> Result<Vec<usize>, String> {
    value
        .split(',')
        .map(|tok| tok.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect()
}

fn set_list(slot: &mut Option<Vec<usize>>, value: &str) -> Result<(), String> {
    *slot = Some(parse_usize_list(value)?);
    Ok(())
}

/// Architecture flags shared by the model-building subcommands.
#[derive(clap::Args, Debug, Default, Clone)]
pub struct ModelOpts {
    /// Embedding / hidden width L.
    #[arg(long, value_name = "N")]
    pub embed_dim: Option<usize>,
    /// Frames per segment T.
    #[arg(long, value_name = "N")]
    pub segment_frames: Option<usize>,
    /// Segments per window N.
    #[arg(long, value_name = "N")]
    pub segments: Option<usize>,
    /// Architecture variant: full | minus-ve | minus-ve-se.
    #[arg(long, value_name = "NAME")]
    pub variant: Option<Variant>,
    /// Decoder seeding: per-segment | last-segment.
    #[arg(long, value_name = "NAME")]
    pub decoder_seed: Option<DecoderSeed>,
}

/// Input-shape flags for commands that build a model from scratch.
#[derive(clap::Args, Debug, Default, Clone)]
pub struct ShapeOpts {
    /// Raw per-frame feature dimension.
    #[arg(long, value_name = "N")]
    pub feat_dim: Option<usize>,
    /// Number of action classes.
    #[arg(long, value_name = "N")]
    pub classes: Option<usize>,
}

/// Optimizer and training-loop flags.
#[derive(clap::Args, Debug, Default, Clone)]
pub struct TrainOpts {
    /// Adam step size.
    #[arg(long, value_name = "X")]
    pub learning_rate: Option<f64>,
    /// Adam first-moment decay.
    #[arg(long, value_name = "X")]
    pub beta1: Option<f64>,
    /// Adam second-moment decay.
    #[arg(long, value_name = "X")]
    pub beta2: Option<f64>,
    /// Adam denominator floor.
    #[arg(long, value_name = "X")]
    pub epsilon: Option<f64>,
    /// Passes over the training windows.
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    /// Windows per optimizer step (losses are averaged).
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,
    /// Shuffle training windows each epoch (true/false).
    #[arg(long, value_name = "BOOL")]
    pub shuffle: Option<bool>,
    /// Stop after this many epochs without validation improvement.
    #[arg(long, value_name = "N")]
    pub patience: Option<usize>,
    /// Clip the global gradient norm to this value.
    #[arg(long, value_name = "X")]
    pub clip_norm: Option<f64>,
}

/// Synthetic-generator flags.
#[derive(clap::Args, Debug, Default, Clone)]
pub struct SynthOpts {
    /// How many sequences to generate.
    #[arg(long, value_name = "N")]
    pub sequences: Option<usize>,
    /// Minimum sequence length in frames.
    #[arg(long, value_name = "N")]
    pub min_len: Option<usize>,
    /// Maximum sequence length in frames.
    #[arg(long, value_name = "N")]
    pub max_len: Option<usize>,
    /// Mean action duration in frames (geometric distribution).
    #[arg(long, value_name = "X")]
    pub mean_action_len: Option<f64>,
    /// Standard deviation of the additive Gaussian feature noise.
    #[arg(long, value_name = "X")]
    pub noise_sigma: Option<f64>,
    /// Class-transition model: uniform | second-order.
    #[arg(long, value_name = "NAME")]
    pub transitions: Option<String>,
    /// P(next class = (prev2 + prev1) mod C) under --transitions second-order.
    #[arg(long, value_name = "X")]
    pub transition_bias: Option<f64>,
}

/// Flags every subcommand accepts.
#[derive(clap::Args, Debug, Default, Clone)]
pub struct CommonOpts {
    /// Config file of `key = value` lines; explicit flags win.
    #[arg(long, value_name = "FILE", global = false)]
    pub config: Option<std::path::PathBuf>,
    /// Seed for all randomness (default 0).
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
}

impl CommonOpts {
    pub fn settings(&self) -> Result<Settings, CliError> {
        Settings::load_opt(self.config.as_deref())
    }

    pub fn resolve_seed(&self, file: &Settings) -> u64 {
        self.seed.or(file.seed).unwrap_or(0)
    }
}

impl ModelOpts {
    /// Fills a config from flags, then the file, then `base` (which already
    /// carries the per-command defaults and any data-derived shape).
    pub fn resolve(
        &self,
        shape: &ShapeOpts,
        file: &Settings,
        base: ModelConfig,
    ) -> Result<ModelConfig, CliError> {
        let cfg = ModelConfig {
            embed_dim: self.embed_dim.or(file.embed_dim).unwrap_or(base.embed_dim),
            segment_frames: self
                .segment_frames
                .or(file.segment_frames)
                .unwrap_or(base.segment_frames),
            segments: self.segments.or(file.segments).unwrap_or(base.segments),
            feat_dim: shape.feat_dim.or(file.feat_dim).unwrap_or(base.feat_dim),
            classes: shape.classes.or(file.classes).unwrap_or(base.classes),
            variant: self.variant.or(file.variant).unwrap_or(base.variant),
            decoder_seed: self
                .decoder_seed
                .or(file.decoder_seed)
                .unwrap_or(base.decoder_seed),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl TrainOpts {
    /// `d` carries the per-command defaults (commands pick their own epoch
    /// budget, for instance).
    pub fn resolve(&self, file: &Settings, seed: u64, d: TrainConfig) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            learning_rate: self
                .learning_rate
                .or(file.learning_rate)
                .unwrap_or(d.learning_rate),
            beta1: self.beta1.or(file.beta1).unwrap_or(d.beta1),
            beta2: self.beta2.or(file.beta2).unwrap_or(d.beta2),
            epsilon: self.epsilon.or(file.epsilon).unwrap_or(d.epsilon),
            epochs: self.epochs.or(file.epochs).unwrap_or(d.epochs),
            batch_size: self.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
            seed,
            shuffle: self.shuffle.or(file.shuffle).unwrap_or(d.shuffle),
            early_stop_patience: self.patience.or(file.patience),
            clip_norm: self.clip_norm.or(file.clip_norm),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl SynthOpts {
    pub fn resolve(&self, shape: &ShapeOpts, file: &Settings) -> Result<SynthSpec, CliError> {
        let transitions = match self
            .transitions
            .as_deref()
            .or(file.transitions.as_deref())
            .unwrap_or("uniform")
        {
            "uniform" => TransitionModel::UniformNoRepeat,
            "second-order" => TransitionModel::SecondOrder {
                bias: self
                    .transition_bias
                    .or(file.transition_bias)
                    .unwrap_or(0.8),
            },
            other => {
                return Err(CliError::invalid(format!(
                    "transitions must be `uniform` or `second-order`, got {other:?}"
                )))
            }
        };
        Ok(SynthSpec {
            classes: shape.classes.or(file.classes).unwrap_or(3),
            feat_dim: shape.feat_dim.or(file.feat_dim).unwrap_or(16),
            num_sequences: self.sequences.or(file.sequences).unwrap_or(10),
            min_len: self.min_len.or(file.min_len).unwrap_or(60),
            max_len: self.max_len.or(file.max_len).unwrap_or(120),
            mean_action_len: self
                .mean_action_len
                .or(file.mean_action_len)
                .unwrap_or(10.0),
            noise_sigma: self.noise_sigma.or(file.noise_sigma).unwrap_or(0.25),
            transitions,
        })
    }
}
