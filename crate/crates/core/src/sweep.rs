//! Hyperparameter sweeps over the model's capacity axes on synthetic data.
//!
//! One axis varies at a time (embedding size L, frames per segment T,
//! segments per window N) while the other two stay at the base config's
//! values — the shape of a capacity study, one trained model per setting.
//! Results come back as structured rows plus a CSV rendering for external
//! plotting.

use std::time::Instant;

use serde::Serialize;

use crate::data::{synth_generate, window_sequence, DataError, SequenceWindow, SynthSpec};
use crate::model::{ModelConfig, ModelParams};
use crate::train::{train, TrainConfig, TrainError};

/// What to sweep and on which task.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    /// Fixed fields (feat_dim, classes, variant, decoder seed) and the
    /// default value for every axis not currently being swept.
    pub base: ModelConfig,
    /// Values tried on the embedding-size axis.
    pub embed_dims: Vec<usize>,
    /// Values tried on the frames-per-segment axis.
    pub frame_counts: Vec<usize>,
    /// Values tried on the segments-per-window axis.
    pub segment_counts: Vec<usize>,
    /// Synthetic task the models train on; its feat_dim/classes must match
    /// the base config.
    pub synth: SynthSpec,
    pub train: TrainConfig,
    /// How many generated sequences are held out for validation (from the
    /// end of the generated list); must leave at least one for training.
    pub val_sequences: usize,
}

/// One trained setting.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    /// Which axis this row belongs to: `embed_dim`, `segment_frames`, or
    /// `segments`.
    pub axis: &'static str,
    pub embed_dim: usize,
    pub segment_frames: usize,
    pub segments: usize,
    pub window_frames: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Final-epoch mean training loss.
    pub train_loss: f64,
    /// Validation scores at the best epoch.
    pub val_accuracy: f64,
    pub val_f1_50: f64,
    pub wall_ms: u64,
}

/// Errors from the sweep driver.
#[derive(Debug, thiserror::Error)]
pub enum SweepError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("invalid sweep spec: {field}")]
    InvalidSpec { field: &'static str },
}

/// Runs every setting and returns one row per trained model, axes in the
/// order embed_dim, segment_frames, segments, each axis in the given value
/// order. Fully deterministic for a fixed spec and seed.
pub fn sweep(spec: &SweepSpec, seed: u64) -> Result<Vec<SweepRow>, SweepError> {
    if spec.base.feat_dim != spec.synth.feat_dim || spec.base.classes != spec.synth.classes {
        return Err(SweepError::InvalidSpec { field: "base config vs synth task shape" });
    }
    if spec.val_sequences == 0 || spec.val_sequences >= spec.synth.num_sequences {
        return Err(SweepError::InvalidSpec { field: "val_sequences" });
    }
    if spec.embed_dims.is_empty() && spec.frame_counts.is_empty() && spec.segment_counts.is_empty()
    {
        return Err(SweepError::InvalidSpec { field: "no axis values" });
    }

    let data = synth_generate(&spec.synth, seed)?;
    let split = data.len() - spec.val_sequences;
    let (train_seqs, val_seqs) = data.split_at(split);

    let mut rows = Vec::new();
    let axes: [(&'static str, &[usize]); 3] = [
        ("embed_dim", &spec.embed_dims),
        ("segment_frames", &spec.frame_counts),
        ("segments", &spec.segment_counts),
    ];
    for (axis, values) in axes {
        for &value in values {
            let mut cfg = spec.base;
            match axis {
                "embed_dim" => cfg.embed_dim = value,
                "segment_frames" => cfg.segment_frames = value,
                _ => cfg.segments = value,
            }
            cfg.validate()?;
            let started = Instant::now();

            let window_all = |seqs: &[(
                crate::data::FeatureSequence,
                crate::data::LabelTrack,
            )]|
             -> Result<Vec<SequenceWindow<f32>>, DataError> {
                let mut out = Vec::new();
                for (seq, track) in seqs {
                    out.extend(window_sequence(seq, track, &cfg)?);
                }
                Ok(out)
            };
            let train_windows = window_all(train_seqs)?;
            let val_windows = window_all(val_seqs)?;

            let params = ModelParams::<f32>::init(cfg, seed)?;
            let outcome = train(params, &train_windows, &val_windows, &spec.train)?;
            let best = &outcome.log[outcome.best_epoch - 1];
            rows.push(SweepRow {
                axis,
                embed_dim: cfg.embed_dim,
                segment_frames: cfg.segment_frames,
                segments: cfg.segments,
                window_frames: cfg.window_len(),
                epochs_run: outcome.log.len(),
                best_epoch: outcome.best_epoch,
                train_loss: outcome.log.last().expect("at least one epoch").train_loss,
                val_accuracy: best.val_accuracy.expect("validation set is non-empty"),
                val_f1_50: best.val_f1_50.expect("validation set is non-empty"),
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }
    }
    Ok(rows)
}

/// CSV rendering: header plus one line per row, floats in shortest
/// round-trip form.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "axis,embed_dim,segment_frames,segments,window_frames,epochs_run,best_epoch,train_loss,val_accuracy,val_f1_50,wall_ms\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.axis,
            r.embed_dim,
            r.segment_frames,
            r.segments,
            r.window_frames,
            r.epochs_run,
            r.best_epoch,
            r.train_loss,
            r.val_accuracy,
            r.val_f1_50,
            r.wall_ms
        ));
    }
    out
}
