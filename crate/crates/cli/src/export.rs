//! Running a trained model over whole sequences and moving predictions
//! through files.
//!
//! The export format is line-oriented text so external plotting needs no
//! special reader, and floating-point values are printed with Rust's
//! shortest round-trip formatting: reading an exported prediction back
//! recovers bit-identical scores, so file-based evaluation matches
//! in-process evaluation exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use hanet_core::data::{window_sequence, FeatureSequence, LabelTrack};
use hanet_core::layers::AttentionWeights;
use hanet_core::model::{ModelConfig, ModelParams};
use hanet_core::Tape;

use crate::error::CliError;

/// Attention weights from one window's forward pass, kept for export.
pub struct WindowAttention {
    /// Per-segment frame attention (`None` when the variant has none).
    pub frames: Option<Vec<AttentionWeights<f32>>>,
    /// Segment attention (`None` outside the full variant).
    pub segments: Option<AttentionWeights<f32>>,
}

/// Everything `predict` knows about one sequence after inference: the
/// ground truth restricted to real frames, the model's label track, and the
/// probability the model gave each predicted label.
pub struct SequencePrediction {
    pub id: String,
    pub gt: Vec<usize>,
    pub pred: Vec<usize>,
    pub scores: Vec<f32>,
    pub attention: Vec<WindowAttention>,
}

/// Runs the model over all of a sequence's windows and concatenates the
/// mask-true frames back into one track.
pub fn predict_sequence(
    params: &ModelParams<f32>,
    seq: &FeatureSequence,
    track: &LabelTrack,
    cfg: &ModelConfig,
) -> Result<SequencePrediction, CliError> {
    let mut tape = Tape::inert();
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    let mut scores = Vec::new();
    let mut attention = Vec::new();
    for window in window_sequence(seq, track, cfg)? {
        let out = params.forward(&mut tape, &window)?;
        let labels = out.predicted_labels();
        for (row, (&real, &truth)) in window.mask.iter().zip(&window.labels).enumerate() {
            if real {
                gt.push(truth);
                pred.push(labels[row]);
                scores.push(out.prob_of(row, labels[row]));
            }
        }
        attention.push(WindowAttention {
            frames: out.frame_alphas,
            segments: out.segment_alphas,
        });
    }
    Ok(SequencePrediction {
        id: seq.source_id.clone(),
        gt,
        pred,
        scores,
        attention,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents)
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

/// Writes one sequence's prediction files into `dir`:
///
/// - `<id>.pred.txt` — predicted label per real frame, one per line
/// - `<id>.scores.txt` — probability of that label, one per line
/// - `<id>.track.csv` — `frame,gt,pred` rows for external plotting
/// - with `attention`: `<id>.frame_attn.csv` (`window,segment,frame,weight`)
///   and `<id>.segment_attn.csv` (`window,segment,weight`), when the
///   variant produces those weights
pub fn write_prediction(
    dir: &Path,
    sp: &SequencePrediction,
    attention: bool,
) -> Result<usize, CliError> {
    let mut written = 0;

    let mut labels = String::new();
    for p in &sp.pred {
        writeln!(labels, "{p}").expect("string write");
    }
    write_file(&dir.join(format!("{}.pred.txt", sp.id)), &labels)?;
    written += 1;

    let mut probs = String::new();
    for s in &sp.scores {
        writeln!(probs, "{s}").expect("string write");
    }
    write_file(&dir.join(format!("{}.scores.txt", sp.id)), &probs)?;
    written += 1;

    let mut track = String::from("frame,gt,pred\n");
    for (i, (g, p)) in sp.gt.iter().zip(&sp.pred).enumerate() {
        writeln!(track, "{i},{g},{p}").expect("string write");
    }
    write_file(&dir.join(format!("{}.track.csv", sp.id)), &track)?;
    written += 1;

    if attention {
        let mut frame_rows = String::from("window,segment,frame,weight\n");
        let mut have_frames = false;
        let mut segment_rows = String::from("window,segment,weight\n");
        let mut have_segments = false;
        for (w, wa) in sp.attention.iter().enumerate() {
            if let Some(frames) = &wa.frames {
                have_frames = true;
                for (seg, alpha) in frames.iter().enumerate() {
                    for (fr, weight) in alpha.alpha.data().iter().enumerate() {
                        writeln!(frame_rows, "{w},{seg},{fr},{weight}").expect("string write");
                    }
                }
            }
            if let Some(alpha) = &wa.segments {
                have_segments = true;
                for (seg, weight) in alpha.alpha.data().iter().enumerate() {
                    writeln!(segment_rows, "{w},{seg},{weight}").expect("string write");
                }
            }
        }
        if have_frames {
            write_file(&dir.join(format!("{}.frame_attn.csv", sp.id)), &frame_rows)?;
            written += 1;
        }
        if have_segments {
            write_file(
                &dir.join(format!("{}.segment_attn.csv", sp.id)),
                &segment_rows,
            )?;
            written += 1;
        }
    }
    Ok(written)
}

/// Reads a prediction exported by [`write_prediction`] back for evaluation.
/// Returns the label track and, when a scores file is present, the per-frame
/// scores (bit-identical to the values the exporting process held).
pub fn read_prediction(dir: &Path, id: &str) -> Result<(Vec<usize>, Option<Vec<f64>>), CliError> {
    let pred_path = dir.join(format!("{id}.pred.txt"));
    let text = fs::read_to_string(&pred_path)
        .map_err(|e| CliError::invalid(format!("{}: {e}", pred_path.display())))?;
    let mut pred = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let label: usize = line.trim().parse().map_err(|_| {
            CliError::invalid(format!(
                "{}:{}: expected one integer label, got {line:?}",
                pred_path.display(),
                idx + 1
            ))
        })?;
        pred.push(label);
    }

    let scores_path = dir.join(format!("{id}.scores.txt"));
    let scores = match fs::read_to_string(&scores_path) {
        Err(_) => None,
        Ok(text) => {
            let mut scores = Vec::new();
            for (idx, line) in text.lines().enumerate() {
                let s: f32 = line.trim().parse().map_err(|_| {
                    CliError::invalid(format!(
                        "{}:{}: expected a probability, got {line:?}",
                        scores_path.display(),
                        idx + 1
                    ))
                })?;
                scores.push(f64::from(s));
            }
            Some(scores)
        }
    };
    Ok((pred, scores))
}
