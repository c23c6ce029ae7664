//! Sequence ingestion and generation: binary feature files, text label
//! tracks, manifest-driven dataset loading, fixed-size windowing with
//! padding masks, and the synthetic generator used for desk-scale training
//! and verification.
//!
//! File formats:
//!
//! - Feature file: magic `HAFT1`, then two u64 little-endian integers `F`
//!   (frames) and `D` (feature dim), then `F·D` f32 little-endian scalars
//!   row-major.
//! - Label file: plain text, one decimal class id per line (blank lines
//!   ignored).
//! - Manifest: plain text, one `features_path<TAB>labels_path` pair per
//!   line; relative paths resolve against the manifest's directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal};
use thiserror::Error;

use crate::model::ModelConfig;
use crate::tensor::{Scalar, Tensor};

pub const FEATURE_MAGIC: &[u8; 5] = b"HAFT1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic (expected {expected:?})")]
    BadMagic { path: PathBuf, expected: String },
    #[error("{path}: truncated payload, expected {expected} bytes after header, got {got}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        got: usize,
    },
    #[error("{path}:{line}: label {value} out of range for {classes} classes")]
    LabelRange {
        path: PathBuf,
        line: usize,
        value: i64,
        classes: usize,
    },
    #[error("{path}:{line}: expected one integer label, got {text:?}")]
    LabelParse {
        path: PathBuf,
        line: usize,
        text: String,
    },
    #[error("{source_id}: feature frames {features} do not match label count {labels}")]
    LengthMismatch {
        source_id: String,
        features: usize,
        labels: usize,
    },
    #[error("{path}:{line}: manifest line must be features_path<TAB>labels_path")]
    Manifest { path: PathBuf, line: usize },
    #[error("invalid synthesis spec: {reason}")]
    InvalidSpec { reason: String },
    #[error("{path}: feature file declares {frames}x{dim} frames")]
    EmptyFeatures {
        path: PathBuf,
        frames: usize,
        dim: usize,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Per-frame feature matrix for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    /// `[F × D_feat]`.
    pub frames: Tensor<f32>,
    pub source_id: String,
}

impl FeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.dims2().expect("frames is a matrix").0
    }

    pub fn feat_dim(&self) -> usize {
        self.frames.dims2().expect("frames is a matrix").1
    }
}

/// Ground-truth labels with a validity mask (false = padded frame).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTrack {
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
}

impl LabelTrack {
    /// All-real track over the given labels.
    pub fn real(labels: Vec<usize>) -> Self {
        let mask = vec![true; labels.len()];
        Self { labels, mask }
    }
}

/// One `N·T`-frame model input. Padded tail frames carry zero features, the
/// sentinel label `C` (one past the last class), and `mask = false`; they
/// are excluded from losses and metrics.
#[derive(Clone, Debug)]
pub struct SequenceWindow<F> {
    /// `[N·T × D_feat]`.
    pub feats: Tensor<F>,
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
    /// (source sequence id, first frame index within it).
    pub origin: (String, usize),
}

impl<F: Scalar> SequenceWindow<F> {
    /// Number of real (mask-true) frames.
    pub fn real_frames(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn cast<G: Scalar>(&self) -> SequenceWindow<G> {
        SequenceWindow {
            feats: self.feats.cast(),
            labels: self.labels.clone(),
            mask: self.mask.clone(),
            origin: self.origin.clone(),
        }
    }
}

/// Writes a feature sequence in the binary format above.
pub fn save_features(path: &Path, seq: &FeatureSequence) -> Result<(), DataError> {
    let (frames, dim) = seq.frames.dims2().expect("frames is a matrix");
    let mut buf = Vec::with_capacity(5 + 16 + seq.frames.numel() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(frames as u64).to_le_bytes());
    buf.extend_from_slice(&(dim as u64).to_le_bytes());
    for v in seq.frames.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&buf).map_err(|e| io_err(path, e))
}

/// Reads a feature sequence; the source id is the file stem.
pub fn load_features(path: &Path) -> Result<FeatureSequence, DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 21 || &bytes[..5] != FEATURE_MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected: String::from_utf8_lossy(FEATURE_MAGIC).into_owned(),
        });
    }
    let frames = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
    let dim = u64::from_le_bytes(bytes[13..21].try_into().expect("8 bytes")) as usize;
    if frames == 0 || dim == 0 {
        return Err(DataError::EmptyFeatures {
            path: path.to_path_buf(),
            frames,
            dim,
        });
    }
    let expected = frames
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| DataError::BadMagic {
            path: path.to_path_buf(),
            expected: String::from_utf8_lossy(FEATURE_MAGIC).into_owned(),
        })?;
    let payload = &bytes[21..];
    if payload.len() != expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected,
            got: payload.len(),
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    Ok(FeatureSequence {
        frames: Tensor::matrix(frames, dim, data).expect("dims validated"),
        source_id,
    })
}

/// Writes one label per line.
pub fn save_labels(path: &Path, labels: &[usize]) -> Result<(), DataError> {
    let mut text = String::with_capacity(labels.len() * 3);
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Reads a label track (all frames real); every label must lie in `[0, classes)`.
pub fn load_labels(path: &Path, classes: usize) -> Result<LabelTrack, DataError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut labels = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let value: i64 = line.parse().map_err(|_| DataError::LabelParse {
            path: path.to_path_buf(),
            line: idx + 1,
            text: line.to_string(),
        })?;
        if value < 0 || value as usize >= classes {
            return Err(DataError::LabelRange {
                path: path.to_path_buf(),
                line: idx + 1,
                value,
                classes,
            });
        }
        labels.push(value as usize);
    }
    Ok(LabelTrack::real(labels))
}

/// Parses a manifest into (features path, labels path) pairs, resolving
/// relative paths against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &str| -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut pairs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        match (fields.next(), fields.next(), fields.next()) {
            (Some(f), Some(l), None) if !f.is_empty() && !l.is_empty() => {
                pairs.push((resolve(f), resolve(l)));
            }
            _ => {
                return Err(DataError::Manifest {
                    path: path.to_path_buf(),
                    line: idx + 1,
                });
            }
        }
    }
    Ok(pairs)
}

/// Loads every (features, labels) pair a manifest names.
pub fn load_pairs(
    manifest: &Path,
    classes: usize,
) -> Result<Vec<(FeatureSequence, LabelTrack)>, DataError> {
    load_manifest(manifest)?
        .iter()
        .map(|(fp, lp)| {
            let seq = load_features(fp)?;
            let track = load_labels(lp, classes)?;
            Ok((seq, track))
        })
        .collect()
}

/// Splits one sequence into consecutive non-overlapping `N·T`-frame windows,
/// zero-padding the final partial window. Produces `ceil(F / (N·T))`
/// windows; concatenating their mask-true frames reconstructs the input.
pub fn window_sequence(
    seq: &FeatureSequence,
    track: &LabelTrack,
    cfg: &ModelConfig,
) -> Result<Vec<SequenceWindow<f32>>, DataError> {
    let frames = seq.num_frames();
    let dim = seq.feat_dim();
    if frames != track.labels.len() || track.labels.len() != track.mask.len() {
        return Err(DataError::LengthMismatch {
            source_id: seq.source_id.clone(),
            features: frames,
            labels: track.labels.len(),
        });
    }
    let len = cfg.window_len();
    let sentinel = cfg.classes;
    let count = frames.div_ceil(len);
    let mut windows = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * len;
        let real = (frames - start).min(len);
        let mut feats = vec![0.0f32; len * dim];
        feats[..real * dim]
            .copy_from_slice(&seq.frames.data()[start * dim..(start + real) * dim]);
        let mut labels = Vec::with_capacity(len);
        let mut mask = Vec::with_capacity(len);
        for t in 0..len {
            if t < real {
                labels.push(track.labels[start + t]);
                mask.push(track.mask[start + t]);
            } else {
                labels.push(sentinel);
                mask.push(false);
            }
        }
        windows.push(SequenceWindow {
            feats: Tensor::matrix(len, dim, feats).expect("window dims positive"),
            labels,
            mask,
            origin: (seq.source_id.clone(), start),
        });
    }
    Ok(windows)
}

/// How the synthetic generator picks the next action class.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum TransitionModel {
    /// Uniform over classes, excluding an immediate repeat.
    #[default]
    UniformNoRepeat,
    /// The class `(prev2 + prev1) mod C` follows with probability `bias`
    /// (uniform over the other non-repeat classes otherwise), so predicting
    /// transitions requires remembering the previous *two* actions —
    /// long-range structure a frame-local model cannot exploit.
    SecondOrder { bias: f64 },
}

/// Parameters of the synthetic action-sequence generator.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub classes: usize,
    pub feat_dim: usize,
    pub num_sequences: usize,
    /// Sequence length bounds in frames.
    pub min_len: usize,
    pub max_len: usize,
    /// Mean of the geometric action-duration distribution.
    pub mean_action_len: f64,
    /// Standard deviation of the i.i.d. Gaussian feature noise.
    pub noise_sigma: f64,
    pub transitions: TransitionModel,
}

impl SynthSpec {
    fn validate(&self) -> Result<(), DataError> {
        let fail = |reason: String| Err(DataError::InvalidSpec { reason });
        if self.classes < 2 {
            return fail(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.feat_dim < self.classes {
            return fail(format!(
                "feat_dim {} must be >= classes {} for orthogonal class means",
                self.feat_dim, self.classes
            ));
        }
        if self.num_sequences == 0 {
            return fail("num_sequences must be positive".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail(format!(
                "need 1 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            ));
        }
        if !(self.mean_action_len >= 1.0) {
            return fail(format!(
                "mean_action_len must be >= 1, got {}",
                self.mean_action_len
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return fail(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if let TransitionModel::SecondOrder { bias } = self.transitions {
            if !(0.0..=1.0).contains(&bias) {
                return fail(format!("transition bias must be in [0,1], got {bias}"));
            }
        }
        Ok(())
    }
}

/// Fixed per-class mean feature vectors: class `c` owns the coordinate block
/// `[c·B, (c+1)·B)` with `B = floor(feat_dim / classes)`, filled with
/// `1/sqrt(B)`. The means are mutually orthogonal with unit norm, so the
/// noiseless task is separable by construction.
pub fn synth_class_means(classes: usize, feat_dim: usize) -> Vec<Vec<f32>> {
    let block = feat_dim / classes;
    let value = 1.0 / (block as f32).sqrt();
    (0..classes)
        .map(|c| {
            let mut mean = vec![0.0f32; feat_dim];
            mean[c * block..(c + 1) * block].fill(value);
            mean
        })
        .collect()
}

/// Generates labeled synthetic sequences: a run-length chain of actions with
/// geometric durations, features = class mean + Gaussian noise.
/// Deterministic for a given spec and seed.
pub fn synth_generate(
    spec: &SynthSpec,
    seed: u64,
) -> Result<Vec<(FeatureSequence, LabelTrack)>, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = synth_class_means(spec.classes, spec.feat_dim);
    let duration = Geometric::new(1.0 / spec.mean_action_len)
        .expect("mean_action_len >= 1 gives a valid success probability");
    let noise = Normal::new(0.0f64, spec.noise_sigma)
        .map_err(|e| DataError::InvalidSpec {
            reason: format!("noise_sigma: {e}"),
        })?;
    let mut out = Vec::with_capacity(spec.num_sequences);
    for s in 0..spec.num_sequences {
        let target = rng.random_range(spec.min_len..=spec.max_len);
        let mut labels: Vec<usize> = Vec::with_capacity(target);
        let mut history: (Option<usize>, Option<usize>) = (None, None); // (prev2, prev1)
        while labels.len() < target {
            let class = next_class(spec, &mut rng, history);
            let d = (1 + duration.sample(&mut rng) as usize)
                .min(spec.max_len)
                .min(target - labels.len());
            labels.extend(std::iter::repeat_n(class, d));
            history = (history.1, Some(class));
        }
        let mut feats = Vec::with_capacity(target * spec.feat_dim);
        for &label in &labels {
            for d in 0..spec.feat_dim {
                let base = means[label][d];
                if spec.noise_sigma == 0.0 {
                    feats.push(base);
                } else {
                    feats.push(base + noise.sample(&mut rng) as f32);
                }
            }
        }
        out.push((
            FeatureSequence {
                frames: Tensor::matrix(target, spec.feat_dim, feats)
                    .expect("target >= 1 frames"),
                source_id: format!("synth-{s:04}"),
            },
            LabelTrack::real(labels),
        ));
    }
    Ok(out)
}

fn next_class<R: Rng>(
    spec: &SynthSpec,
    rng: &mut R,
    (prev2, prev1): (Option<usize>, Option<usize>),
) -> usize {
    let c = spec.classes;
    // Uniform over classes other than an immediate repeat.
    let uniform_no_repeat = |rng: &mut R| match prev1 {
        None => rng.random_range(0..c),
        Some(p) => {
            let pick = rng.random_range(0..c - 1);
            if pick >= p {
                pick + 1
            } else {
                pick
            }
        }
    };
    match spec.transitions {
        TransitionModel::UniformNoRepeat => uniform_no_repeat(rng),
        TransitionModel::SecondOrder { bias } => match (prev2, prev1) {
            (Some(a), Some(b)) => {
                let favored = (a + b) % c;
                if favored != b && rng.random_range(0.0..1.0) < bias {
                    favored
                } else {
                    // Uniform over the remaining classes (no immediate
                    // repeat, and excluding the favored class when it was
                    // an option).
                    let mut candidates: Vec<usize> = (0..c)
                        .filter(|&x| x != b && !(favored != b && x == favored))
                        .collect();
                    if candidates.is_empty() {
                        candidates.push(favored);
                    }
                    candidates[rng.random_range(0..candidates.len())]
                }
            }
            _ => uniform_no_repeat(rng),
        },
    }
}
