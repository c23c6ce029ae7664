//! Binary model checkpoints.
//!
//! A checkpoint is a single file holding the model configuration followed by
//! every parameter tensor, in the fixed block order used by
//! [`ModelParams::visit`](crate::model::ModelParams::visit):
//!
//! ```text
//! magic      6 bytes   b"HANET1"
//! config     7 × u64   embed_dim, segment_frames, segments, feat_dim,
//!                      classes, variant code, decoder-seed code
//! tensors    per tensor: u64 rank, u64 extent per axis, f32 data (row-major)
//! ```
//!
//! All integers and floats are little-endian. Values are stored at f32, and
//! a save → load round trip reproduces f32 parameters bit-exactly.

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{DecoderSeed, ModelConfig, ModelParams, Variant};
use crate::tensor::Tensor;

/// File signature for checkpoint files.
pub const CHECKPOINT_MAGIC: &[u8; 6] = b"HANET1";

/// Errors raised while reading or writing checkpoints.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: not a checkpoint file (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: truncated checkpoint: needed {expected} more bytes, found {got}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        got: usize,
    },
    #[error("{path}: invalid {field} value {value}")]
    BadField {
        path: PathBuf,
        field: &'static str,
        value: u64,
    },
    #[error("{path}: tensor {name} has shape {got:?}, expected {expected:?}")]
    TensorShape {
        path: PathBuf,
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{path}: trailing bytes after final tensor")]
    TrailingBytes { path: PathBuf },
}

fn variant_code(v: Variant) -> u64 {
    match v {
        Variant::Full => 0,
        Variant::MinusVE => 1,
        Variant::MinusVESE => 2,
    }
}

fn variant_from_code(code: u64) -> Option<Variant> {
    match code {
        0 => Some(Variant::Full),
        1 => Some(Variant::MinusVE),
        2 => Some(Variant::MinusVESE),
        _ => None,
    }
}

fn seed_code(s: DecoderSeed) -> u64 {
    match s {
        DecoderSeed::PerSegment => 0,
        DecoderSeed::LastSegment => 1,
    }
}

fn seed_from_code(code: u64) -> Option<DecoderSeed> {
    match code {
        0 => Some(DecoderSeed::PerSegment),
        1 => Some(DecoderSeed::LastSegment),
        _ => None,
    }
}

/// Writes `params` to `path`, creating or replacing the file.
pub fn save_checkpoint(path: &Path, params: &ModelParams<f32>) -> Result<(), CheckpointError> {
    let cfg = params.cfg;
    let mut buf = Vec::with_capacity(64 + params.param_count() * 4);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    for field in [
        cfg.embed_dim as u64,
        cfg.segment_frames as u64,
        cfg.segments as u64,
        cfg.feat_dim as u64,
        cfg.classes as u64,
        variant_code(cfg.variant),
        seed_code(cfg.decoder_seed),
    ] {
        buf.extend_from_slice(&field.to_le_bytes());
    }
    params.visit(|_, t| {
        buf.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &extent in t.shape() {
            buf.extend_from_slice(&(extent as u64).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    });
    std::fs::write(path, &buf).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let rest = self.bytes.len() - self.pos;
        if rest < n {
            return Err(CheckpointError::Truncated {
                path: self.path.to_path_buf(),
                expected: n,
                got: rest,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize_field(&mut self, field: &'static str) -> Result<usize, CheckpointError> {
        let raw = self.u64()?;
        usize::try_from(raw).ok().filter(|&v| v > 0).ok_or(
            CheckpointError::BadField {
                path: self.path.to_path_buf(),
                field,
                value: raw,
            },
        )
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

/// Reads a checkpoint previously written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if cur.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let embed_dim = cur.usize_field("embed_dim")?;
    let segment_frames = cur.usize_field("segment_frames")?;
    let segments = cur.usize_field("segments")?;
    let feat_dim = cur.usize_field("feat_dim")?;
    let classes = cur.usize_field("classes")?;
    let variant_raw = cur.u64()?;
    let variant = variant_from_code(variant_raw).ok_or(CheckpointError::BadField {
        path: path.to_path_buf(),
        field: "variant",
        value: variant_raw,
    })?;
    let seed_raw = cur.u64()?;
    let decoder_seed = seed_from_code(seed_raw).ok_or(CheckpointError::BadField {
        path: path.to_path_buf(),
        field: "decoder_seed",
        value: seed_raw,
    })?;
    let mut cfg = ModelConfig::new(embed_dim, segment_frames, segments, feat_dim, classes, variant);
    cfg.decoder_seed = decoder_seed;

    // Build a parameter set with the right block layout, then overwrite every
    // tensor with the stored values.
    let mut params = ModelParams::<f32>::init(cfg, 0).map_err(|_| CheckpointError::BadField {
        path: path.to_path_buf(),
        field: "config",
        value: 0,
    })?;
    let mut failure = None;
    params.visit_mut(|name, t| {
        if failure.is_some() {
            return;
        }
        match read_tensor(&mut cur, &name, t.shape()) {
            Ok(loaded) => *t = loaded,
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if cur.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes {
            path: path.to_path_buf(),
        });
    }
    Ok(params)
}

fn read_tensor(
    cur: &mut Cursor<'_>,
    name: &str,
    expected: &[usize],
) -> Result<Tensor<f32>, CheckpointError> {
    let rank = cur.u64()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(cur.u64()? as usize);
    }
    if shape.as_slice() != expected {
        return Err(CheckpointError::TensorShape {
            path: cur.path.to_path_buf(),
            name: name.to_string(),
            expected: expected.to_vec(),
            got: shape,
        });
    }
    let numel: usize = shape.iter().product();
    let data = cur.f32s(numel)?;
    Ok(Tensor::new(&shape, data).expect("validated shape"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use tempfile::tempdir;

    fn params_equal(a: &ModelParams<f32>, b: &ModelParams<f32>) -> bool {
        let mut lhs = Vec::new();
        a.visit(|n, t| lhs.push((n, t.clone())));
        let mut same = true;
        b.visit(|n, t| {
            let (ln, lt) = lhs.remove(0);
            same &= ln == n && lt == *t;
        });
        same && lhs.is_empty()
    }

    #[test]
    fn round_trip_is_bit_exact_for_every_variant() {
        let dir = tempdir().unwrap();
        for (i, variant) in [Variant::Full, Variant::MinusVE, Variant::MinusVESE]
            .into_iter()
            .enumerate()
        {
            let cfg = ModelConfig::new(4, 3, 2, 6, 3, variant);
            let params = ModelParams::<f32>::init(cfg, 17 + i as u64).unwrap();
            let path = dir.path().join(format!("m{i}.ckpt"));
            save_checkpoint(&path, &params).unwrap();
            let loaded = load_checkpoint(&path).unwrap();
            assert_eq!(loaded.cfg, cfg);
            assert!(params_equal(&params, &loaded));
        }
    }

    #[test]
    fn loaded_model_produces_identical_outputs() {
        let dir = tempdir().unwrap();
        let cfg = ModelConfig::new(3, 2, 2, 4, 3, Variant::Full);
        let params = ModelParams::<f32>::init(cfg, 40).unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &params).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let rows = cfg.window_len();
        let feats: Vec<f32> = (0..rows * cfg.feat_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let window = crate::data::SequenceWindow {
            feats: Tensor::matrix(rows, cfg.feat_dim, feats).unwrap(),
            labels: vec![0; rows],
            mask: vec![true; rows],
            origin: ("ckpt".into(), 0),
        };
        let mut tape = Tape::inert();
        let a = params.forward(&mut tape, &window).unwrap();
        let b = loaded.forward(&mut tape, &window).unwrap();
        assert_eq!(a.probs, b.probs);
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTCKPT___________").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic { .. })
        ));
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let dir = tempdir().unwrap();
        let cfg = ModelConfig::new(2, 2, 2, 3, 2, Variant::MinusVESE);
        let params = ModelParams::<f32>::init(cfg, 1).unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &params).unwrap();

        let full = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &full[..full.len() - 3]).unwrap();
        assert!(matches!(
            load_checkpoint(&cut),
            Err(CheckpointError::Truncated { .. })
        ));

        let mut padded = full.clone();
        padded.push(0);
        let fat = dir.path().join("fat.ckpt");
        std::fs::write(&fat, &padded).unwrap();
        assert!(matches!(
            load_checkpoint(&fat),
            Err(CheckpointError::TrailingBytes { .. })
        ));
    }

    #[test]
    fn rejects_unknown_variant_code() {
        let dir = tempdir().unwrap();
        let cfg = ModelConfig::new(2, 2, 2, 3, 2, Variant::Full);
        let params = ModelParams::<f32>::init(cfg, 1).unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // variant code is the 6th u64 after the 6-byte magic
        let off = 6 + 5 * 8;
        bytes[off..off + 8].copy_from_slice(&9u64.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadField { field: "variant", value: 9, .. })
        ));
    }
}
