//! The hierarchical attention encoder-decoder assembled from the layer
//! blocks, with the two ablation variants that drop the video embedding and
//! the frame-level attention.
//!
//! A forward pass consumes one window of `N` segments × `T` frames:
//!
//! 1. reduce raw `D_feat` features to `L` dims per frame,
//! 2. encode each segment's frames with a shared LSTM (state reset at
//!    segment boundaries) and attention-pool them to a segment embedding
//!    `s_i`,
//! 3. encode `s_1..s_N` with a segment-level LSTM and attention-pool to the
//!    video embedding `v`,
//! 4. decode: a segment-level LSTM seeded with `v` re-expands the `s_i`,
//!    then a frame-level LSTM seeded per segment emits one hidden state per
//!    frame, classified into per-frame class distributions.
//!
//! Padded frames only ever trail the real frames of a window, so every
//! encoder consumes exactly the real (mask-true) prefix; class distributions
//! for padded rows are still produced (the output is always `N·T × C`) but
//! carry no information used by losses or metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::SequenceWindow;
use crate::layers::{
    attention_pool, dense, lstm_sequence, AttentionParams, AttentionWeights, DenseParams,
    LstmParams, LstmState,
};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor, TensorError};

/// Which sub-blocks of the hierarchy are active.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Variant {
    /// Both hierarchy levels: frame attention and the video embedding.
    Full,
    /// Video embedding removed: no segment-level encoder, attention, or
    /// decoder. Frame attention still produces the segment embeddings that
    /// seed each segment's frame decoder.
    MinusVE,
    /// Additionally drops frame attention: a plain LSTM encoder-decoder
    /// where a segment's embedding is its last encoder hidden state.
    MinusVESE,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::MinusVE => "minus-ve",
            Variant::MinusVESE => "minus-ve-se",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Variant::Full),
            "minus-ve" => Ok(Variant::MinusVE),
            "minus-ve-se" => Ok(Variant::MinusVESE),
            other => Err(format!(
                "unknown variant '{other}' (expected full, minus-ve, or minus-ve-se)"
            )),
        }
    }
}

/// How frame decoders are seeded from the segment level.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub enum DecoderSeed {
    /// Segment i's frame decoder starts from segment i's decoder state
    /// (hierarchical reading).
    #[default]
    PerSegment,
    /// Every frame decoder starts from the last segment's decoder state
    /// (literal reading).
    LastSegment,
}

impl DecoderSeed {
    pub fn as_str(self) -> &'static str {
        match self {
            DecoderSeed::PerSegment => "per-segment",
            DecoderSeed::LastSegment => "last-segment",
        }
    }
}

impl std::str::FromStr for DecoderSeed {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per-segment" => Ok(DecoderSeed::PerSegment),
            "last-segment" => Ok(DecoderSeed::LastSegment),
            other => Err(format!(
                "unknown decoder seed '{other}' (expected per-segment or last-segment)"
            )),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ModelConfig {
    /// Embedding / hidden size L.
    pub embed_dim: usize,
    /// Frames per segment T.
    pub segment_frames: usize,
    /// Segments per window N.
    pub segments: usize,
    /// Raw feature size before reduction.
    pub feat_dim: usize,
    /// Class count C.
    pub classes: usize,
    pub variant: Variant,
    pub decoder_seed: DecoderSeed,
}

impl ModelConfig {
    pub fn new(
        embed_dim: usize,
        segment_frames: usize,
        segments: usize,
        feat_dim: usize,
        classes: usize,
        variant: Variant,
    ) -> Self {
        Self {
            embed_dim,
            segment_frames,
            segments,
            feat_dim,
            classes,
            variant,
            decoder_seed: DecoderSeed::default(),
        }
    }

    /// Frames per window, `N·T`.
    pub fn window_len(&self) -> usize {
        self.segments * self.segment_frames
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("segment_frames", self.segment_frames),
            ("segments", self.segments),
            ("feat_dim", self.feat_dim),
            ("classes", self.classes),
        ] {
            if v == 0 {
                return Err(ModelError::InvalidConfig { field: name });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model config field {field} must be positive")]
    InvalidConfig { field: &'static str },
    #[error("{op} requires the {block} block, which variant {variant:?} does not have")]
    MissingBlock {
        op: &'static str,
        block: &'static str,
        variant: Variant,
    },
    #[error("{what}: expected {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("window contains no real (mask-true) frames")]
    EmptyWindow,
    #[error("segment {segment}: mask must be a true-prefix within each segment")]
    NonPrefixMask { segment: usize },
}

/// All trainable parameters. Which optional blocks are present is dictated
/// by `cfg.variant`; see [`Variant`].
#[derive(Clone, Debug)]
pub struct ModelParams<F> {
    pub cfg: ModelConfig,
    /// Feature reducer, `D_feat → L`.
    pub reduce: DenseParams<F>,
    /// Frame-level encoder LSTM, shared across segments.
    pub enc_frame: LstmParams<F>,
    /// Frame-level attention (absent in MinusVESE).
    pub attn_frame: Option<AttentionParams<F>>,
    /// Segment-level encoder LSTM (Full only).
    pub enc_segment: Option<LstmParams<F>>,
    /// Segment-level attention producing the video embedding (Full only).
    pub attn_segment: Option<AttentionParams<F>>,
    /// Segment-level decoder LSTM (Full only).
    pub dec_segment: Option<LstmParams<F>>,
    /// Frame-level decoder LSTM.
    pub dec_frame: LstmParams<F>,
    /// Per-frame classifier, `L → C` (softmaxed).
    pub classifier: DenseParams<F>,
}

/// Everything one forward pass produces for a window.
#[derive(Debug)]
pub struct WindowOutput<F> {
    /// `[N·T × C]` per-frame class distributions; every row sums to 1.
    pub probs: Tensor<F>,
    /// Per-segment frame attention weights over that segment's real frames
    /// (length T when nothing is padded). One entry per segment holding at
    /// least one real frame. `None` when the variant has no frame attention.
    pub frame_alphas: Option<Vec<AttentionWeights<F>>>,
    /// Attention over segment encodings (length = real segments).
    /// `None` outside the Full variant.
    pub segment_alphas: Option<AttentionWeights<F>>,
    /// The pooled video embedding `v`. `None` outside the Full variant.
    pub video_embedding: Option<Tensor<F>>,
}

impl<F: Scalar> WindowOutput<F> {
    /// Per-frame argmax labels; ties break to the lowest class index.
    pub fn predicted_labels(&self) -> Vec<usize> {
        let (rows, cols) = self.probs.dims2().expect("probs is a matrix");
        (0..rows)
            .map(|r| {
                let row = self.probs.row_slice(r);
                let mut best = 0usize;
                for c in 1..cols {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    /// Probability the model assigned to `class` at frame `row`.
    pub fn prob_of(&self, row: usize, class: usize) -> F {
        self.probs.row_slice(row)[class]
    }
}

/// Result of frame-level encoding: one embedding per segment that holds at
/// least one real frame, plus that segment's attention weights when the
/// variant pools with attention.
pub struct FrameEncoding<F> {
    pub segments: Vec<Tensor<F>>,
    pub alphas: Option<Vec<AttentionWeights<F>>>,
}

/// Number of leading mask-true frames in each segment. Real frames must
/// form a prefix of their segment (padding only ever trails), which the
/// windower guarantees; anything else is rejected.
fn real_prefixes(mask: &[bool], t: usize, n: usize) -> Result<Vec<usize>, ModelError> {
    let mut counts = Vec::with_capacity(n);
    for i in 0..n {
        let seg = &mask[i * t..(i + 1) * t];
        let k = seg.iter().take_while(|&&m| m).count();
        if seg[k..].iter().any(|&m| m) {
            return Err(ModelError::NonPrefixMask { segment: i });
        }
        counts.push(k);
    }
    Ok(counts)
}

impl<F: Scalar> ModelParams<F> {
    /// Deterministic initialization: one seeded stream drawn in fixed block
    /// order (reduce, enc_frame, attn_frame, enc_segment, attn_segment,
    /// dec_segment, dec_frame, classifier), skipping blocks the variant
    /// lacks.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let l = cfg.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reduce = DenseParams::init(l, cfg.feat_dim, &mut rng);
        let enc_frame = LstmParams::init(l, l, &mut rng);
        let attn_frame = (cfg.variant != Variant::MinusVESE)
            .then(|| AttentionParams::init(l, &mut rng));
        let (enc_segment, attn_segment, dec_segment) = if cfg.variant == Variant::Full {
            (
                Some(LstmParams::init(l, l, &mut rng)),
                Some(AttentionParams::init(l, &mut rng)),
                Some(LstmParams::init(l, l, &mut rng)),
            )
        } else {
            (None, None, None)
        };
        let dec_frame = LstmParams::init(l, l, &mut rng);
        let classifier = DenseParams::init(cfg.classes, l, &mut rng);
        Ok(Self {
            cfg,
            reduce,
            enc_frame,
            attn_frame,
            enc_segment,
            attn_segment,
            dec_segment,
            dec_frame,
            classifier,
        })
    }

    /// Visits every parameter tensor in the fixed block order used by
    /// initialization, checkpoints, and the optimizer.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, &'a Tensor<F>)) {
        f("reduce.w".into(), &self.reduce.w);
        f("reduce.b".into(), &self.reduce.b);
        visit_lstm("enc_frame", &self.enc_frame, &mut f);
        if let Some(a) = &self.attn_frame {
            visit_attn("attn_frame", a, &mut f);
        }
        if let Some(p) = &self.enc_segment {
            visit_lstm("enc_segment", p, &mut f);
        }
        if let Some(a) = &self.attn_segment {
            visit_attn("attn_segment", a, &mut f);
        }
        if let Some(p) = &self.dec_segment {
            visit_lstm("dec_segment", p, &mut f);
        }
        visit_lstm("dec_frame", &self.dec_frame, &mut f);
        f("classifier.w".into(), &self.classifier.w);
        f("classifier.b".into(), &self.classifier.b);
    }

    /// Mutable variant of [`visit`](Self::visit), same order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(String, &mut Tensor<F>)) {
        f("reduce.w".into(), &mut self.reduce.w);
        f("reduce.b".into(), &mut self.reduce.b);
        visit_lstm_mut("enc_frame", &mut self.enc_frame, &mut f);
        if let Some(a) = &mut self.attn_frame {
            visit_attn_mut("attn_frame", a, &mut f);
        }
        if let Some(p) = &mut self.enc_segment {
            visit_lstm_mut("enc_segment", p, &mut f);
        }
        if let Some(a) = &mut self.attn_segment {
            visit_attn_mut("attn_segment", a, &mut f);
        }
        if let Some(p) = &mut self.dec_segment {
            visit_lstm_mut("dec_segment", p, &mut f);
        }
        visit_lstm_mut("dec_frame", &mut self.dec_frame, &mut f);
        f("classifier.w".into(), &mut self.classifier.w);
        f("classifier.b".into(), &mut self.classifier.b);
    }

    /// Copy with every tensor registered as a differentiable leaf on `tape`.
    pub fn watched(&self, tape: &mut Tape<F>) -> Self {
        let mut out = self.clone();
        out.visit_mut(|_, t| *t = tape.watch(t));
        out
    }

    /// Copy converted to another precision (detached from any tape).
    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            cfg: self.cfg,
            reduce: DenseParams {
                w: self.reduce.w.cast(),
                b: self.reduce.b.cast(),
            },
            enc_frame: cast_lstm(&self.enc_frame),
            attn_frame: self.attn_frame.as_ref().map(cast_attn),
            enc_segment: self.enc_segment.as_ref().map(cast_lstm),
            attn_segment: self.attn_segment.as_ref().map(cast_attn),
            dec_segment: self.dec_segment.as_ref().map(cast_lstm),
            dec_frame: cast_lstm(&self.dec_frame),
            classifier: DenseParams {
                w: self.classifier.w.cast(),
                b: self.classifier.b.cast(),
            },
        }
    }

    /// Exact number of trainable scalars across present blocks.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit(|_, t| total += t.numel());
        total
    }

    /// Reduces raw feature rows to `L`-dim frame embeddings `e_t`.
    fn reduce_frames(
        &self,
        tape: &mut Tape<F>,
        feats: &Tensor<F>,
    ) -> Result<Vec<Tensor<F>>, ModelError> {
        let (rows, cols) = feats.dims2().ok_or(ModelError::DimMismatch {
            what: "feature rank",
            expected: 2,
            got: feats.rank(),
        })?;
        if rows != self.cfg.window_len() {
            return Err(ModelError::DimMismatch {
                what: "window rows",
                expected: self.cfg.window_len(),
                got: rows,
            });
        }
        if cols != self.cfg.feat_dim {
            return Err(ModelError::DimMismatch {
                what: "feature dim",
                expected: self.cfg.feat_dim,
                got: cols,
            });
        }
        (0..rows)
            .map(|r| {
                let x = Tensor::vector(feats.row_slice(r).to_vec());
                Ok(dense(tape, &self.reduce.w, &self.reduce.b, &x)?)
            })
            .collect()
    }

    /// Per segment: run the frame encoder over the segment's real frames
    /// from a zero state and pool the hidden states into the segment
    /// embedding `s_i` (attention pooling, or the last hidden state when the
    /// variant has no frame attention). Segments with no real frames are
    /// skipped.
    pub fn encode_frames(
        &self,
        tape: &mut Tape<F>,
        frame_embeds: &[Tensor<F>],
        mask: &[bool],
    ) -> Result<FrameEncoding<F>, ModelError> {
        let (t, n) = (self.cfg.segment_frames, self.cfg.segments);
        if frame_embeds.len() != n * t {
            return Err(ModelError::DimMismatch {
                what: "window rows",
                expected: n * t,
                got: frame_embeds.len(),
            });
        }
        if mask.len() != n * t {
            return Err(ModelError::DimMismatch {
                what: "mask length",
                expected: n * t,
                got: mask.len(),
            });
        }
        let prefixes = real_prefixes(mask, t, n)?;
        let mut segments = Vec::new();
        let mut alphas = self.attn_frame.as_ref().map(|_| Vec::new());
        for (i, &k) in prefixes.iter().enumerate() {
            if k == 0 {
                continue;
            }
            let xs = &frame_embeds[i * t..i * t + k];
            let states = lstm_sequence(tape, &self.enc_frame, xs, &LstmState::zeros(
                self.cfg.embed_dim,
            ))?;
            match &self.attn_frame {
                Some(attn) => {
                    let hs: Vec<Tensor<F>> = states.iter().map(|s| s.h.clone()).collect();
                    let (pooled, w) = attention_pool(tape, attn, &hs)?;
                    segments.push(pooled);
                    alphas.as_mut().expect("attention present").push(w);
                }
                None => segments.push(states.last().expect("k > 0").h.clone()),
            }
        }
        if segments.is_empty() {
            return Err(ModelError::EmptyWindow);
        }
        Ok(FrameEncoding { segments, alphas })
    }

    /// Segment-level encoding: LSTM over `s_1..s_N` from zero state, then
    /// attention-pool the hidden states into the video embedding `v`.
    /// Full variant only.
    pub fn encode_segments(
        &self,
        tape: &mut Tape<F>,
        segs: &[Tensor<F>],
    ) -> Result<(Tensor<F>, AttentionWeights<F>), ModelError> {
        let enc = self.enc_segment.as_ref().ok_or(ModelError::MissingBlock {
            op: "encode_segments",
            block: "enc_segment",
            variant: self.cfg.variant,
        })?;
        let attn = self.attn_segment.as_ref().ok_or(ModelError::MissingBlock {
            op: "encode_segments",
            block: "attn_segment",
            variant: self.cfg.variant,
        })?;
        if segs.is_empty() {
            return Err(TensorError::EmptyInput {
                op: "encode_segments",
            }
            .into());
        }
        let states = lstm_sequence(tape, enc, segs, &LstmState::zeros(self.cfg.embed_dim))?;
        let hs: Vec<Tensor<F>> = states.iter().map(|s| s.h.clone()).collect();
        Ok(attention_pool(tape, attn, &hs)?)
    }

    /// Decoding stage. For the Full variant the segment decoder starts from
    /// hidden state `v` (cell zero) and consumes the segment embeddings;
    /// each segment's frame decoder is then seeded from a segment-decoder
    /// hidden state (which one depends on [`DecoderSeed`]). Without the
    /// video embedding there is no segment decoder and frame decoders are
    /// seeded directly from the segment embeddings. Frame decoders consume
    /// the reduced frame embeddings and every hidden state is classified
    /// into a class distribution.
    pub fn decode(
        &self,
        tape: &mut Tape<F>,
        v: Option<&Tensor<F>>,
        segs: &[Tensor<F>],
        frame_embeds: &[Tensor<F>],
    ) -> Result<Tensor<F>, ModelError> {
        let (t, n, l) = (
            self.cfg.segment_frames,
            self.cfg.segments,
            self.cfg.embed_dim,
        );
        if frame_embeds.len() != n * t {
            return Err(ModelError::DimMismatch {
                what: "window rows",
                expected: n * t,
                got: frame_embeds.len(),
            });
        }
        // Per-segment frame-decoder seeds.
        let seeds: Vec<Tensor<F>> = match &self.dec_segment {
            Some(dec) => {
                let v = v.ok_or(ModelError::MissingBlock {
                    op: "decode",
                    block: "video embedding",
                    variant: self.cfg.variant,
                })?;
                let s0 = LstmState::from_hidden(v.clone());
                let states = lstm_sequence(tape, dec, segs, &s0)?;
                states.iter().map(|s| s.h.clone()).collect()
            }
            None => segs.to_vec(),
        };
        let last_seed = seeds.last().ok_or(ModelError::EmptyWindow)?.clone();
        let mut rows: Vec<Tensor<F>> = Vec::with_capacity(n * t);
        for i in 0..n {
            let seed = if i >= seeds.len() {
                // Fully padded trailing segment: nothing real to condition on.
                Tensor::zeros(&[l])
            } else {
                match self.cfg.decoder_seed {
                    DecoderSeed::PerSegment => seeds[i].clone(),
                    DecoderSeed::LastSegment => last_seed.clone(),
                }
            };
            let xs = &frame_embeds[i * t..(i + 1) * t];
            let states =
                lstm_sequence(tape, &self.dec_frame, xs, &LstmState::from_hidden(seed))?;
            for s in &states {
                let logits = dense(tape, &self.classifier.w, &self.classifier.b, &s.h)?;
                rows.push(tape.softmax(&logits)?);
            }
        }
        let row_refs: Vec<&Tensor<F>> = rows.iter().collect();
        Ok(tape.stack_rows(&row_refs)?)
    }

    /// Full forward pass over one window: reduce → encode frames → encode
    /// segments → decode, wired per variant. Differentiable end-to-end when
    /// `tape` is recording and the parameters are watched.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        window: &SequenceWindow<F>,
    ) -> Result<WindowOutput<F>, ModelError> {
        let frame_embeds = self.reduce_frames(tape, &window.feats)?;
        let enc = self.encode_frames(tape, &frame_embeds, &window.mask)?;
        let (v, segment_alphas) = if self.cfg.variant == Variant::Full {
            let (v, w) = self.encode_segments(tape, &enc.segments)?;
            (Some(v), Some(w))
        } else {
            (None, None)
        };
        let probs = self.decode(tape, v.as_ref(), &enc.segments, &frame_embeds)?;
        Ok(WindowOutput {
            probs,
            frame_alphas: enc.alphas,
            segment_alphas,
            video_embedding: v,
        })
    }
}

fn visit_lstm<'a, F>(
    name: &str,
    p: &'a LstmParams<F>,
    f: &mut impl FnMut(String, &'a Tensor<F>),
) {
    f(format!("{name}.w_x"), &p.w_x);
    f(format!("{name}.w_h"), &p.w_h);
    f(format!("{name}.b"), &p.b);
}

fn visit_lstm_mut<F>(
    name: &str,
    p: &mut LstmParams<F>,
    f: &mut impl FnMut(String, &mut Tensor<F>),
) {
    f(format!("{name}.w_x"), &mut p.w_x);
    f(format!("{name}.w_h"), &mut p.w_h);
    f(format!("{name}.b"), &mut p.b);
}

fn visit_attn<'a, F>(
    name: &str,
    p: &'a AttentionParams<F>,
    f: &mut impl FnMut(String, &'a Tensor<F>),
) {
    f(format!("{name}.w"), &p.w);
    f(format!("{name}.b"), &p.b);
    f(format!("{name}.u"), &p.u);
}

fn visit_attn_mut<F>(
    name: &str,
    p: &mut AttentionParams<F>,
    f: &mut impl FnMut(String, &mut Tensor<F>),
) {
    f(format!("{name}.w"), &mut p.w);
    f(format!("{name}.b"), &mut p.b);
    f(format!("{name}.u"), &mut p.u);
}

fn cast_lstm<F: Scalar, G: Scalar>(p: &LstmParams<F>) -> LstmParams<G> {
    LstmParams {
        w_x: p.w_x.cast(),
        w_h: p.w_h.cast(),
        b: p.b.cast(),
        hidden: p.hidden,
        input: p.input,
    }
}

fn cast_attn<F: Scalar, G: Scalar>(p: &AttentionParams<F>) -> AttentionParams<G> {
    AttentionParams {
        w: p.w.cast(),
        b: p.b.cast(),
        u: p.u.cast(),
        dim: p.dim,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SequenceWindow;

    fn tiny_cfg(variant: Variant) -> ModelConfig {
        ModelConfig::new(2, 2, 2, 3, 2, variant)
    }

    fn random_window(cfg: &ModelConfig, seed: u64) -> SequenceWindow<f32> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = cfg.window_len();
        let data: Vec<f32> = (0..rows * cfg.feat_dim)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect();
        SequenceWindow {
            feats: Tensor::matrix(rows, cfg.feat_dim, data).unwrap(),
            labels: (0..rows).map(|r| r % cfg.classes).collect(),
            mask: vec![true; rows],
            origin: ("test".into(), 0),
        }
    }

    #[test]
    fn init_is_deterministic_and_variant_gates_blocks() {
        let cfg = tiny_cfg(Variant::Full);
        let a = ModelParams::<f32>::init(cfg, 5).unwrap();
        let b = ModelParams::<f32>::init(cfg, 5).unwrap();
        let mut names_a = Vec::new();
        a.visit(|n, t| names_a.push((n, t.clone())));
        let mut identical = true;
        b.visit(|n, t| {
            let (na, ta) = &names_a.remove(0);
            identical &= *na == n && ta == t;
        });
        assert!(identical);

        let ve = ModelParams::<f32>::init(tiny_cfg(Variant::MinusVE), 5).unwrap();
        assert!(ve.attn_frame.is_some());
        assert!(ve.enc_segment.is_none());
        assert!(ve.attn_segment.is_none());
        assert!(ve.dec_segment.is_none());

        let vese = ModelParams::<f32>::init(tiny_cfg(Variant::MinusVESE), 5).unwrap();
        assert!(vese.attn_frame.is_none());
        assert!(vese.enc_segment.is_none());
    }

    #[test]
    fn param_count_matches_closed_form_per_variant() {
        let l = 7usize;
        let d = 11usize;
        let c = 4usize;
        let cfg = ModelConfig::new(l, 3, 2, d, c, Variant::Full);
        let lstm = 4 * l * (2 * l + 1);
        let attn = l * l + 2 * l;
        let reduce = d * l + l;
        let classifier = l * c + c;
        let full = ModelParams::<f32>::init(cfg, 0).unwrap();
        assert_eq!(full.param_count(), reduce + 4 * lstm + 2 * attn + classifier);

        let mut cfg_ve = cfg;
        cfg_ve.variant = Variant::MinusVE;
        let ve = ModelParams::<f32>::init(cfg_ve, 0).unwrap();
        assert_eq!(ve.param_count(), reduce + 2 * lstm + attn + classifier);

        let mut cfg_vese = cfg;
        cfg_vese.variant = Variant::MinusVESE;
        let vese = ModelParams::<f32>::init(cfg_vese, 0).unwrap();
        assert_eq!(vese.param_count(), reduce + 2 * lstm + classifier);

        assert!(vese.param_count() < ve.param_count());
        assert!(ve.param_count() < full.param_count());
    }

    #[test]
    fn reference_config_window_is_250_frames() {
        let cfg = ModelConfig::new(200, 50, 5, 2048, 6, Variant::Full);
        assert_eq!(cfg.window_len(), 250);
    }

    #[test]
    fn forward_rows_sum_to_one_for_every_variant() {
        for variant in [Variant::Full, Variant::MinusVE, Variant::MinusVESE] {
            let cfg = ModelConfig::new(4, 3, 2, 3, 3, variant);
            let params = ModelParams::<f32>::init(cfg, 1).unwrap();
            let window = random_window(&cfg, 2);
            let mut tape = Tape::inert();
            let out = params.forward(&mut tape, &window).unwrap();
            let (rows, cols) = out.probs.dims2().unwrap();
            assert_eq!(rows, cfg.window_len());
            assert_eq!(cols, cfg.classes);
            for r in 0..rows {
                let row = out.probs.row_slice(r);
                let sum: f32 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&p| p > 0.0));
            }
            match variant {
                Variant::Full => {
                    assert!(out.frame_alphas.is_some());
                    assert!(out.segment_alphas.is_some());
                    assert!(out.video_embedding.is_some());
                }
                Variant::MinusVE => {
                    assert!(out.frame_alphas.is_some());
                    assert!(out.segment_alphas.is_none());
                    assert!(out.video_embedding.is_none());
                }
                Variant::MinusVESE => {
                    assert!(out.frame_alphas.is_none());
                    assert!(out.segment_alphas.is_none());
                }
            }
        }
    }

    #[test]
    fn zero_classifier_gives_uniform_rows_and_class_zero_argmax() {
        let cfg = tiny_cfg(Variant::Full);
        let mut params = ModelParams::<f32>::init(cfg, 3).unwrap();
        params.classifier.w = Tensor::zeros(&[cfg.classes, cfg.embed_dim]);
        params.classifier.b = Tensor::zeros(&[cfg.classes]);
        let mut tape = Tape::inert();
        let out = params.forward(&mut tape, &random_window(&cfg, 4)).unwrap();
        for r in 0..cfg.window_len() {
            for &p in out.probs.row_slice(r) {
                assert_eq!(p, 0.5);
            }
        }
        assert!(out.predicted_labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let cfg = ModelConfig::new(3, 2, 2, 4, 3, Variant::Full);
        let params = ModelParams::<f32>::init(cfg, 7).unwrap();
        let window = random_window(&cfg, 8);
        let mut t1 = Tape::inert();
        let mut t2 = Tape::inert();
        let a = params.forward(&mut t1, &window).unwrap();
        let b = params.forward(&mut t2, &window).unwrap();
        assert_eq!(a.probs, b.probs);
    }

    #[test]
    fn full_variant_output_is_sensitive_to_the_context_vector() {
        let cfg = tiny_cfg(Variant::Full);
        let params = ModelParams::<f32>::init(cfg, 9).unwrap();
        let window = random_window(&cfg, 10);
        let mut tape = Tape::inert();
        let base = params.forward(&mut tape, &window).unwrap();
        let mut bumped = params.clone();
        let u = bumped.attn_segment.as_mut().unwrap();
        u.u = u.u.with_bumped(0, 0.5);
        let changed = bumped.forward(&mut tape, &window).unwrap();
        assert_ne!(base.probs, changed.probs);
    }

    #[test]
    fn dimension_mismatches_are_reported() {
        let cfg = tiny_cfg(Variant::Full);
        let params = ModelParams::<f32>::init(cfg, 1).unwrap();
        let mut window = random_window(&cfg, 1);
        window.feats = Tensor::matrix(cfg.window_len(), 5, vec![0.0; cfg.window_len() * 5])
            .unwrap();
        let mut tape = Tape::inert();
        assert!(matches!(
            params.forward(&mut tape, &window),
            Err(ModelError::DimMismatch { what: "feature dim", .. })
        ));

        let mut window = random_window(&cfg, 1);
        window.feats = Tensor::matrix(3, cfg.feat_dim, vec![0.0; 3 * cfg.feat_dim]).unwrap();
        assert!(matches!(
            params.forward(&mut tape, &window),
            Err(ModelError::DimMismatch { what: "window rows", .. })
        ));
    }

    #[test]
    fn non_prefix_masks_are_rejected() {
        let cfg = tiny_cfg(Variant::Full);
        let params = ModelParams::<f32>::init(cfg, 1).unwrap();
        let mut window = random_window(&cfg, 1);
        window.mask = vec![false, true, true, true];
        let mut tape = Tape::inert();
        assert!(matches!(
            params.forward(&mut tape, &window),
            Err(ModelError::NonPrefixMask { segment: 0 })
        ));
    }

    #[test]
    fn real_prefix_rows_ignore_padded_frame_contents() {
        // 2 segments of 3 frames; 4 real frames (full first segment, one
        // real frame in the second). Fuzzing the padded frames must not
        // change any real row's distribution.
        let cfg = ModelConfig::new(3, 3, 2, 2, 2, Variant::Full);
        let params = ModelParams::<f32>::init(cfg, 11).unwrap();
        let mut window = random_window(&cfg, 12);
        for t in 4..6 {
            window.mask[t] = false;
            window.labels[t] = cfg.classes;
        }
        let mut tape = Tape::inert();
        let base = params.forward(&mut tape, &window).unwrap();

        let mut fuzzed = window.clone();
        let mut data = fuzzed.feats.data().to_vec();
        for t in 4..6 {
            for d in 0..cfg.feat_dim {
                data[t * cfg.feat_dim + d] = 3.5 - (t + d) as f32;
            }
        }
        fuzzed.feats = Tensor::matrix(6, 2, data).unwrap();
        let out = params.forward(&mut tape, &fuzzed).unwrap();

        for r in 0..4 {
            assert_eq!(base.probs.row_slice(r), out.probs.row_slice(r), "row {r}");
        }
        let alphas = base.frame_alphas.as_ref().unwrap();
        assert_eq!(alphas.len(), 2);
        assert_eq!(alphas[0].alpha.numel(), 3);
        assert_eq!(alphas[1].alpha.numel(), 1);
        let seg_alpha = base.segment_alphas.as_ref().unwrap();
        assert_eq!(seg_alpha.alpha.numel(), 2);
    }

    /// Independent scalar reference implementations, written as plain loops
    /// with no shared code paths with the layer ops.
    mod reference {
        use crate::layers::{AttentionParams, LstmParams};

        fn sig(x: f64) -> f64 {
            1.0 / (1.0 + (-x).exp())
        }

        pub fn lstm_step(
            p: &LstmParams<f64>,
            x: &[f64],
            h: &[f64],
            c: &[f64],
        ) -> (Vec<f64>, Vec<f64>) {
            let hh = p.hidden;
            let mut z = vec![0.0; 4 * hh];
            for (r, zr) in z.iter_mut().enumerate() {
                let mut s = p.b.data()[r];
                for (j, xv) in x.iter().enumerate() {
                    s += p.w_x.data()[r * p.input + j] * xv;
                }
                for (j, hv) in h.iter().enumerate() {
                    s += p.w_h.data()[r * hh + j] * hv;
                }
                *zr = s;
            }
            let mut c2 = vec![0.0; hh];
            let mut h2 = vec![0.0; hh];
            for j in 0..hh {
                let i = sig(z[j]);
                let f = sig(z[hh + j]);
                let g = z[2 * hh + j].tanh();
                let o = sig(z[3 * hh + j]);
                c2[j] = f * c[j] + i * g;
                h2[j] = o * c2[j].tanh();
            }
            (h2, c2)
        }

        pub fn lstm_run(
            p: &LstmParams<f64>,
            xs: &[Vec<f64>],
            h0: &[f64],
        ) -> Vec<Vec<f64>> {
            let mut h = h0.to_vec();
            let mut c = vec![0.0; p.hidden];
            let mut out = Vec::new();
            for x in xs {
                let (h2, c2) = lstm_step(p, x, &h, &c);
                h = h2.clone();
                c = c2;
                out.push(h2);
            }
            out
        }

        pub fn attention(p: &AttentionParams<f64>, hs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
            let l = p.dim;
            let scores: Vec<f64> = hs
                .iter()
                .map(|h| {
                    let mut score = 0.0;
                    for r in 0..l {
                        let mut s = p.b.data()[r];
                        for (j, hv) in h.iter().enumerate() {
                            s += p.w.data()[r * l + j] * hv;
                        }
                        score += s.tanh() * p.u.data()[r];
                    }
                    score
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            let alpha: Vec<f64> = exps.iter().map(|e| e / z).collect();
            let mut pooled = vec![0.0; l];
            for (a, h) in alpha.iter().zip(hs) {
                for (j, hv) in h.iter().enumerate() {
                    pooled[j] += a * hv;
                }
            }
            (pooled, alpha)
        }

        pub fn softmax(z: &[f64]) -> Vec<f64> {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.iter().map(|e| e / total).collect()
        }
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn encode_frames_matches_scalar_walkthrough() {
        use rand::Rng;
        let cfg = ModelConfig::new(2, 2, 2, 2, 2, Variant::Full);
        let params = ModelParams::<f64>::init(cfg, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let embeds: Vec<Tensor<f64>> = (0..4)
            .map(|_| Tensor::vector(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]))
            .collect();
        let mask = vec![true; 4];
        let mut tape = Tape::inert();
        let enc = params.encode_frames(&mut tape, &embeds, &mask).unwrap();

        let attn = params.attn_frame.as_ref().unwrap();
        for i in 0..2 {
            let xs: Vec<Vec<f64>> = embeds[i * 2..(i + 1) * 2]
                .iter()
                .map(|t| t.data().to_vec())
                .collect();
            let hs = reference::lstm_run(&params.enc_frame, &xs, &[0.0, 0.0]);
            let (pooled, alpha) = reference::attention(attn, &hs);
            assert!(close(enc.segments[i].data(), &pooled, 1e-12));
            let got_alpha = &enc.alphas.as_ref().unwrap()[i];
            assert!(close(got_alpha.alpha.data(), &alpha, 1e-12));
        }
    }

    #[test]
    fn encode_frames_singleton_and_zero_param_cases() {
        let cfg = ModelConfig::new(2, 1, 1, 2, 2, Variant::Full);
        let params = ModelParams::<f64>::init(cfg, 23).unwrap();
        let embed = Tensor::vector(vec![0.3, -0.4]);
        let mut tape = Tape::inert();
        let enc = params
            .encode_frames(&mut tape, std::slice::from_ref(&embed), &[true])
            .unwrap();
        // Single frame: attention over one state is the state itself.
        let hs = reference::lstm_run(
            &params.enc_frame,
            &[embed.data().to_vec()],
            &[0.0, 0.0],
        );
        assert!(close(enc.segments[0].data(), &hs[0], 1e-12));
        assert_eq!(enc.alphas.as_ref().unwrap()[0].alpha.data(), &[1.0]);

        let mut zeroed = params.clone();
        zeroed.enc_frame = crate::layers::LstmParams::zeros(2, 2);
        let enc = zeroed
            .encode_frames(&mut tape, std::slice::from_ref(&embed), &[true])
            .unwrap();
        assert_eq!(enc.segments[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn minus_vese_segment_embedding_is_the_last_hidden_state() {
        use rand::Rng;
        let cfg = ModelConfig::new(2, 3, 1, 2, 2, Variant::MinusVESE);
        let params = ModelParams::<f64>::init(cfg, 24).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let embeds: Vec<Tensor<f64>> = (0..3)
            .map(|_| Tensor::vector(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]))
            .collect();
        let mut tape = Tape::inert();
        let enc = params
            .encode_frames(&mut tape, &embeds, &[true; 3])
            .unwrap();
        let xs: Vec<Vec<f64>> = embeds.iter().map(|t| t.data().to_vec()).collect();
        let hs = reference::lstm_run(&params.enc_frame, &xs, &[0.0, 0.0]);
        assert!(close(enc.segments[0].data(), hs.last().unwrap(), 1e-12));
        assert!(enc.alphas.is_none());
    }

    #[test]
    fn encode_segments_matches_scalar_walkthrough() {
        use rand::Rng;
        let cfg = ModelConfig::new(2, 2, 3, 2, 2, Variant::Full);
        let params = ModelParams::<f64>::init(cfg, 26).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let segs: Vec<Tensor<f64>> = (0..3)
            .map(|_| Tensor::vector(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]))
            .collect();
        let mut tape = Tape::inert();
        let (v, alpha) = params.encode_segments(&mut tape, &segs).unwrap();

        let xs: Vec<Vec<f64>> = segs.iter().map(|t| t.data().to_vec()).collect();
        let hs = reference::lstm_run(params.enc_segment.as_ref().unwrap(), &xs, &[0.0, 0.0]);
        let (want_v, want_alpha) =
            reference::attention(params.attn_segment.as_ref().unwrap(), &hs);
        assert!(close(v.data(), &want_v, 1e-12));
        assert!(close(alpha.alpha.data(), &want_alpha, 1e-12));

        // Single segment: v is that segment's encoding.
        let (v1, a1) = params.encode_segments(&mut tape, &segs[..1]).unwrap();
        let h1 = reference::lstm_run(
            params.enc_segment.as_ref().unwrap(),
            &xs[..1],
            &[0.0, 0.0],
        );
        assert!(close(v1.data(), &h1[0], 1e-12));
        assert_eq!(a1.alpha.data(), &[1.0]);

        // Wrong variant: block is missing.
        let ve = ModelParams::<f64>::init(
            ModelConfig::new(2, 2, 3, 2, 2, Variant::MinusVE),
            26,
        )
        .unwrap();
        assert!(matches!(
            ve.encode_segments(&mut tape, &segs),
            Err(ModelError::MissingBlock { .. })
        ));
    }

    #[test]
    fn decode_matches_scalar_walkthrough() {
        use rand::Rng;
        let cfg = ModelConfig::new(2, 2, 2, 2, 2, Variant::Full);
        let params = ModelParams::<f64>::init(cfg, 28).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut vec2 = || -> Vec<f64> {
            vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
        };
        let v = Tensor::vector(vec2());
        let segs: Vec<Tensor<f64>> = (0..2).map(|_| Tensor::vector(vec2())).collect();
        let embeds: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::vector(vec2())).collect();

        let mut tape = Tape::inert();
        let probs = params
            .decode(&mut tape, Some(&v), &segs, &embeds)
            .unwrap();

        // Reference: segment decoder from hidden v, then per-segment frame
        // decoders seeded with that segment's decoder state.
        let dec = params.dec_segment.as_ref().unwrap();
        let seg_inputs: Vec<Vec<f64>> = segs.iter().map(|t| t.data().to_vec()).collect();
        let seg_states = reference::lstm_run(dec, &seg_inputs, v.data());
        for i in 0..2 {
            let xs: Vec<Vec<f64>> = embeds[i * 2..(i + 1) * 2]
                .iter()
                .map(|t| t.data().to_vec())
                .collect();
            let frame_states =
                reference::lstm_run(&params.dec_frame, &xs, &seg_states[i]);
            for (t, h) in frame_states.iter().enumerate() {
                let mut logits = vec![0.0; 2];
                for (r, lr) in logits.iter_mut().enumerate() {
                    let mut s = params.classifier.b.data()[r];
                    for (j, hv) in h.iter().enumerate() {
                        s += params.classifier.w.data()[r * 2 + j] * hv;
                    }
                    *lr = s;
                }
                let want = reference::softmax(&logits);
                assert!(
                    close(probs.row_slice(i * 2 + t), &want, 1e-12),
                    "row {}",
                    i * 2 + t
                );
            }
        }
    }

    #[test]
    fn minus_ve_decode_seeds_frame_decoders_from_segment_embeddings() {
        use rand::Rng;
        let cfg = ModelConfig::new(2, 2, 2, 2, 2, Variant::MinusVE);
        let params = ModelParams::<f64>::init(cfg, 30).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut vec2 = || -> Vec<f64> {
            vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
        };
        let segs: Vec<Tensor<f64>> = (0..2).map(|_| Tensor::vector(vec2())).collect();
        let embeds: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::vector(vec2())).collect();
        let mut tape = Tape::inert();
        let probs = params.decode(&mut tape, None, &segs, &embeds).unwrap();

        for i in 0..2 {
            let xs: Vec<Vec<f64>> = embeds[i * 2..(i + 1) * 2]
                .iter()
                .map(|t| t.data().to_vec())
                .collect();
            let frame_states =
                reference::lstm_run(&params.dec_frame, &xs, segs[i].data());
            for (t, h) in frame_states.iter().enumerate() {
                let mut logits = vec![0.0; 2];
                for (r, lr) in logits.iter_mut().enumerate() {
                    let mut s = params.classifier.b.data()[r];
                    for (j, hv) in h.iter().enumerate() {
                        s += params.classifier.w.data()[r * 2 + j] * hv;
                    }
                    *lr = s;
                }
                let want = reference::softmax(&logits);
                assert!(close(probs.row_slice(i * 2 + t), &want, 1e-12));
            }
        }
    }

    #[test]
    fn last_segment_seeding_uses_the_final_decoder_state_everywhere() {
        use rand::Rng;
        let mut cfg = ModelConfig::new(2, 2, 2, 2, 2, Variant::Full);
        cfg.decoder_seed = DecoderSeed::LastSegment;
        let params = ModelParams::<f64>::init(cfg, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut vec2 = || -> Vec<f64> {
            vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
        };
        let v = Tensor::vector(vec2());
        let segs: Vec<Tensor<f64>> = (0..2).map(|_| Tensor::vector(vec2())).collect();
        let embeds: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::vector(vec2())).collect();
        let mut tape = Tape::inert();
        let probs = params.decode(&mut tape, Some(&v), &segs, &embeds).unwrap();

        let dec = params.dec_segment.as_ref().unwrap();
        let seg_inputs: Vec<Vec<f64>> = segs.iter().map(|t| t.data().to_vec()).collect();
        let seg_states = reference::lstm_run(dec, &seg_inputs, v.data());
        let last = seg_states.last().unwrap();
        for i in 0..2 {
            let xs: Vec<Vec<f64>> = embeds[i * 2..(i + 1) * 2]
                .iter()
                .map(|t| t.data().to_vec())
                .collect();
            let frame_states = reference::lstm_run(&params.dec_frame, &xs, last);
            for (t, h) in frame_states.iter().enumerate() {
                let mut logits = vec![0.0; 2];
                for (r, lr) in logits.iter_mut().enumerate() {
                    let mut s = params.classifier.b.data()[r];
                    for (j, hv) in h.iter().enumerate() {
                        s += params.classifier.w.data()[r * 2 + j] * hv;
                    }
                    *lr = s;
                }
                let want = reference::softmax(&logits);
                assert!(close(probs.row_slice(i * 2 + t), &want, 1e-12));
            }
        }
    }
}
