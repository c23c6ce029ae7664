//! The three parameterized building blocks the model reuses: LSTM
//! cell/sequence, dense (affine) layer, and attention pooling.
//!
//! Every operation threads a [`Tape`] so the same code serves recorded
//! training forwards and inert inference forwards.

use rand::Rng;

use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor, TensorError};

/// Uniform Glorot initialization: entries drawn from
/// `U(-limit, limit)` with `limit = sqrt(6 / (fan_in + fan_out))`.
/// Values are drawn at f64 and converted, so a given seed produces
/// corresponding parameters at every precision.
fn glorot<F: Scalar, R: Rng>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<F> = (0..rows * cols)
        .map(|_| F::of_f64(rng.random_range(-limit..limit)))
        .collect();
    Tensor::new(&[rows, cols], data).expect("glorot dimensions are positive")
}

/// LSTM cell parameters. The four gates live in one fused `[4H]` block in
/// the fixed order input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct LstmParams<F> {
    /// Input weights, `[4H × D]`.
    pub w_x: Tensor<F>,
    /// Recurrent weights, `[4H × H]`.
    pub w_h: Tensor<F>,
    /// Gate bias, `[4H]`.
    pub b: Tensor<F>,
    /// Hidden size H.
    pub hidden: usize,
    /// Input size D.
    pub input: usize,
}

impl<F: Scalar> LstmParams<F> {
    /// Glorot-initialized weights; zero bias except the forget-gate block,
    /// which starts at 1.0 to ease gradient flow over long sequences.
    pub fn init<R: Rng>(hidden: usize, input: usize, rng: &mut R) -> Self {
        let w_x = glorot(4 * hidden, input, input, 4 * hidden, rng);
        let w_h = glorot(4 * hidden, hidden, hidden, 4 * hidden, rng);
        let mut b = vec![F::zero(); 4 * hidden];
        b[hidden..2 * hidden].fill(F::one());
        Self {
            w_x,
            w_h,
            b: Tensor::vector(b),
            hidden,
            input,
        }
    }

    pub fn zeros(hidden: usize, input: usize) -> Self {
        Self {
            w_x: Tensor::zeros(&[4 * hidden, input]),
            w_h: Tensor::zeros(&[4 * hidden, hidden]),
            b: Tensor::zeros(&[4 * hidden]),
            hidden,
            input,
        }
    }

    /// Trainable scalar count: `4H(D + H + 1)`.
    pub fn param_count(&self) -> usize {
        self.w_x.numel() + self.w_h.numel() + self.b.numel()
    }
}

/// Hidden and cell state of one LSTM.
#[derive(Clone, Debug)]
pub struct LstmState<F> {
    pub h: Tensor<F>,
    pub c: Tensor<F>,
}

impl<F: Scalar> LstmState<F> {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: Tensor::zeros(&[hidden]),
            c: Tensor::zeros(&[hidden]),
        }
    }

    /// State with a given hidden vector and zero cell, used to seed decoders
    /// from an embedding.
    pub fn from_hidden(h: Tensor<F>) -> Self {
        let c = Tensor::zeros(h.shape());
        Self { h, c }
    }
}

/// One LSTM step: `i,f,o = sigmoid`, candidate `g = tanh`,
/// `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`. No peepholes.
pub fn lstm_step<F: Scalar>(
    tape: &mut Tape<F>,
    p: &LstmParams<F>,
    x: &Tensor<F>,
    s: &LstmState<F>,
) -> Result<LstmState<F>, TensorError> {
    let h = p.hidden;
    let zx = tape.matvec(&p.w_x, x)?;
    let zh = tape.matvec(&p.w_h, &s.h)?;
    let z = tape.add_n(&[&zx, &zh, &p.b])?;
    let zi = tape.slice(&z, 0, h)?;
    let gate_i = tape.sigmoid(&zi)?;
    let zf = tape.slice(&z, h, h)?;
    let gate_f = tape.sigmoid(&zf)?;
    let zg = tape.slice(&z, 2 * h, h)?;
    let cand = tape.tanh(&zg)?;
    let zo = tape.slice(&z, 3 * h, h)?;
    let gate_o = tape.sigmoid(&zo)?;
    let fc = tape.mul(&gate_f, &s.c)?;
    let ig = tape.mul(&gate_i, &cand)?;
    let c = tape.add(&fc, &ig)?;
    let ct = tape.tanh(&c)?;
    let h_new = tape.mul(&gate_o, &ct)?;
    Ok(LstmState { h: h_new, c })
}

/// Unrolls [`lstm_step`] over a sequence; `states[t]` consumes `xs[t]`.
pub fn lstm_sequence<F: Scalar>(
    tape: &mut Tape<F>,
    p: &LstmParams<F>,
    xs: &[Tensor<F>],
    s0: &LstmState<F>,
) -> Result<Vec<LstmState<F>>, TensorError> {
    if xs.is_empty() {
        return Err(TensorError::EmptyInput {
            op: "lstm_sequence",
        });
    }
    let mut states = Vec::with_capacity(xs.len());
    let mut prev = s0.clone();
    for x in xs {
        let next = lstm_step(tape, p, x, &prev)?;
        states.push(next.clone());
        prev = next;
    }
    Ok(states)
}

/// Affine layer parameters for `W·x + b`.
#[derive(Clone, Debug)]
pub struct DenseParams<F> {
    /// `[out × in]` weight matrix.
    pub w: Tensor<F>,
    /// `[out]` bias.
    pub b: Tensor<F>,
}

impl<F: Scalar> DenseParams<F> {
    pub fn init<R: Rng>(out: usize, inp: usize, rng: &mut R) -> Self {
        Self {
            w: glorot(out, inp, inp, out, rng),
            b: Tensor::zeros(&[out]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.numel() + self.b.numel()
    }
}

/// `W·x + b`.
pub fn dense<F: Scalar>(
    tape: &mut Tape<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    x: &Tensor<F>,
) -> Result<Tensor<F>, TensorError> {
    let wx = tape.matvec(w, x)?;
    tape.add(&wx, b)
}

/// Attention-pooling parameters: square projection, bias, and the trainable
/// context vector scored against projected hidden states.
#[derive(Clone, Debug)]
pub struct AttentionParams<F> {
    /// `[L × L]` projection.
    pub w: Tensor<F>,
    /// `[L]` projection bias.
    pub b: Tensor<F>,
    /// `[L]` context vector, randomly initialized and jointly trained.
    pub u: Tensor<F>,
    pub dim: usize,
}

impl<F: Scalar> AttentionParams<F> {
    pub fn init<R: Rng>(dim: usize, rng: &mut R) -> Self {
        let w = glorot(dim, dim, dim, dim, rng);
        // The context vector scores each position down to one logit, so its
        // fan-out is 1.
        let u_limit = (6.0 / (dim + 1) as f64).sqrt();
        let u: Vec<F> = (0..dim)
            .map(|_| F::of_f64(rng.random_range(-u_limit..u_limit)))
            .collect();
        Self {
            w,
            b: Tensor::zeros(&[dim]),
            u: Tensor::vector(u),
            dim,
        }
    }

    /// Trainable scalar count: `L² + 2L`.
    pub fn param_count(&self) -> usize {
        self.w.numel() + self.b.numel() + self.u.numel()
    }
}

/// Normalized attention weights over the attended positions.
#[derive(Clone, Debug)]
pub struct AttentionWeights<F> {
    /// Shape `[n]`; entries in (0,1) summing to 1 within 1e-6.
    pub alpha: Tensor<F>,
}

/// Attention pooling: `u_j = tanh(W·h_j + b)`, `score_j = u_jᵀ·u_ctx`
/// (unscaled dot product), `α = softmax(score)`, `pooled = Σ_j α_j·h_j`.
pub fn attention_pool<F: Scalar>(
    tape: &mut Tape<F>,
    p: &AttentionParams<F>,
    hs: &[Tensor<F>],
) -> Result<(Tensor<F>, AttentionWeights<F>), TensorError> {
    if hs.is_empty() {
        return Err(TensorError::EmptyInput {
            op: "attention_pool",
        });
    }
    let mut scores = Vec::with_capacity(hs.len());
    for h in hs {
        let proj = dense(tape, &p.w, &p.b, h)?;
        let u_j = tape.tanh(&proj)?;
        scores.push(tape.dot(&u_j, &p.u)?);
    }
    let score_refs: Vec<&Tensor<F>> = scores.iter().collect();
    let logits = tape.concat_n(&score_refs)?;
    let alpha = tape.softmax(&logits)?;
    let mut terms = Vec::with_capacity(hs.len());
    for (j, h) in hs.iter().enumerate() {
        let a_j = tape.slice(&alpha, j, 1)?;
        terms.push(tape.scale_by(h, &a_j)?);
    }
    let term_refs: Vec<&Tensor<F>> = terms.iter().collect();
    let pooled = tape.add_n(&term_refs)?;
    Ok((pooled, AttentionWeights { alpha }))
}
