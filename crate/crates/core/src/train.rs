//! Loss, optimizer, training loop, and the gradient-check harness.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::data::SequenceWindow;
use crate::dd::Dd;
use crate::metrics::{f1_counts, f1_from_counts, labels_to_segments, MatchCounts};
use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor, TensorError};

/// Probabilities below this are clamped inside the log; the clamped region
/// contributes zero gradient.
pub const PROB_CLAMP: f64 = 1e-12;

/// Errors raised by loss computation, optimization, or the training loop.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training config: {field}")]
    InvalidConfig { field: &'static str },
    #[error("probabilities are {rows} rows but {what} has length {got}")]
    RowMismatch { rows: usize, what: &'static str, got: usize },
    #[error("label {label} at row {row} out of range for {classes} classes")]
    LabelRange { row: usize, label: usize, classes: usize },
    #[error("no unmasked rows to average the loss over")]
    NoRealRows,
    #[error("no training windows")]
    EmptyDataset,
    #[error("non-finite gradient for {name}; optimizer step aborted")]
    NanGrad { name: String },
    #[error("gradient list does not match parameters: expected {expected}, got {got}")]
    MisalignedGrads { expected: String, got: String },
    #[error("training diverged at step {step}: {source}")]
    Diverged { step: usize, source: TensorError },
}

/// Mean negative log-likelihood of the true class over mask-true rows.
///
/// `probs` is `[M × C]` with rows summing to 1. The loss is
/// `-(1/R) Σ log(probs[r, labels[r]])` over the `R` mask-true rows, with the
/// probability clamped at [`PROB_CLAMP`] inside the log. Masked rows and
/// their labels are never read, so the loss is bit-invariant to their
/// contents.
pub fn cross_entropy<F: Scalar>(
    tape: &mut Tape<F>,
    probs: &Tensor<F>,
    labels: &[usize],
    mask: &[bool],
) -> Result<Tensor<F>, TrainError> {
    let (rows, classes) = probs.dims2().ok_or(TensorError::BadShape {
        op: "cross_entropy",
        expected: "a rank-2 probability matrix".to_string(),
        shape: probs.shape().to_vec(),
    })?;
    if labels.len() != rows {
        return Err(TrainError::RowMismatch { rows, what: "labels", got: labels.len() });
    }
    if mask.len() != rows {
        return Err(TrainError::RowMismatch { rows, what: "mask", got: mask.len() });
    }
    let real: Vec<usize> = (0..rows).filter(|&r| mask[r]).collect();
    if real.is_empty() {
        return Err(TrainError::NoRealRows);
    }
    for &r in &real {
        if labels[r] >= classes {
            return Err(TrainError::LabelRange { row: r, label: labels[r], classes });
        }
    }

    let clamp = F::of_f64(PROB_CLAMP);
    let count = F::of_f64(real.len() as f64);
    let data = probs.data();
    let mut total = F::zero();
    // (flat index, local gradient) of each row's picked probability;
    // d(-ln max(p, clamp))/dp is -1/p above the clamp and 0 below it.
    let mut picked = Vec::with_capacity(real.len());
    for &r in &real {
        let idx = r * classes + labels[r];
        let p = data[idx];
        if p >= clamp {
            total = total - p.ln();
            picked.push((idx, -(F::one() / (p * count))));
        } else {
            total = total - clamp.ln();
            picked.push((idx, F::zero()));
        }
    }
    let loss = total / count;

    let numel = probs.numel();
    tape.record_op("cross_entropy", &[probs], &[1], vec![loss], move |grad: &[F]| {
        let g = grad[0];
        let mut dp = vec![F::zero(); numel];
        for &(idx, coef) in &picked {
            dp[idx] = g * coef;
        }
        vec![dp]
    })
    .map_err(TrainError::Tensor)
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub early_stop_patience: Option<usize>,
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 10,
            batch_size: 1,
            seed: 0,
            shuffle: true,
            early_stop_patience: None,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig { field: "learning_rate" });
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) {
            return Err(TrainError::InvalidConfig { field: "beta1" });
        }
        if !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(TrainError::InvalidConfig { field: "beta2" });
        }
        if !(self.epsilon > 0.0) {
            return Err(TrainError::InvalidConfig { field: "epsilon" });
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig { field: "epochs" });
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig { field: "batch_size" });
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(TrainError::InvalidConfig { field: "clip_norm" });
            }
        }
        Ok(())
    }
}

/// Adam moment buffers, one pair per parameter tensor in visit order.
#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    pub m: Vec<Tensor<F>>,
    pub s: Vec<Tensor<F>>,
    pub t: u64,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        let mut m = Vec::new();
        params.visit(|_, t| m.push(Tensor::zeros(t.shape())));
        OptimizerState { m: m.clone(), s: m, t: 0 }
    }
}

/// One Adam update over every parameter tensor.
///
/// `grads` must be in visit order (as produced by [`collect_grads`]). A
/// non-finite gradient aborts the step before any parameter changes.
pub fn adam_step<F: Scalar>(
    params: &mut ModelParams<F>,
    grads: &[(String, Tensor<F>)],
    state: &mut OptimizerState<F>,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    for (name, g) in grads {
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NanGrad { name: name.clone() });
        }
    }
    state.t += 1;
    let t = state.t;
    let lr = F::of_f64(cfg.learning_rate);
    let b1 = F::of_f64(cfg.beta1);
    let b2 = F::of_f64(cfg.beta2);
    let eps = F::of_f64(cfg.epsilon);
    let one = F::one();
    let bc1 = F::of_f64(1.0 - cfg.beta1.powi(t as i32));
    let bc2 = F::of_f64(1.0 - cfg.beta2.powi(t as i32));

    let mut idx = 0usize;
    let mut failure: Option<TrainError> = None;
    params.visit_mut(|name, theta| {
        if failure.is_some() {
            return;
        }
        let Some((gname, g)) = grads.get(idx) else {
            failure = Some(TrainError::MisalignedGrads {
                expected: name,
                got: "nothing".into(),
            });
            return;
        };
        if *gname != name || g.shape() != theta.shape() {
            failure = Some(TrainError::MisalignedGrads { expected: name, got: gname.clone() });
            return;
        }
        let gd = g.data();
        let mut md = state.m[idx].data().to_vec();
        let mut sd = state.s[idx].data().to_vec();
        let mut td = theta.data().to_vec();
        for i in 0..td.len() {
            md[i] = b1 * md[i] + (one - b1) * gd[i];
            sd[i] = b2 * sd[i] + (one - b2) * gd[i] * gd[i];
            let m_hat = md[i] / bc1;
            let s_hat = sd[i] / bc2;
            td[i] = td[i] - lr * m_hat / (s_hat.sqrt() + eps);
        }
        state.m[idx] = Tensor::new(theta.shape(), md).expect("shape unchanged");
        state.s[idx] = Tensor::new(theta.shape(), sd).expect("shape unchanged");
        *theta = Tensor::new(theta.shape(), td).expect("shape unchanged");
        idx += 1;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(())
}

/// Extracts the gradient of every watched parameter in visit order.
pub fn collect_grads<F: Scalar>(
    watched: &ModelParams<F>,
    grads: &crate::tape::Grads<F>,
) -> Result<Vec<(String, Tensor<F>)>, TrainError> {
    let mut out = Vec::new();
    let mut failure = None;
    watched.visit(|name, t| {
        if failure.is_some() {
            return;
        }
        match grads.get(t) {
            Ok(g) => out.push((name, g)),
            Err(e) => failure = Some(TrainError::Tensor(e)),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(out)
}

/// Scales all gradients by `clip/norm` when their global L2 norm exceeds
/// `clip`.
fn clip_gradients<F: Scalar>(grads: &mut [(String, Tensor<F>)], clip: f64) {
    let mut sq = 0.0f64;
    for (_, g) in grads.iter() {
        for &v in g.data() {
            let v = v.to_f64_lossy();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > clip {
        let k = F::of_f64(clip / norm);
        for (_, g) in grads.iter_mut() {
            let data: Vec<F> = g.data().iter().map(|&v| v * k).collect();
            *g = Tensor::new(g.shape(), data).expect("shape unchanged");
        }
    }
}

/// One epoch's summary line.
#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
    pub val_f1_50: Option<f64>,
    pub wall_ms: u64,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch (or the final epoch when no
    /// validation windows were given).
    pub params: ModelParams<f32>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
}

/// Pooled validation scores over a window set: frame accuracy and F1@50.
pub fn validation_scores(
    params: &ModelParams<f32>,
    windows: &[SequenceWindow<f32>],
) -> Result<(f64, f64), TrainError> {
    let mut correct = 0usize;
    let mut real = 0usize;
    let mut counts = MatchCounts::default();
    let mut tape = Tape::inert();
    for w in windows {
        let out = params.forward(&mut tape, w)?;
        let pred = out.predicted_labels();
        for (r, (&m, &gt)) in w.mask.iter().zip(&w.labels).enumerate() {
            if m {
                real += 1;
                if pred[r] == gt {
                    correct += 1;
                }
            }
        }
        let pred_segs = labels_to_segments(&pred, &w.mask);
        let gt_segs = labels_to_segments(&w.labels, &w.mask);
        let c = f1_counts(&pred_segs, &gt_segs, 50.0, None);
        counts.tp += c.tp;
        counts.fp += c.fp;
        counts.missed += c.missed;
    }
    if real == 0 {
        return Err(TrainError::NoRealRows);
    }
    Ok((100.0 * correct as f64 / real as f64, f1_from_counts(counts)))
}

/// Trains `params` on `train_windows`, evaluating on `val_windows` after
/// each epoch.
///
/// Windows are visited in a seeded shuffled order (when `shuffle` is set),
/// grouped into batches of `batch_size`; each batch takes one forward,
/// backward, and Adam step on the mean of the window losses. The parameters
/// from the epoch with the highest validation accuracy are returned; with a
/// patience setting, training stops after that many epochs without
/// improvement.
pub fn train(
    params: ModelParams<f32>,
    train_windows: &[SequenceWindow<f32>],
    val_windows: &[SequenceWindow<f32>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_windows.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut params = params;
    let mut state = OptimizerState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ModelParams<f32>)> = None;
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_windows.len()).collect();
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let step_result: Result<f64, TrainError> = (|| {
                let mut tape = Tape::new();
                let watched = params.watched(&mut tape);
                let mut losses = Vec::with_capacity(chunk.len());
                for &wi in chunk {
                    let w = &train_windows[wi];
                    let out = watched.forward(&mut tape, w)?;
                    losses.push(cross_entropy(&mut tape, &out.probs, &w.labels, &w.mask)?);
                }
                let loss = if losses.len() == 1 {
                    losses.pop().expect("one loss")
                } else {
                    let refs: Vec<&Tensor<f32>> = losses.iter().collect();
                    let total = tape.add_n(&refs)?;
                    tape.scale(&total, 1.0 / losses.len() as f32)?
                };
                let loss_value = loss.item() as f64;
                let grads = tape.backward(&loss)?;
                let mut grads = collect_grads(&watched, &grads)?;
                if let Some(clip) = cfg.clip_norm {
                    clip_gradients(&mut grads, clip);
                }
                adam_step(&mut params, &grads, &mut state, cfg)?;
                Ok(loss_value)
            })();
            match step_result {
                Ok(v) => loss_sum += v * chunk.len() as f64,
                Err(TrainError::Tensor(e @ TensorError::NonFinite { .. })) => {
                    return Err(TrainError::Diverged { step, source: e });
                }
                Err(TrainError::Model(ModelError::Tensor(e @ TensorError::NonFinite { .. }))) => {
                    return Err(TrainError::Diverged { step, source: e });
                }
                Err(e) => return Err(e),
            }
            step += 1;
        }
        let train_loss = loss_sum / train_windows.len() as f64;

        let (val_accuracy, val_f1_50) = if val_windows.is_empty() {
            (None, None)
        } else {
            let (acc, f1) = validation_scores(&params, val_windows)?;
            (Some(acc), Some(f1))
        };
        if let Some(acc) = val_accuracy {
            let improved = match &best {
                None => true,
                Some((_, best_acc, _)) => acc > *best_acc,
            };
            if improved {
                best = Some((epoch, acc, params.clone()));
            }
        }
        log.push(EpochLog {
            epoch,
            train_loss,
            val_accuracy,
            val_f1_50,
            wall_ms: started.elapsed().as_millis() as u64,
        });
        if let (Some(patience), Some((best_epoch, _, _))) = (cfg.early_stop_patience, &best) {
            if epoch - best_epoch >= patience {
                break;
            }
        }
    }

    Ok(match best {
        Some((best_epoch, best_acc, best_params)) => TrainOutcome {
            params: best_params,
            log,
            best_epoch,
            best_val_accuracy: Some(best_acc),
        },
        None => {
            let best_epoch = log.len();
            TrainOutcome { params, log, best_epoch, best_val_accuracy: None }
        }
    })
}

/// Gradient-check report: the largest relative disagreement between analytic
/// and finite-difference gradients, and where it occurred.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub params_checked: usize,
}

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Checks every parameter scalar of a small 64-bit model against central
/// finite differences of the masked cross-entropy on one random window.
///
/// Analytic gradients come from the reverse-mode tape at f64. The two loss
/// evaluations behind each central difference run in double-double precision
/// ([`crate::dd::Dd`]): at step 1e-5 an f64 loss of order 1 leaves rounding
/// noise of order 1e-11 in the quotient, which swamps genuine gradients
/// below ~1e-7, while double-double pushes that floor under 1e-26 so the
/// comparison measures the truncation error of the difference scheme alone.
///
/// The relative error is `|ga - gf| / max(1e-8, |ga| + |gf|)`.
pub fn grad_check(cfg: ModelConfig, seed: u64) -> Result<GradCheckReport, TrainError> {
    grad_check_inner(cfg, seed, false)
}

/// Harness self-test: reruns the gradient check with the analytic tanh
/// derivative deliberately replaced by 1. A healthy harness must report a
/// large error (the check would otherwise be vacuous).
pub fn grad_check_mutated(cfg: ModelConfig, seed: u64) -> Result<GradCheckReport, TrainError> {
    grad_check_inner(cfg, seed, true)
}

fn grad_check_inner(
    cfg: ModelConfig,
    seed: u64,
    sabotage_tanh: bool,
) -> Result<GradCheckReport, TrainError> {
    cfg.validate()?;
    let params = ModelParams::<f64>::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let rows = cfg.window_len();
    let feats: Vec<f64> = (0..rows * cfg.feat_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..cfg.classes)).collect();
    // Mask out the tail quarter so the check also covers the masking path;
    // a global prefix is a valid prefix within every segment.
    let cutoff = rows - rows / 4;
    let mask: Vec<bool> = (0..rows).map(|r| r < cutoff).collect();
    let window = SequenceWindow {
        feats: Tensor::matrix(rows, cfg.feat_dim, feats)?,
        labels,
        mask,
        origin: ("gradcheck".into(), 0),
    };

    // Analytic gradients.
    let mut tape = Tape::new();
    if sabotage_tanh {
        tape.tanh_grad_one = true;
    }
    let watched = params.watched(&mut tape);
    let out = watched.forward(&mut tape, &window)?;
    let loss = cross_entropy(&mut tape, &out.probs, &window.labels, &window.mask)?;
    let grads = tape.backward(&loss)?;
    let analytic = collect_grads(&watched, &grads)?;

    // Finite differences, one scalar at a time, evaluated in double-double.
    let dd_params = params.cast::<Dd>();
    let dd_window = SequenceWindow {
        feats: window.feats.cast::<Dd>(),
        labels: window.labels.clone(),
        mask: window.mask.clone(),
        origin: window.origin.clone(),
    };
    let loss_at = |p: &ModelParams<Dd>| -> Result<Dd, TrainError> {
        let mut tape = Tape::inert();
        let out = p.forward(&mut tape, &dd_window)?;
        let loss = cross_entropy(&mut tape, &out.probs, &dd_window.labels, &dd_window.mask)?;
        Ok(loss.item())
    };
    let step = Dd::of_f64(FD_STEP);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_parameter: String::new(),
        params_checked: 0,
    };
    for (name, ga) in &analytic {
        for i in 0..ga.numel() {
            let mut plus = dd_params.clone();
            let mut minus = dd_params.clone();
            bump_named(&mut plus, name, i, step);
            bump_named(&mut minus, name, i, -step);
            let gf = ((loss_at(&plus)? - loss_at(&minus)?) / (step + step)).to_f64();
            let g = ga.data()[i];
            let rel = (g - gf).abs() / (g.abs() + gf.abs()).max(1e-8);
            report.params_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_parameter = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}

fn bump_named<F: Scalar>(params: &mut ModelParams<F>, target: &str, index: usize, delta: F) {
    params.visit_mut(|name, t| {
        if name == target {
            *t = t.with_bumped(index, delta);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, window_sequence, SynthSpec, TransitionModel};
    use crate::model::Variant;

    fn probs_matrix<F: Scalar>(rows: &[&[f64]]) -> Tensor<F> {
        let cols = rows[0].len();
        let data: Vec<F> = rows.iter().flat_map(|r| r.iter().map(|&v| F::of_f64(v))).collect();
        Tensor::matrix(rows.len(), cols, data).unwrap()
    }

    #[test]
    fn cross_entropy_hand_oracles() {
        let mut tape = Tape::inert();
        let p = probs_matrix::<f64>(&[&[0.7, 0.3]]);
        let loss = cross_entropy(&mut tape, &p, &[0], &[true]).unwrap();
        assert_eq!(loss.item(), -(0.7f64).ln());
        assert!((loss.item() - 0.356_674_943_938_732_3).abs() < 1e-15);

        let u = probs_matrix::<f64>(&[&[0.25; 4], &[0.25; 4], &[0.25; 4]]);
        let loss = cross_entropy(&mut tape, &u, &[0, 3, 1], &[true; 3]).unwrap();
        assert!((loss.item() - (4.0f64).ln()).abs() < 1e-12);

        let hot = probs_matrix::<f64>(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let loss = cross_entropy(&mut tape, &hot, &[0, 1], &[true; 2]).unwrap();
        assert_eq!(loss.item(), 0.0);

        assert!(matches!(
            cross_entropy(&mut tape, &p, &[0], &[false]),
            Err(TrainError::NoRealRows)
        ));
        assert!(matches!(
            cross_entropy(&mut tape, &p, &[2], &[true]),
            Err(TrainError::LabelRange { row: 0, label: 2, classes: 2 })
        ));
        assert!(matches!(
            cross_entropy(&mut tape, &p, &[0, 1], &[true]),
            Err(TrainError::RowMismatch { what: "labels", .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let rows: Vec<Vec<f64>> = vec![
            vec![0.6, 0.3, 0.1],
            vec![0.2, 0.5, 0.3],
            vec![0.05, 0.05, 0.9],
        ];
        let labels = [0usize, 2, 1];
        let mask = [true, true, true];
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();

        let mut tape = Tape::new();
        let p = tape.watch(&Tensor::matrix(3, 3, flat.clone()).unwrap());
        let loss = cross_entropy(&mut tape, &p, &labels, &mask).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let analytic = grads.get(&p).unwrap();

        let h = 1e-6;
        for i in 0..flat.len() {
            let mut up = flat.clone();
            up[i] += h;
            let mut down = flat.clone();
            down[i] -= h;
            let mut inert = Tape::inert();
            let lu = cross_entropy(
                &mut inert,
                &Tensor::matrix(3, 3, up).unwrap(),
                &labels,
                &mask,
            )
            .unwrap()
            .item();
            let ld = cross_entropy(
                &mut inert,
                &Tensor::matrix(3, 3, down).unwrap(),
                &labels,
                &mask,
            )
            .unwrap()
            .item();
            let fd = (lu - ld) / (2.0 * h);
            let ga = analytic.data()[i];
            assert!(
                (ga - fd).abs() / (ga.abs() + fd.abs()).max(1e-8) < 1e-4,
                "entry {i}: analytic {ga} vs fd {fd}"
            );
        }
    }

    #[test]
    fn cross_entropy_clamps_tiny_probabilities_with_zero_gradient() {
        let mut tape = Tape::new();
        let p = tape.watch(&probs_matrix::<f64>(&[&[1e-15, 1.0 - 1e-15]]));
        let loss = cross_entropy(&mut tape, &p, &[0], &[true]).unwrap();
        assert_eq!(loss.item(), -PROB_CLAMP.ln());
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&p).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_ignores_masked_rows_bitwise() {
        let mut tape = Tape::inert();
        let a = probs_matrix::<f64>(&[&[0.7, 0.3], &[0.2, 0.8], &[0.5, 0.5]]);
        let b = probs_matrix::<f64>(&[&[0.7, 0.3], &[0.99, 0.01], &[0.5, 0.5]]);
        let mask = [true, false, true];
        let la = cross_entropy(&mut tape, &a, &[0, 0, 1], &mask).unwrap();
        let lb = cross_entropy(&mut tape, &b, &[0, 1, 1], &mask).unwrap();
        assert_eq!(la.item(), lb.item());
    }

    fn tiny_params(seed: u64) -> ModelParams<f64> {
        let cfg = ModelConfig::new(3, 2, 2, 4, 2, Variant::Full);
        ModelParams::init(cfg, seed).unwrap()
    }

    fn constant_grads(params: &ModelParams<f64>, value: f64) -> Vec<(String, Tensor<f64>)> {
        let mut out = Vec::new();
        params.visit(|name, t| out.push((name, Tensor::filled(t.shape(), value))));
        out
    }

    fn flatten(params: &ModelParams<f64>) -> Vec<f64> {
        let mut out = Vec::new();
        params.visit(|_, t| out.extend_from_slice(t.data()));
        out
    }

    #[test]
    fn adam_zero_gradient_keeps_params_and_decays_moments() {
        let mut params = tiny_params(1);
        let before = flatten(&params);
        let cfg = TrainConfig::default();
        let mut state = OptimizerState::new(&params);

        // Seed the moments with one real step, then apply a zero-gradient
        // step: parameters still move only by the decayed momentum, so
        // freeze them by a zero-lr config to observe pure moment decay.
        let ones = constant_grads(&params, 1.0);
        adam_step(&mut params, &ones, &mut state, &cfg).unwrap();
        let m_after_one = state.m[0].data()[0];
        let s_after_one = state.s[0].data()[0];
        let frozen = TrainConfig { learning_rate: 0.0, ..cfg.clone() };
        let zeros = constant_grads(&params, 0.0);
        adam_step(&mut params, &zeros, &mut state, &frozen).unwrap();
        assert_eq!(state.m[0].data()[0], 0.9 * m_after_one);
        assert_eq!(state.s[0].data()[0], 0.999 * s_after_one);

        // Zero gradient from a fresh state leaves parameters bit-identical.
        let mut fresh = tiny_params(1);
        let mut fresh_state = OptimizerState::new(&fresh);
        let fresh_zeros = constant_grads(&fresh, 0.0);
        adam_step(&mut fresh, &fresh_zeros, &mut fresh_state, &cfg).unwrap();
        assert_eq!(flatten(&fresh), before);
    }

    #[test]
    fn adam_matches_the_scalar_recurrence_oracle() {
        let mut params = tiny_params(2);
        let theta0 = flatten(&params);
        let cfg = TrainConfig::default();
        let mut state = OptimizerState::new(&params);

        // Every element sees g = 1, so each follows the same recurrence.
        // (1 - beta) is spelled as a subtraction to match the update rule
        // bit for bit: 1.0 - 0.9 is not the f64 literal 0.1.
        let oracle = |theta: f64, steps: u32| -> f64 {
            let (mut m, mut s, mut th) = (0.0f64, 0.0f64, theta);
            for t in 1..=steps {
                m = 0.9 * m + (1.0 - 0.9);
                s = 0.999 * s + (1.0 - 0.999);
                let m_hat = m / (1.0 - 0.9f64.powi(t as i32));
                let s_hat = s / (1.0 - 0.999f64.powi(t as i32));
                th -= 1e-3 * m_hat / (s_hat.sqrt() + 1e-8);
            }
            th
        };

        let ones = constant_grads(&params, 1.0);
        adam_step(&mut params, &ones, &mut state, &cfg).unwrap();
        let after1 = flatten(&params);
        for (&got, &t0) in after1.iter().zip(&theta0) {
            assert_eq!(got, oracle(t0, 1));
            // First bias-corrected step moves by almost exactly -lr.
            assert!((got - t0 + 1e-3).abs() < 1e-10);
        }
        adam_step(&mut params, &ones, &mut state, &cfg).unwrap();
        for (&got, &t0) in flatten(&params).iter().zip(&theta0) {
            assert_eq!(got, oracle(t0, 2));
        }
    }

    #[test]
    fn adam_aborts_on_non_finite_gradients() {
        let mut params = tiny_params(3);
        let before = flatten(&params);
        let mut grads = constant_grads(&params, 1.0);
        let shape = grads[2].1.shape().to_vec();
        grads[2].1 = Tensor::new(&shape, vec![f64::NAN; grads[2].1.numel()]).unwrap();
        let mut state = OptimizerState::new(&params);
        let err = adam_step(&mut params, &grads, &mut state, &TrainConfig::default());
        assert!(matches!(err, Err(TrainError::NanGrad { .. })));
        assert_eq!(flatten(&params), before);
        assert_eq!(state.t, 0);
    }

    fn synth_windows(
        cfg: &ModelConfig,
        spec: &SynthSpec,
        seed: u64,
    ) -> Vec<crate::data::SequenceWindow<f32>> {
        synth_generate(spec, seed)
            .unwrap()
            .iter()
            .flat_map(|(seq, track)| window_sequence(seq, track, cfg).unwrap())
            .collect()
    }

    fn tiny_task() -> (ModelConfig, Vec<SequenceWindow<f32>>, Vec<SequenceWindow<f32>>) {
        let cfg = ModelConfig::new(8, 5, 2, 6, 3, Variant::Full);
        let spec = SynthSpec {
            classes: 3,
            feat_dim: 6,
            num_sequences: 4,
            min_len: 30,
            max_len: 50,
            mean_action_len: 5.0,
            noise_sigma: 0.0,
            transitions: TransitionModel::UniformNoRepeat,
        };
        let train_w = synth_windows(&cfg, &spec, 100);
        let val_w = synth_windows(&cfg, &spec, 200);
        (cfg, train_w, val_w)
    }

    #[test]
    fn zero_learning_rate_training_is_an_identity() {
        let (cfg, train_w, val_w) = tiny_task();
        let params = ModelParams::<f32>::init(cfg, 7).unwrap();
        let mut init = Vec::new();
        params.visit(|_, t| init.push(t.clone()));
        let tc = TrainConfig { learning_rate: 0.0, epochs: 2, ..TrainConfig::default() };
        let out = train(params, &train_w, &val_w, &tc).unwrap();
        let mut after = Vec::new();
        out.params.visit(|_, t| after.push(t.clone()));
        assert_eq!(init, after);
        assert_eq!(out.log.len(), 2);
        // Same params every epoch means identical losses and metrics.
        assert_eq!(out.log[0].train_loss, out.log[1].train_loss);
        assert_eq!(out.log[0].val_accuracy, out.log[1].val_accuracy);
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let (cfg, train_w, val_w) = tiny_task();
        let tc = TrainConfig { epochs: 3, ..TrainConfig::default() };
        let run = || {
            let params = ModelParams::<f32>::init(cfg, 7).unwrap();
            train(params, &train_w, &val_w, &tc).unwrap()
        };
        let a = run();
        let b = run();
        for (la, lb) in a.log.iter().zip(&b.log) {
            assert_eq!(la.train_loss, lb.train_loss);
            assert_eq!(la.val_accuracy, lb.val_accuracy);
            assert_eq!(la.val_f1_50, lb.val_f1_50);
        }
        assert_eq!(flatten(&a.params.cast::<f64>()), flatten(&b.params.cast::<f64>()));
    }

    #[test]
    fn batch_accumulation_averages_the_same_losses() {
        let (cfg, train_w, _) = tiny_task();
        let params = ModelParams::<f32>::init(cfg, 7).unwrap();
        let run = |batch: usize| {
            let tc = TrainConfig {
                learning_rate: 0.0,
                epochs: 1,
                batch_size: batch,
                ..TrainConfig::default()
            };
            train(params.clone(), &train_w, &[], &tc).unwrap().log[0].train_loss
        };
        let single = run(1);
        let batched = run(2);
        assert!(
            (single - batched).abs() / single.abs() < 1e-5,
            "batch=1 loss {single} vs batch=2 loss {batched}"
        );
    }

    #[test]
    fn early_stopping_honors_patience() {
        let (cfg, train_w, val_w) = tiny_task();
        let params = ModelParams::<f32>::init(cfg, 7).unwrap();
        let tc = TrainConfig {
            learning_rate: 0.0,
            epochs: 10,
            early_stop_patience: Some(1),
            ..TrainConfig::default()
        };
        let out = train(params, &train_w, &val_w, &tc).unwrap();
        // Constant validation accuracy: best stays at epoch 1, so patience 1
        // stops after epoch 2.
        assert_eq!(out.log.len(), 2);
        assert_eq!(out.best_epoch, 1);
    }

    #[test]
    fn divergence_reports_the_failing_step() {
        let (cfg, train_w, _) = tiny_task();
        let mut params = ModelParams::<f32>::init(cfg, 7).unwrap();
        params.visit_mut(|name, t| {
            if name == "reduce.w" {
                let mut data = t.data().to_vec();
                data[0] = f32::NAN;
                *t = Tensor::new(t.shape(), data).unwrap();
            }
        });
        let err = train(params, &train_w, &[], &TrainConfig::default());
        match err {
            Err(TrainError::Diverged { step: 0, .. }) => {}
            other => panic!("expected divergence at step 0, got {other:?}"),
        }
    }

    #[test]
    fn masked_window_contents_do_not_change_the_loss() {
        let cfg = ModelConfig::new(4, 3, 2, 4, 3, Variant::Full);
        let params = ModelParams::<f32>::init(cfg, 11).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let rows = cfg.window_len();
        let mut feats: Vec<f32> = (0..rows * cfg.feat_dim)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect();
        let mut labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..cfg.classes)).collect();
        let mut mask = vec![true; rows];
        for r in 4..6 {
            mask[r] = false;
        }
        let window = SequenceWindow {
            feats: Tensor::matrix(rows, cfg.feat_dim, feats.clone()).unwrap(),
            labels: labels.clone(),
            mask: mask.clone(),
            origin: ("m".into(), 0),
        };
        let loss_of = |w: &SequenceWindow<f32>| -> f32 {
            let mut tape = Tape::inert();
            let out = params.forward(&mut tape, w).unwrap();
            cross_entropy(&mut tape, &out.probs, &w.labels, &w.mask).unwrap().item()
        };
        let base = loss_of(&window);
        // Fuzz the masked frames' features and labels.
        for r in 4..6 {
            for d in 0..cfg.feat_dim {
                feats[r * cfg.feat_dim + d] = rng.random_range(-100.0..100.0);
            }
            labels[r] = rng.random_range(0..cfg.classes + 1);
        }
        let fuzzed = SequenceWindow {
            feats: Tensor::matrix(rows, cfg.feat_dim, feats).unwrap(),
            labels,
            mask,
            origin: ("m".into(), 0),
        };
        assert_eq!(base, loss_of(&fuzzed));
    }

    #[test]
    fn smoothed_training_loss_is_non_increasing_on_the_noiseless_task() {
        let (cfg, train_w, _) = tiny_task();
        let params = ModelParams::<f32>::init(cfg, 5).unwrap();
        let tc = TrainConfig { epochs: 30, ..TrainConfig::default() };
        let out = train(params, &train_w, &[], &tc).unwrap();
        let losses: Vec<f64> = out.log.iter().map(|l| l.train_loss).collect();
        let smoothed: Vec<f64> = losses
            .windows(5)
            .map(|w| w.iter().sum::<f64>() / w.len() as f64)
            .collect();
        for (i, pair) in smoothed.windows(2).enumerate() {
            assert!(
                pair[1] <= pair[0] + 1e-9,
                "smoothed loss rose at epoch {}: {} -> {}",
                i + 1,
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn gradient_check_passes_and_its_mutation_self_test_trips() {
        let cfg = ModelConfig::new(4, 2, 2, 3, 2, Variant::Full);
        let report = grad_check(cfg, 3).unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "max rel error {} at {}",
            report.max_rel_error,
            report.worst_parameter
        );
        assert!(report.params_checked > 0);

        let mutated = grad_check_mutated(cfg, 3).unwrap();
        assert!(
            mutated.max_rel_error > 1e-2,
            "sabotaged tanh derivative only reached {}",
            mutated.max_rel_error
        );
        assert_eq!(mutated.params_checked, report.params_checked);
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        let bad = TrainConfig { beta1: 1.0, ..ok.clone() };
        assert!(matches!(bad.validate(), Err(TrainError::InvalidConfig { field: "beta1" })));
        let bad = TrainConfig { epochs: 0, ..ok.clone() };
        assert!(matches!(bad.validate(), Err(TrainError::InvalidConfig { field: "epochs" })));
        let bad = TrainConfig { learning_rate: f64::NAN, ..ok };
        assert!(matches!(
            bad.validate(),
            Err(TrainError::InvalidConfig { field: "learning_rate" })
        ));
    }
}
