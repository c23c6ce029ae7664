//! Single-core forward-pass throughput measurement.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::SequenceWindow;
use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Throughput figures from [`bench_inference`].
#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    /// Forward passes measured (excluding one warm-up pass).
    pub windows: usize,
    /// Frames per window for the benchmarked config.
    pub window_frames: usize,
    pub elapsed_s: f64,
    pub windows_per_s: f64,
    pub frames_per_s: f64,
}

/// Runs inference forward passes on random full-length windows and reports
/// throughput.
///
/// A fresh model is initialized from `seed` and driven over a small pool of
/// seeded random windows (all frames real, so every pass does maximal work).
/// After one untimed warm-up pass, passes run until `budget_s` seconds have
/// elapsed or `max_windows` passes finish, whichever comes first; at least
/// one pass is always measured. Single-threaded by construction.
pub fn bench_inference(
    cfg: ModelConfig,
    seed: u64,
    budget_s: f64,
    max_windows: usize,
) -> Result<BenchReport, ModelError> {
    cfg.validate()?;
    let params = ModelParams::<f32>::init(cfg, seed)?;
    let rows = cfg.window_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851f42d4c957f2d);
    let pool: Vec<SequenceWindow<f32>> = (0..2)
        .map(|i| {
            let feats: Vec<f32> =
                (0..rows * cfg.feat_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            SequenceWindow {
                feats: Tensor::matrix(rows, cfg.feat_dim, feats).expect("positive dims"),
                labels: vec![0; rows],
                mask: vec![true; rows],
                origin: (format!("bench-{i}"), 0),
            }
        })
        .collect();

    let mut tape = Tape::inert();
    params.forward(&mut tape, &pool[0])?; // warm-up

    let max_windows = max_windows.max(1);
    let started = Instant::now();
    let mut done = 0usize;
    while done < max_windows {
        params.forward(&mut tape, &pool[done % pool.len()])?;
        done += 1;
        if started.elapsed().as_secs_f64() >= budget_s {
            break;
        }
    }
    let elapsed_s = started.elapsed().as_secs_f64().max(1e-9);
    Ok(BenchReport {
        windows: done,
        window_frames: rows,
        elapsed_s,
        windows_per_s: done as f64 / elapsed_s,
        frames_per_s: (done * rows) as f64 / elapsed_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn reports_consistent_throughput_figures() {
        let cfg = ModelConfig::new(6, 3, 2, 4, 3, Variant::Full);
        let report = bench_inference(cfg, 7, 5.0, 10).unwrap();
        assert_eq!(report.windows, 10);
        assert_eq!(report.window_frames, 6);
        assert!(report.elapsed_s > 0.0);
        assert!(report.windows_per_s > 0.0);
        let ratio = report.frames_per_s / report.windows_per_s;
        assert!((ratio - 6.0).abs() < 1e-9);
    }

    #[test]
    fn budget_caps_the_run_and_one_window_is_always_measured() {
        let cfg = ModelConfig::new(4, 2, 2, 3, 2, Variant::MinusVESE);
        let report = bench_inference(cfg, 1, 0.0, 1_000_000).unwrap();
        assert!(report.windows >= 1);
        assert!(report.windows < 1_000_000);
    }
}
