//! One function per subcommand.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use hanet_core::bench::bench_inference;
use hanet_core::checkpoint::{load_checkpoint, save_checkpoint};
use hanet_core::data::{
    load_pairs, save_features, save_labels, synth_generate, window_sequence, FeatureSequence,
    LabelTrack, SequenceWindow,
};
use hanet_core::metrics::{aggregate, MetricReport, SequenceMetrics};
use hanet_core::model::{DecoderSeed, ModelConfig, ModelParams, Variant};
use hanet_core::sweep::{sweep, sweep_csv, SweepSpec};
use hanet_core::train::{grad_check, grad_check_mutated, TrainConfig};

use crate::cli::{
    BenchArgs, Command, EvalArgs, GradcheckArgs, PredictArgs, SweepArgs, SynthArgs, TrainArgs,
};
use crate::error::CliError;
use crate::export::{predict_sequence, read_prediction, write_prediction};
use crate::jobs::parallel_map;
use crate::settings::Settings;

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Bench(a) => bench(a),
        Command::Sweep(a) => run_sweep(a),
    }
}

/// Fails when the checkpoint's variant differs from an explicitly requested
/// one (the checkpoint is authoritative for everything else).
fn check_variant(cfg: &ModelConfig, wanted: Option<Variant>) -> Result<(), CliError> {
    match wanted {
        Some(v) if v != cfg.variant => Err(CliError::invalid(format!(
            "checkpoint holds a {} model but --variant {} was requested",
            cfg.variant.as_str(),
            v.as_str()
        ))),
        _ => Ok(()),
    }
}

fn ensure_feat_dims(
    pairs: &[(FeatureSequence, LabelTrack)],
    feat_dim: usize,
) -> Result<(), CliError> {
    for (seq, _) in pairs {
        if seq.feat_dim() != feat_dim {
            return Err(CliError::invalid(format!(
                "{}: features are {}-dimensional, the model expects {}",
                seq.source_id,
                seq.feat_dim(),
                feat_dim
            )));
        }
    }
    Ok(())
}

fn ensure_labels_fit(
    pairs: &[(FeatureSequence, LabelTrack)],
    classes: usize,
) -> Result<(), CliError> {
    for (seq, track) in pairs {
        if let Some(&bad) = track.labels.iter().find(|&&l| l >= classes) {
            return Err(CliError::invalid(format!(
                "{}: label {bad} out of range for {classes} classes",
                seq.source_id
            )));
        }
    }
    Ok(())
}

fn windows_of(
    pairs: &[(FeatureSequence, LabelTrack)],
    cfg: &ModelConfig,
) -> Result<Vec<SequenceWindow<f32>>, CliError> {
    let mut windows = Vec::new();
    for (seq, track) in pairs {
        windows.extend(window_sequence(seq, track, cfg)?);
    }
    Ok(windows)
}

fn write_out(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents)
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON serialization");
    text.push('\n');
    write_out(path, &text)
}

fn synth(a: SynthArgs) -> Result<(), CliError> {
    let file = a.common.settings()?;
    let seed = a.common.resolve_seed(&file);
    let spec = a.synth.resolve(&a.shape, &file)?;
    let seqs = synth_generate(&spec, seed)?;
    fs::create_dir_all(&a.out)
        .map_err(|e| CliError::runtime(format!("{}: {e}", a.out.display())))?;
    let mut manifest = String::new();
    let mut frames = 0usize;
    for (i, (seq, track)) in seqs.iter().enumerate() {
        let stem = format!("seq_{i:03}");
        save_features(&a.out.join(format!("{stem}.feat")), seq)
            .map_err(CliError::runtime)?;
        save_labels(&a.out.join(format!("{stem}.labels.txt")), &track.labels)
            .map_err(CliError::runtime)?;
        manifest.push_str(&format!("{stem}.feat\t{stem}.labels.txt\n"));
        frames += seq.num_frames();
    }
    let manifest_path = a.out.join("manifest.tsv");
    write_out(&manifest_path, &manifest)?;
    println!(
        "wrote {} sequences ({frames} frames, {} classes, feat_dim {}) to {}",
        seqs.len(),
        spec.classes,
        spec.feat_dim,
        a.out.display()
    );
    println!("manifest {}", manifest_path.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let file = a.common.settings()?;
    let seed = a.common.resolve_seed(&file);

    let mut pairs = load_pairs(&a.data, usize::MAX)?;
    if pairs.is_empty() {
        return Err(CliError::invalid(format!(
            "{}: manifest lists no sequences",
            a.data.display()
        )));
    }
    let mut val_pairs = Vec::new();
    if let Some(vp) = &a.val {
        val_pairs = load_pairs(vp, usize::MAX)?;
    } else if let Some(k) = a.holdout.or(file.holdout) {
        if k >= pairs.len() {
            return Err(CliError::invalid(format!(
                "holdout {k} must leave at least one of {} sequences for training",
                pairs.len()
            )));
        }
        if k > 0 {
            val_pairs = pairs.split_off(pairs.len() - k);
        }
    }

    // Shape defaults come from the data itself: feature width from the first
    // sequence, class count from the largest label seen anywhere.
    let data_classes = pairs
        .iter()
        .chain(val_pairs.iter())
        .flat_map(|(_, t)| t.labels.iter().copied())
        .max()
        .map(|m| m + 1)
        .ok_or_else(|| CliError::invalid("training data has no labelled frames"))?;
    let base = ModelConfig {
        embed_dim: 32,
        segment_frames: 10,
        segments: 3,
        feat_dim: pairs[0].0.feat_dim(),
        classes: data_classes,
        variant: Variant::Full,
        decoder_seed: DecoderSeed::default(),
    };
    let cfg = a.model.resolve(&a.shape, &file, base)?;
    ensure_feat_dims(&pairs, cfg.feat_dim)?;
    ensure_feat_dims(&val_pairs, cfg.feat_dim)?;
    ensure_labels_fit(&pairs, cfg.classes)?;
    ensure_labels_fit(&val_pairs, cfg.classes)?;

    let train_windows = windows_of(&pairs, &cfg)?;
    let val_windows = windows_of(&val_pairs, &cfg)?;
    let tcfg = a.train.resolve(&file, seed, TrainConfig::default())?;

    let params = ModelParams::<f32>::init(cfg, seed)?;
    println!(
        "training {} ({} parameters) on {} windows ({} validation)",
        cfg.variant.as_str(),
        params.param_count(),
        train_windows.len(),
        val_windows.len()
    );
    let outcome = hanet_core::train::train(params, &train_windows, &val_windows, &tcfg)?;

    for e in &outcome.log {
        let mut line = format!(
            "epoch {}/{} train_loss {:.6}",
            e.epoch, tcfg.epochs, e.train_loss
        );
        if let Some(acc) = e.val_accuracy {
            line.push_str(&format!(" val_accuracy {acc:.2}"));
        }
        if let Some(f1) = e.val_f1_50 {
            line.push_str(&format!(" val_f1_50 {f1:.2}"));
        }
        line.push_str(&format!(" wall_ms {}", e.wall_ms));
        println!("{line}");
    }
    if let Some(acc) = outcome.best_val_accuracy {
        println!(
            "best_epoch {} val_accuracy {acc:.2}",
            outcome.best_epoch
        );
    }

    save_checkpoint(&a.out, &outcome.params).map_err(CliError::runtime)?;
    println!(
        "saved {} ({} parameters)",
        a.out.display(),
        outcome.params.param_count()
    );

    if let Some(path) = &a.log_json {
        let json = serde_json::json!({
            "config": config_json(&cfg),
            "train": tcfg,
            "param_count": outcome.params.param_count(),
            "best_epoch": outcome.best_epoch,
            "best_val_accuracy": outcome.best_val_accuracy,
            "log": outcome.log,
        });
        write_json(path, &json)?;
    }
    Ok(())
}

fn config_json(cfg: &ModelConfig) -> serde_json::Value {
    serde_json::json!({
        "embed_dim": cfg.embed_dim,
        "segment_frames": cfg.segment_frames,
        "segments": cfg.segments,
        "feat_dim": cfg.feat_dim,
        "classes": cfg.classes,
        "variant": cfg.variant.as_str(),
        "decoder_seed": cfg.decoder_seed.as_str(),
    })
}

#[derive(Serialize)]
struct SequenceEntry {
    id: String,
    #[serde(flatten)]
    report: MetricReport,
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let file = a.common.settings()?;
    let threads = a.threads.or(file.threads).unwrap_or(1);
    let mode = a.aggregate.or(file.aggregate).unwrap_or_default();
    let background = a.background.or(file.background);

    let metrics: Vec<SequenceMetrics> = if let Some(ckpt) = &a.model {
        let params = load_checkpoint(ckpt)?;
        check_variant(&params.cfg, a.variant)?;
        let cfg = params.cfg;
        let pairs = load_pairs(&a.data, cfg.classes)?;
        ensure_feat_dims(&pairs, cfg.feat_dim)?;
        parallel_map(&pairs, threads, |_, (seq, track)| {
            let sp = predict_sequence(&params, seq, track, &cfg)?;
            let scores: Vec<f64> = sp.scores.iter().map(|&s| f64::from(s)).collect();
            let mask = vec![true; sp.gt.len()];
            SequenceMetrics::compute(&sp.id, &sp.pred, &sp.gt, &mask, Some(&scores), background)
                .map_err(|e| CliError::invalid(format!("{}: {e}", sp.id)))
        })
        .into_iter()
        .collect::<Result<_, _>>()?
    } else {
        let dir = a.pred.as_ref().expect("--model or --pred is required");
        let pairs = load_pairs(&a.data, usize::MAX)?;
        parallel_map(&pairs, threads, |_, (seq, track)| {
            let (pred, scores) = read_prediction(dir, &seq.source_id)?;
            let real: Vec<usize> = track
                .labels
                .iter()
                .zip(&track.mask)
                .filter(|(_, &m)| m)
                .map(|(&l, _)| l)
                .collect();
            let mask = vec![true; real.len()];
            SequenceMetrics::compute(
                &seq.source_id,
                &pred,
                &real,
                &mask,
                scores.as_deref(),
                background,
            )
            .map_err(|e| CliError::invalid(format!("{}: {e}", seq.source_id)))
        })
        .into_iter()
        .collect::<Result<_, _>>()?
    };

    let summary = aggregate(&metrics, mode)?;
    println!("sequences {}", metrics.len());
    println!("aggregate {}", mode.as_str());
    println!("accuracy {:.4}", summary.accuracy);
    println!("edit {:.4}", summary.edit);
    for (k, v) in &summary.f1 {
        println!("f1@{k} {v:.4}");
    }
    match summary.map_mid {
        Some(m) => println!("map@mid {m:.4}"),
        None => println!("map@mid undefined"),
    }

    if let Some(path) = &a.json {
        let entries: Vec<SequenceEntry> = metrics
            .iter()
            .map(|m| SequenceEntry {
                id: m.id.clone(),
                report: m.report(),
            })
            .collect();
        let json = serde_json::json!({
            "aggregate": mode.as_str(),
            "sequences": entries,
            "summary": summary,
        });
        write_json(path, &json)?;
    }
    Ok(())
}

fn predict(a: PredictArgs) -> Result<(), CliError> {
    let file = a.common.settings()?;
    let threads = a.threads.or(file.threads).unwrap_or(1);
    let params = load_checkpoint(&a.model)?;
    check_variant(&params.cfg, a.variant)?;
    let cfg = params.cfg;
    let pairs = load_pairs(&a.data, cfg.classes)?;
    ensure_feat_dims(&pairs, cfg.feat_dim)?;
    fs::create_dir_all(&a.out)
        .map_err(|e| CliError::runtime(format!("{}: {e}", a.out.display())))?;

    let preds = parallel_map(&pairs, threads, |_, (seq, track)| {
        predict_sequence(&params, seq, track, &cfg)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let mut files = 0;
    for sp in &preds {
        files += write_prediction(&a.out, sp, a.attention)?;
    }
    println!(
        "wrote {files} files for {} sequences to {}",
        preds.len(),
        a.out.display()
    );
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let file = a.common.settings()?;
    let seed = a.common.resolve_seed(&file);
    let cfg = ModelConfig {
        embed_dim: a.embed_dim.or(file.embed_dim).unwrap_or(8),
        segment_frames: a.segment_frames.or(file.segment_frames).unwrap_or(4),
        segments: a.segments.or(file.segments).unwrap_or(3),
        feat_dim: a.shape.feat_dim.or(file.feat_dim).unwrap_or(5),
        classes: a.shape.classes.or(file.classes).unwrap_or(3),
        variant: Variant::Full,
        decoder_seed: a
            .decoder_seed
            .or(file.decoder_seed)
            .unwrap_or_default(),
    };
    cfg.validate()?;

    let variants: Vec<Variant> = match a.variant.as_deref() {
        None => match file.variant {
            Some(v) => vec![v],
            None => vec![Variant::Full, Variant::MinusVE, Variant::MinusVESE],
        },
        Some("all") => vec![Variant::Full, Variant::MinusVE, Variant::MinusVESE],
        Some(name) => vec![name
            .parse::<Variant>()
            .map_err(CliError::invalid)?],
    };

    let mut failed = Vec::new();
    for v in variants {
        let mut cfg = cfg;
        cfg.variant = v;
        let t0 = Instant::now();
        let rep = grad_check(cfg, seed)?;
        let ok = rep.max_rel_error < 1e-4;
        println!(
            "variant {} params_checked {} max_rel_error {:.3e} worst {} elapsed_ms {} {}",
            v.as_str(),
            rep.params_checked,
            rep.max_rel_error,
            rep.worst_parameter,
            t0.elapsed().as_millis(),
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(v.as_str());
        }
        if a.self_test {
            let mu = grad_check_mutated(cfg, seed)?;
            let trips = mu.max_rel_error > 1e-2;
            println!(
                "self_test {} max_rel_error {:.3e} {}",
                v.as_str(),
                mu.max_rel_error,
                if trips { "trips" } else { "MISSED" }
            );
            if !trips {
                return Err(CliError::runtime(format!(
                    "self-test failed: a sabotaged {} gradient went unnoticed",
                    v.as_str()
                )));
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::runtime(format!(
            "gradient check failed for {} (threshold 1e-4)",
            failed.join(", ")
        )))
    }
}

fn bench(a: BenchArgs) -> Result<(), CliError> {
    let (file, preset) = match a.common.config.as_deref() {
        Some(p) if p.as_os_str() == "paper" => (Settings::default(), true),
        other => (Settings::load_opt(other)?, false),
    };
    let seed = a.common.seed.or(file.seed).unwrap_or(0);
    let base = if preset {
        ModelConfig::new(200, 50, 5, 2048, 6, Variant::Full)
    } else {
        ModelConfig::new(32, 10, 3, 16, 3, Variant::Full)
    };
    let cfg = a.model.resolve(&a.shape, &file, base)?;
    let budget_s = a.budget_s.or(file.budget_s).unwrap_or(10.0);
    if !(budget_s > 0.0 && budget_s.is_finite()) {
        return Err(CliError::invalid("budget_s must be positive"));
    }
    let max_windows = a.max_windows.or(file.max_windows).unwrap_or(1_000_000);

    let param_count = ModelParams::<f32>::init(cfg, seed)?.param_count();
    let report = bench_inference(cfg, seed, budget_s, max_windows)?;
    println!(
        "config embed_dim {} segment_frames {} segments {} feat_dim {} classes {} variant {}",
        cfg.embed_dim,
        cfg.segment_frames,
        cfg.segments,
        cfg.feat_dim,
        cfg.classes,
        cfg.variant.as_str()
    );
    println!("params {param_count} window_frames {}", report.window_frames);
    println!(
        "windows {} elapsed_s {:.3} windows_per_s {:.2} frames_per_s {:.1}",
        report.windows, report.elapsed_s, report.windows_per_s, report.frames_per_s
    );
    println!("reference 47.2 windows/s (1000 windows of 250 frames in 21.2 s on one 2.5 GHz core)");

    if let Some(path) = &a.json {
        let json = serde_json::json!({
            "config": config_json(&cfg),
            "param_count": param_count,
            "report": report,
        });
        write_json(path, &json)?;
    }
    Ok(())
}

fn run_sweep(a: SweepArgs) -> Result<(), CliError> {
    let file = a.common.settings()?;
    let seed = a.common.resolve_seed(&file);
    let synth = a.synth.resolve(&a.shape, &file)?;
    let base_default = ModelConfig {
        embed_dim: 32,
        segment_frames: 20,
        segments: 5,
        feat_dim: synth.feat_dim,
        classes: synth.classes,
        variant: Variant::Full,
        decoder_seed: DecoderSeed::default(),
    };
    let base = a.model.resolve(&a.shape, &file, base_default)?;
    let train = a.train.resolve(
        &file,
        seed,
        TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        },
    )?;
    let val_sequences = a
        .val_sequences
        .or(file.val_sequences)
        .unwrap_or_else(|| (synth.num_sequences / 4).max(1));
    let spec = SweepSpec {
        base,
        embed_dims: a
            .embed_dims
            .clone()
            .or(file.embed_dims)
            .unwrap_or_else(|| vec![8, 32, 128]),
        frame_counts: a
            .frame_counts
            .clone()
            .or(file.frame_counts)
            .unwrap_or_else(|| vec![10, 20, 50]),
        segment_counts: a
            .segment_counts
            .clone()
            .or(file.segment_counts)
            .unwrap_or_else(|| vec![2, 5, 8]),
        synth,
        train,
        val_sequences,
    };

    let rows = sweep(&spec, seed)?;
    for r in &rows {
        println!(
            "axis {} embed_dim {} segment_frames {} segments {} val_accuracy {:.2} val_f1_50 {:.2}",
            r.axis, r.embed_dim, r.segment_frames, r.segments, r.val_accuracy, r.val_f1_50
        );
    }
    write_out(&a.out, &sweep_csv(&rows))?;
    println!("swept {} settings -> {}", rows.len(), a.out.display());
    Ok(())
}
