//! Frame-wise and segmental evaluation metrics.
//!
//! Four scores are computed, all reported as percentages in `[0, 100]`:
//!
//! * **frame accuracy** — fraction of unmasked frames labelled correctly;
//! * **segmental F1\@k** — segments matched greedily by IoU at threshold
//!   `k/100`, scored as `2PR/(P+R)`;
//! * **segmental edit score** — normalized Levenshtein similarity between the
//!   ordered class sequences of predicted and ground-truth segments;
//! * **mAP\@mid** — mean average precision where a detection hits if its
//!   midpoint frame falls inside an unmatched same-class ground-truth
//!   segment.
//!
//! Segments are maximal runs of equal labels over mask-true frames; runs
//! never span masked gaps. Aggregation across sequences supports two modes:
//! averaging per-sequence scores, or pooling counts (and detections)
//! corpus-wide before the final division.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

/// IoU thresholds (percent) reported by default.
pub const F1_KS: [u32; 3] = [10, 25, 50];

/// Errors raised by metric computations.
#[derive(Debug, Error)]
pub enum MetricError {
    #[error("length mismatch: predictions cover {pred} frames, ground truth {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("no unmasked frames to evaluate")]
    NoRealFrames,
    #[error("no ground-truth segments to evaluate")]
    NoGroundTruth,
    #[error("no sequences to aggregate")]
    NoSequences,
}

/// A maximal run of one class: frames `start..end` (end exclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub class_id: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn new(class_id: usize, start: usize, end: usize) -> Self {
        assert!(start < end, "segment must cover at least one frame");
        Segment { class_id, start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Midpoint frame index: `floor((start + end - 1) / 2)`.
    pub fn midpoint(&self) -> usize {
        (self.start + self.end - 1) / 2
    }

    /// Intersection-over-union of the two frame intervals.
    pub fn iou(&self, other: &Segment) -> f64 {
        let inter_start = self.start.max(other.start);
        let inter_end = self.end.min(other.end);
        let inter = inter_end.saturating_sub(inter_start);
        let union = self.len() + other.len() - inter;
        inter as f64 / union as f64
    }
}

/// A detection: a segment plus a confidence score in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSegment {
    pub segment: Segment,
    pub score: f64,
}

/// One evaluated sequence's scores, as percentages.
///
/// `map_mid` is `None` when the sequence has no ground-truth segments left
/// after background exclusion (the score is undefined rather than zero).
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub f1: BTreeMap<u32, f64>,
    pub edit: f64,
    pub map_mid: Option<f64>,
}

/// True/false positive and miss counts from segment matching.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub missed: usize,
}

impl MatchCounts {
    /// Both segment lists were empty; the F1 score of 0 is degenerate.
    pub fn is_empty(&self) -> bool {
        self.tp == 0 && self.fp == 0 && self.missed == 0
    }
}

/// Run-length encodes `labels` over mask-true frames.
///
/// Runs are maximal spans of one class; a masked frame always terminates the
/// current run, so segments never bridge masked gaps.
pub fn labels_to_segments(labels: &[usize], mask: &[bool]) -> Vec<Segment> {
    assert_eq!(labels.len(), mask.len(), "labels and mask must align");
    let mut segs = Vec::new();
    let mut open: Option<Segment> = None;
    for (f, (&label, &real)) in labels.iter().zip(mask).enumerate() {
        if !real {
            if let Some(s) = open.take() {
                segs.push(s);
            }
            continue;
        }
        match &mut open {
            Some(s) if s.class_id == label => s.end = f + 1,
            _ => {
                if let Some(s) = open.take() {
                    segs.push(s);
                }
                open = Some(Segment { class_id: label, start: f, end: f + 1 });
            }
        }
    }
    if let Some(s) = open {
        segs.push(s);
    }
    segs
}

/// Percentage of mask-true frames where `pred` equals `gt`.
pub fn frame_accuracy(pred: &[usize], gt: &[usize], mask: &[bool]) -> Result<f64, MetricError> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(MetricError::LengthMismatch { pred: pred.len(), gt: gt.len() });
    }
    let (correct, real) = accuracy_counts(pred, gt, mask);
    if real == 0 {
        return Err(MetricError::NoRealFrames);
    }
    Ok(100.0 * correct as f64 / real as f64)
}

fn accuracy_counts(pred: &[usize], gt: &[usize], mask: &[bool]) -> (usize, usize) {
    let mut correct = 0;
    let mut real = 0;
    for ((&p, &g), &m) in pred.iter().zip(gt).zip(mask) {
        if m {
            real += 1;
            if p == g {
                correct += 1;
            }
        }
    }
    (correct, real)
}

fn keep_foreground<'a>(segs: &'a [Segment], background: Option<usize>) -> Vec<&'a Segment> {
    segs.iter()
        .filter(|s| background != Some(s.class_id))
        .collect()
}

/// Greedy IoU matching at threshold `k/100`.
///
/// Predicted segments are processed in temporal order. Each one matches the
/// not-yet-matched ground-truth segment of its class with the highest IoU
/// (earliest start on ties); it is a true positive if that IoU reaches the
/// threshold, otherwise a false positive. Ground-truth segments left
/// unmatched are misses. Segments of the `background` class, if given, are
/// dropped from both lists first.
pub fn f1_counts(
    pred: &[Segment],
    gt: &[Segment],
    k: f64,
    background: Option<usize>,
) -> MatchCounts {
    let pred = keep_foreground(pred, background);
    let gt = keep_foreground(gt, background);
    let threshold = k / 100.0;
    let mut matched = vec![false; gt.len()];
    let mut counts = MatchCounts::default();
    for p in &pred {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.iter().enumerate() {
            if matched[j] || g.class_id != p.class_id {
                continue;
            }
            let iou = p.iou(g);
            let better = match best {
                None => true,
                Some((_, b)) => iou > b,
            };
            if better {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, iou)) if iou >= threshold => {
                matched[j] = true;
                counts.tp += 1;
            }
            _ => counts.fp += 1,
        }
    }
    counts.missed = matched.iter().filter(|&&m| !m).count();
    counts
}

/// F1 from match counts: `2PR/(P+R)` as a percent, 0 when undefined.
pub fn f1_from_counts(c: MatchCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.missed;
    if denom == 0 {
        return 0.0;
    }
    100.0 * (2 * c.tp) as f64 / denom as f64
}

/// Segmental F1 at IoU threshold `k` percent.
///
/// Empty inputs score 0; use [`f1_counts`] and [`MatchCounts::is_empty`] to
/// tell that apart from a genuine zero.
pub fn f1_at_k(pred: &[Segment], gt: &[Segment], k: f64, background: Option<usize>) -> f64 {
    f1_from_counts(f1_counts(pred, gt, k, background))
}

/// Levenshtein distance between the segment class sequences.
pub fn edit_distance(pred: &[Segment], gt: &[Segment]) -> usize {
    let a: Vec<usize> = pred.iter().map(|s| s.class_id).collect();
    let b: Vec<usize> = gt.iter().map(|s| s.class_id).collect();
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, &ca) in a.iter().enumerate() {
        let mut prev_diag = row[0];
        row[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let cost = if ca == cb { prev_diag } else { prev_diag + 1 };
            prev_diag = row[j + 1];
            row[j + 1] = cost.min(row[j] + 1).min(prev_diag + 1);
        }
    }
    row[b.len()]
}

/// Normalized Levenshtein similarity between class sequences, as a percent.
///
/// `100 · (1 − distance / max(|pred|, |gt|))`; when both lists are empty the
/// score is 100 by convention (nothing to get wrong).
pub fn edit_score(pred: &[Segment], gt: &[Segment]) -> f64 {
    let norm = pred.len().max(gt.len());
    if norm == 0 {
        return 100.0;
    }
    let dist = edit_distance(pred, gt);
    (100.0 * (1.0 - dist as f64 / norm as f64)).clamp(0.0, 100.0)
}

/// Attaches a confidence to each segment: the mean of `frame_scores` over
/// its frames. `frame_scores[f]` is the predicted probability of the label
/// chosen at frame `f`, so for a predicted segment this mean is the mean
/// probability of the segment's own class.
pub fn segment_scores(segs: &[Segment], frame_scores: &[f64]) -> Vec<ScoredSegment> {
    segs.iter()
        .map(|&segment| {
            let sum: f64 = frame_scores[segment.start..segment.end].iter().sum();
            ScoredSegment { segment, score: sum / segment.len() as f64 }
        })
        .collect()
}

/// Ranking key: score descending, then earlier start, then lower class id.
fn rank_order(a: &ScoredSegment, b: &ScoredSegment) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .expect("scores must be finite")
        .then(a.segment.start.cmp(&b.segment.start))
        .then(a.segment.class_id.cmp(&b.segment.class_id))
}

/// All-points-interpolated average precision from ranked hit flags.
///
/// Every hit advances recall by exactly `1/num_gt`, so the area under the
/// interpolated precision-recall curve is the sum, over hits, of the best
/// precision achieved at that recall or beyond, divided by `num_gt` once at
/// the end (keeping the arithmetic identical to an oracle that does the
/// same).
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    assert!(num_gt > 0, "average precision needs ground truth");
    let mut precisions = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &hit) in hits.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
    }
    let mut best = 0.0f64;
    let mut sum = 0.0;
    for (i, &hit) in hits.iter().enumerate().rev() {
        best = best.max(precisions[i]);
        if hit {
            sum += best;
        }
    }
    sum / num_gt as f64
}

/// Mean average precision with the midpoint hit criterion, for one sequence.
///
/// Per class with at least one ground-truth segment: detections of that
/// class are ranked by [`rank_order`], matched greedily to unmatched
/// same-class ground-truth segments containing their midpoint frame, and the
/// ranked hit list is integrated by [`average_precision`]. The mean over
/// those classes is returned as a percent.
pub fn map_at_mid(dets: &[ScoredSegment], gt: &[Segment]) -> Result<f64, MetricError> {
    map_at_mid_pooled(&[(dets.to_vec(), gt.to_vec())])
}

/// Corpus-pooled mAP\@mid: detections of each class are ranked across all
/// sequences (ties broken by start frame, then class id, then sequence
/// order) while hits are still decided against each detection's own
/// sequence's ground truth.
pub fn map_at_mid_pooled(
    seqs: &[(Vec<ScoredSegment>, Vec<Segment>)],
) -> Result<f64, MetricError> {
    let mut classes: Vec<usize> = seqs
        .iter()
        .flat_map(|(_, gt)| gt.iter().map(|g| g.class_id))
        .collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(MetricError::NoGroundTruth);
    }

    let mut aps = Vec::with_capacity(classes.len());
    for &class in &classes {
        // (sequence index, detection), ranked jointly.
        let mut ranked: Vec<(usize, ScoredSegment)> = seqs
            .iter()
            .enumerate()
            .flat_map(|(si, (dets, _))| {
                dets.iter()
                    .filter(|d| d.segment.class_id == class)
                    .map(move |&d| (si, d))
            })
            .collect();
        ranked.sort_by(|a, b| rank_order(&a.1, &b.1).then(a.0.cmp(&b.0)));

        let num_gt: usize = seqs
            .iter()
            .map(|(_, gt)| gt.iter().filter(|g| g.class_id == class).count())
            .sum();
        let mut taken: Vec<Vec<bool>> =
            seqs.iter().map(|(_, gt)| vec![false; gt.len()]).collect();
        let hits: Vec<bool> = ranked
            .iter()
            .map(|(si, d)| {
                let mid = d.segment.midpoint();
                let gt = &seqs[*si].1;
                for (j, g) in gt.iter().enumerate() {
                    if !taken[*si][j] && g.class_id == class && g.start <= mid && mid < g.end {
                        taken[*si][j] = true;
                        return true;
                    }
                }
                false
            })
            .collect();
        aps.push(average_precision(&hits, num_gt));
    }
    // Sum in value order so the mean is bit-identical under any relabeling
    // of class ids (floating addition is order-sensitive).
    aps.sort_by(|a, b| a.partial_cmp(b).expect("AP is finite"));
    Ok(100.0 * aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Raw per-sequence material from which reports and pooled aggregates are
/// computed.
#[derive(Debug, Clone)]
pub struct SequenceMetrics {
    pub id: String,
    pub correct: usize,
    pub real: usize,
    pub f1: BTreeMap<u32, MatchCounts>,
    pub edit_distance: usize,
    pub edit_norm: usize,
    pub detections: Vec<ScoredSegment>,
    pub gt_segments: Vec<Segment>,
}

impl SequenceMetrics {
    /// Evaluates one sequence.
    ///
    /// `frame_scores`, when given, holds the predicted probability of the
    /// chosen label per frame and is used to score detections for mAP;
    /// without it every detection scores 1 and ranking falls back to the
    /// deterministic tie order. `background`, when given, excludes that
    /// class from the segmental metrics (but not from frame accuracy).
    pub fn compute(
        id: &str,
        pred: &[usize],
        gt: &[usize],
        mask: &[bool],
        frame_scores: Option<&[f64]>,
        background: Option<usize>,
    ) -> Result<Self, MetricError> {
        if pred.len() != gt.len() || pred.len() != mask.len() {
            return Err(MetricError::LengthMismatch { pred: pred.len(), gt: gt.len() });
        }
        let (correct, real) = accuracy_counts(pred, gt, mask);
        if real == 0 {
            return Err(MetricError::NoRealFrames);
        }
        let pred_segs = labels_to_segments(pred, mask);
        let gt_segs = labels_to_segments(gt, mask);
        let pred_fg: Vec<Segment> =
            keep_foreground(&pred_segs, background).into_iter().copied().collect();
        let gt_fg: Vec<Segment> =
            keep_foreground(&gt_segs, background).into_iter().copied().collect();

        let mut f1 = BTreeMap::new();
        for k in F1_KS {
            f1.insert(k, f1_counts(&pred_fg, &gt_fg, k as f64, None));
        }
        let detections = match frame_scores {
            Some(scores) => {
                if scores.len() != pred.len() {
                    return Err(MetricError::LengthMismatch {
                        pred: scores.len(),
                        gt: pred.len(),
                    });
                }
                segment_scores(&pred_fg, scores)
            }
            None => pred_fg
                .iter()
                .map(|&segment| ScoredSegment { segment, score: 1.0 })
                .collect(),
        };
        Ok(SequenceMetrics {
            id: id.to_string(),
            correct,
            real,
            f1,
            edit_distance: edit_distance(&pred_fg, &gt_fg),
            edit_norm: pred_fg.len().max(gt_fg.len()),
            detections,
            gt_segments: gt_fg,
        })
    }

    /// This sequence's scores.
    pub fn report(&self) -> MetricReport {
        MetricReport {
            accuracy: 100.0 * self.correct as f64 / self.real as f64,
            f1: self.f1.iter().map(|(&k, &c)| (k, f1_from_counts(c))).collect(),
            edit: if self.edit_norm == 0 {
                100.0
            } else {
                (100.0 * (1.0 - self.edit_distance as f64 / self.edit_norm as f64))
                    .clamp(0.0, 100.0)
            },
            map_mid: map_at_mid(&self.detections, &self.gt_segments).ok(),
        }
    }
}

/// How scores from multiple sequences are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregate {
    /// Arithmetic mean of per-sequence scores (sequences whose mAP is
    /// undefined are skipped for that metric only).
    #[default]
    PerVideo,
    /// Counts, distances, and detections are pooled corpus-wide first, then
    /// each score is computed once.
    Pooled,
}

impl Aggregate {
    pub fn as_str(&self) -> &'static str {
        match self {
            Aggregate::PerVideo => "per-video",
            Aggregate::Pooled => "pooled",
        }
    }
}

impl std::str::FromStr for Aggregate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per-video" => Ok(Aggregate::PerVideo),
            "pooled" => Ok(Aggregate::Pooled),
            other => Err(format!("unknown aggregate mode `{other}` (expected per-video or pooled)")),
        }
    }
}

/// Combines per-sequence metrics into one corpus report.
pub fn aggregate(seqs: &[SequenceMetrics], mode: Aggregate) -> Result<MetricReport, MetricError> {
    if seqs.is_empty() {
        return Err(MetricError::NoSequences);
    }
    match mode {
        Aggregate::PerVideo => {
            let reports: Vec<MetricReport> = seqs.iter().map(|s| s.report()).collect();
            let n = reports.len() as f64;
            let mut f1 = BTreeMap::new();
            for k in F1_KS {
                f1.insert(k, reports.iter().map(|r| r.f1[&k]).sum::<f64>() / n);
            }
            let maps: Vec<f64> = reports.iter().filter_map(|r| r.map_mid).collect();
            Ok(MetricReport {
                accuracy: reports.iter().map(|r| r.accuracy).sum::<f64>() / n,
                f1,
                edit: reports.iter().map(|r| r.edit).sum::<f64>() / n,
                map_mid: if maps.is_empty() {
                    None
                } else {
                    Some(maps.iter().sum::<f64>() / maps.len() as f64)
                },
            })
        }
        Aggregate::Pooled => {
            let correct: usize = seqs.iter().map(|s| s.correct).sum();
            let real: usize = seqs.iter().map(|s| s.real).sum();
            let mut f1 = BTreeMap::new();
            for k in F1_KS {
                let mut total = MatchCounts::default();
                for s in seqs {
                    let c = s.f1[&k];
                    total.tp += c.tp;
                    total.fp += c.fp;
                    total.missed += c.missed;
                }
                f1.insert(k, f1_from_counts(total));
            }
            let dist: usize = seqs.iter().map(|s| s.edit_distance).sum();
            let norm: usize = seqs.iter().map(|s| s.edit_norm).sum();
            let pooled: Vec<(Vec<ScoredSegment>, Vec<Segment>)> = seqs
                .iter()
                .map(|s| (s.detections.clone(), s.gt_segments.clone()))
                .collect();
            Ok(MetricReport {
                accuracy: 100.0 * correct as f64 / real as f64,
                f1,
                edit: if norm == 0 {
                    100.0
                } else {
                    (100.0 * (1.0 - dist as f64 / norm as f64)).clamp(0.0, 100.0)
                },
                map_mid: map_at_mid_pooled(&pooled).ok(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(c: usize, s: usize, e: usize) -> Segment {
        Segment::new(c, s, e)
    }

    #[test]
    fn run_length_encoding_matches_hand_examples() {
        let mask = [true; 6];
        assert_eq!(
            labels_to_segments(&[0, 0, 1, 1, 1, 0], &mask),
            vec![seg(0, 0, 2), seg(1, 2, 5), seg(0, 5, 6)]
        );
        assert_eq!(labels_to_segments(&[2; 6], &mask), vec![seg(2, 0, 6)]);
        // A masked gap splits an otherwise continuous run.
        assert_eq!(
            labels_to_segments(&[0, 0, 0, 0, 0], &[true, true, false, true, true]),
            vec![seg(0, 0, 2), seg(0, 3, 5)]
        );
        assert_eq!(labels_to_segments(&[1, 1], &[false, false]), vec![]);
    }

    #[test]
    fn frame_accuracy_counts_only_real_frames() {
        let gt = [0, 1, 2, 0, 1, 2, 0, 1, 2, 0];
        assert_eq!(frame_accuracy(&gt, &gt, &[true; 10]).unwrap(), 100.0);
        let wrong: Vec<usize> = gt.iter().map(|&g| g + 1).collect();
        assert_eq!(frame_accuracy(&wrong, &gt, &[true; 10]).unwrap(), 0.0);
        let mut half = gt.to_vec();
        for l in half.iter_mut().take(5) {
            *l += 1;
        }
        assert_eq!(frame_accuracy(&half, &gt, &[true; 10]).unwrap(), 50.0);
        // Masked frames don't count either way.
        let mut mask = [true; 10];
        mask[0] = false;
        let mut one_off = gt.to_vec();
        one_off[0] = 9;
        assert_eq!(frame_accuracy(&one_off, &gt, &mask).unwrap(), 100.0);
        assert!(matches!(
            frame_accuracy(&gt, &gt, &[false; 10]),
            Err(MetricError::NoRealFrames)
        ));
        assert!(matches!(
            frame_accuracy(&gt[..5], &gt, &[true; 10]),
            Err(MetricError::LengthMismatch { pred: 5, gt: 10 })
        ));
    }

    #[test]
    fn f1_hand_examples() {
        let gt = [seg(0, 0, 10), seg(1, 10, 20)];
        for k in [10.0, 25.0, 50.0, 100.0] {
            assert_eq!(f1_at_k(&gt, &gt, k, None), 100.0);
        }
        // Disjoint class sets can never match.
        let other = [seg(2, 0, 10), seg(3, 10, 20)];
        assert_eq!(f1_at_k(&other, &gt, 10.0, None), 0.0);
        // One prediction overlaps its ground truth at IoU 0.6, the other at
        // 0; at k=50 that is one TP, one FP, one miss: P = R = 0.5.
        let pred = [seg(0, 0, 6), seg(1, 0, 5)];
        assert_eq!(f1_at_k(&pred, &gt, 50.0, None), 50.0);
        let counts = f1_counts(&pred, &gt, 50.0, None);
        assert_eq!(counts, MatchCounts { tp: 1, fp: 1, missed: 1 });
        // Empty inputs score zero but are flagged as degenerate.
        assert_eq!(f1_at_k(&[], &[], 50.0, None), 0.0);
        assert!(f1_counts(&[], &[], 50.0, None).is_empty());
        assert!(!counts.is_empty());
    }

    #[test]
    fn f1_each_ground_truth_matches_at_most_once() {
        // Two predictions over the same ground-truth segment: only the first
        // (higher IoU taken greedily in temporal order) is a TP.
        let gt = [seg(0, 0, 10)];
        let pred = [seg(0, 0, 10), seg(0, 0, 9)];
        let c = f1_counts(&pred, &gt, 50.0, None);
        assert_eq!(c, MatchCounts { tp: 1, fp: 1, missed: 0 });
    }

    #[test]
    fn f1_background_class_is_excluded_when_asked() {
        let gt = [seg(0, 0, 5), seg(1, 5, 10)];
        let pred = [seg(0, 0, 5), seg(2, 5, 10)];
        // Class 0 excluded as background: prediction of class 2 cannot
        // match the class-1 ground truth.
        let c = f1_counts(&pred, &gt, 50.0, Some(0));
        assert_eq!(c, MatchCounts { tp: 0, fp: 1, missed: 1 });
    }

    #[test]
    fn edit_hand_examples() {
        let a = [seg(0, 0, 3), seg(1, 3, 6)];
        assert_eq!(edit_score(&a, &a), 100.0);
        assert_eq!(edit_score(&[seg(0, 0, 3)], &[seg(1, 0, 3)]), 0.0);
        // [A,B] vs [A,C,B]: one insertion over max length 3.
        let pred = [seg(0, 0, 3), seg(1, 3, 6)];
        let gt = [seg(0, 0, 2), seg(2, 2, 4), seg(1, 4, 6)];
        let got = edit_score(&pred, &gt);
        assert!((got - 100.0 * 2.0 / 3.0).abs() < 1e-12, "{got}");
        assert_eq!(edit_score(&[], &[]), 100.0);
        assert_eq!(edit_distance(&pred, &gt), 1);
    }

    #[test]
    fn map_hand_examples() {
        let gt = [seg(0, 0, 10), seg(1, 10, 20)];
        let dets = [
            ScoredSegment { segment: seg(0, 1, 9), score: 0.9 },
            ScoredSegment { segment: seg(1, 11, 19), score: 0.8 },
        ];
        assert_eq!(map_at_mid(&dets, &gt).unwrap(), 100.0);

        // Midpoints all fall outside ground truth of their class.
        let misses = [ScoredSegment { segment: seg(1, 0, 8), score: 0.9 }];
        assert_eq!(map_at_mid(&misses, &gt).unwrap(), 0.0);

        // Two detections for one ground truth; the higher-scored one hits,
        // so the precision-recall curve is perfect: AP = 1.
        let gt1 = [seg(0, 0, 10)];
        let two = [
            ScoredSegment { segment: seg(0, 2, 8), score: 0.9 },
            ScoredSegment { segment: seg(0, 12, 20), score: 0.4 },
        ];
        assert_eq!(map_at_mid(&two, &gt1).unwrap(), 100.0);
        // Reversed scores: the miss is ranked first, precision at the hit
        // is 1/2, so AP = 0.5.
        let rev = [
            ScoredSegment { segment: seg(0, 2, 8), score: 0.4 },
            ScoredSegment { segment: seg(0, 12, 20), score: 0.9 },
        ];
        assert_eq!(map_at_mid(&rev, &gt1).unwrap(), 50.0);

        assert!(matches!(map_at_mid(&two, &[]), Err(MetricError::NoGroundTruth)));
    }

    #[test]
    fn map_midpoint_convention() {
        assert_eq!(seg(0, 0, 2).midpoint(), 0);
        assert_eq!(seg(0, 2, 5).midpoint(), 3);
        assert_eq!(seg(0, 4, 5).midpoint(), 4);
        // Segment [0,4) has midpoint 1; ground truth [2,4) does not
        // contain it even though the intervals overlap heavily.
        let gt = [seg(0, 2, 4)];
        let det = [ScoredSegment { segment: seg(0, 0, 4), score: 1.0 }];
        assert_eq!(map_at_mid(&det, &gt).unwrap(), 0.0);
    }

    #[test]
    fn detection_scores_are_per_segment_means() {
        let segs = [seg(0, 0, 2), seg(1, 2, 5)];
        let scores = [0.5, 0.7, 0.9, 1.0, 0.8];
        let dets = segment_scores(&segs, &scores);
        assert!((dets[0].score - 0.6).abs() < 1e-12);
        assert!((dets[1].score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn sequence_report_combines_all_four_metrics() {
        let gt = [0, 0, 0, 1, 1, 1];
        let pred = [0, 0, 1, 1, 1, 1];
        let m = SequenceMetrics::compute("s", &pred, &gt, &[true; 6], None, None).unwrap();
        let r = m.report();
        assert!((r.accuracy - 100.0 * 5.0 / 6.0).abs() < 1e-12);
        // Both predicted segments match at IoU >= 2/3 and 3/4.
        assert_eq!(r.f1[&50], 100.0);
        assert_eq!(r.edit, 100.0);
        assert_eq!(r.map_mid, Some(100.0));
    }

    #[test]
    fn aggregate_modes_differ_on_unbalanced_sequences() {
        // Sequence A: 1 of 10 correct. Sequence B: 90 of 90 correct.
        let a = SequenceMetrics::compute(
            "a",
            &[1, 0, 0, 0, 0, 0, 0, 0, 0, 0],
            &[1, 1, 1, 1, 1, 1, 1, 1, 1, 1],
            &[true; 10],
            None,
            None,
        )
        .unwrap();
        let gt_b = vec![0usize; 90];
        let b = SequenceMetrics::compute("b", &gt_b, &gt_b, &[true; 90], None, None).unwrap();
        let seqs = [a, b];
        let per_video = aggregate(&seqs, Aggregate::PerVideo).unwrap();
        let pooled = aggregate(&seqs, Aggregate::Pooled).unwrap();
        assert!((per_video.accuracy - (10.0 + 100.0) / 2.0).abs() < 1e-12);
        assert!((pooled.accuracy - 100.0 * 91.0 / 100.0).abs() < 1e-12);
        assert!(matches!(aggregate(&[], Aggregate::PerVideo), Err(MetricError::NoSequences)));
    }

    fn arb_track(max_classes: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (2..=max_classes).prop_flat_map(|c| {
            (1usize..30).prop_flat_map(move |f| {
                (
                    proptest::collection::vec(0..c, f),
                    proptest::collection::vec(0..c, f),
                )
            })
        })
    }

    proptest! {
        #[test]
        fn metrics_invariant_under_class_relabeling((pred, gt) in arb_track(4), salt in 0u64..1000) {
            let c = 4usize;
            // Deterministic permutation of class ids from the salt.
            let mut perm: Vec<usize> = (0..c).collect();
            for i in (1..c).rev() {
                let j = ((salt >> i) as usize) % (i + 1);
                perm.swap(i, j);
            }
            let mask = vec![true; pred.len()];
            let base = SequenceMetrics::compute("s", &pred, &gt, &mask, None, None)
                .unwrap()
                .report();
            let pred2: Vec<usize> = pred.iter().map(|&l| perm[l]).collect();
            let gt2: Vec<usize> = gt.iter().map(|&l| perm[l]).collect();
            let relabeled = SequenceMetrics::compute("s", &pred2, &gt2, &mask, None, None)
                .unwrap()
                .report();
            prop_assert_eq!(base.accuracy, relabeled.accuracy);
            prop_assert_eq!(base.f1, relabeled.f1);
            prop_assert_eq!(base.edit, relabeled.edit);
            prop_assert_eq!(base.map_mid, relabeled.map_mid);
        }

        #[test]
        fn f1_is_non_increasing_in_k((pred, gt) in arb_track(4)) {
            let mask = vec![true; pred.len()];
            let p = labels_to_segments(&pred, &mask);
            let g = labels_to_segments(&gt, &mask);
            let scores: Vec<f64> = (1..=100).map(|k| f1_at_k(&p, &g, k as f64, None)).collect();
            for w in scores.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12, "{} then {}", w[0], w[1]);
            }
        }

        #[test]
        fn metrics_invariant_under_duration_scaling((pred, gt) in arb_track(4), m in 2usize..5) {
            let mask = vec![true; pred.len()];
            let base = SequenceMetrics::compute("s", &pred, &gt, &mask, None, None)
                .unwrap()
                .report();
            let scale = |xs: &[usize]| -> Vec<usize> {
                xs.iter().flat_map(|&x| std::iter::repeat_n(x, m)).collect()
            };
            let mask2 = vec![true; pred.len() * m];
            let scaled = SequenceMetrics::compute("s", &scale(&pred), &scale(&gt), &mask2, None, None)
                .unwrap()
                .report();
            prop_assert_eq!(base.accuracy, scaled.accuracy);
            prop_assert_eq!(base.f1, scaled.f1);
            prop_assert_eq!(base.edit, scaled.edit);
            prop_assert_eq!(base.map_mid, scaled.map_mid);
        }
    }
}
