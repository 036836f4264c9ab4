//! Evaluation: R@n at IoU thresholds, average precision / mAP over a
//! threshold grid, and the alignment-gap statistic over joint frame
//! probabilities.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::temporal::{iou, Span};

/// Ranked output for one query: spans sorted by score descending (ties broken
/// by original prediction index, which `rank_predictions` enforces).
#[derive(Debug, Clone)]
pub struct RankedPredictions {
    pub spans: Vec<Span>,
    pub scores: Vec<f64>,
}

/// Sort prediction (score, span) pairs by score descending with stable
/// index-order tie breaking.
pub fn rank_predictions(mut preds: Vec<(f64, Span)>) -> RankedPredictions {
    let mut idx: Vec<usize> = (0..preds.len()).collect();
    idx.sort_by(|&a, &b| {
        preds[b].0
            .partial_cmp(&preds[a].0)
            .expect("prediction scores must be comparable")
            .then(a.cmp(&b))
    });
    let spans = idx.iter().map(|&i| preds[i].1).collect();
    let scores = idx.iter().map(|&i| preds[i].0).collect();
    preds.clear();
    RankedPredictions { spans, scores }
}

/// One evaluated query: ranked predictions plus its ground-truth span(s).
#[derive(Debug, Clone)]
pub struct QueryEval {
    pub qid: String,
    pub ranked: RankedPredictions,
    pub gts: Vec<Span>,
}

/// Fraction of queries whose top-n predictions contain one with
/// IoU >= threshold against some ground truth. Queries without predictions
/// count as misses.
pub fn recall_at(n: usize, threshold: f64, queries: &[QueryEval]) -> f64 {
    assert!(n >= 1, "recall_at needs n >= 1");
    if queries.is_empty() {
        return 0.0;
    }
    let hits = queries
        .iter()
        .filter(|q| {
            q.ranked
                .spans
                .iter()
                .take(n)
                .any(|p| q.gts.iter().any(|gt| iou(p, gt) >= threshold))
        })
        .count();
    hits as f64 / queries.len() as f64
}

/// Average precision at one IoU threshold for one query.
///
/// Greedy matching down the ranking: a prediction is a true positive when it
/// reaches IoU >= threshold with a still-unmatched ground truth. The PR curve
/// uses all-point interpolation (monotone non-increasing precision envelope).
/// Returns `None` when the query has no ground truth.
pub fn average_precision(threshold: f64, ranked: &RankedPredictions, gts: &[Span]) -> Option<f64> {
    if gts.is_empty() {
        log::warn!("average_precision: query with zero ground-truth spans excluded");
        return None;
    }
    let mut matched = vec![false; gts.len()];
    let mut is_tp = Vec::with_capacity(ranked.spans.len());
    for pred in &ranked.spans {
        let mut hit = None;
        for (gi, gt) in gts.iter().enumerate() {
            if !matched[gi] && iou(pred, gt) >= threshold {
                hit = Some(gi);
                break;
            }
        }
        match hit {
            Some(gi) => {
                matched[gi] = true;
                is_tp.push(true);
            }
            None => is_tp.push(false),
        }
    }
    Some(ap_from_tp_flags(&is_tp, gts.len()))
}

/// Area under the all-point interpolated PR curve given per-rank TP flags.
fn ap_from_tp_flags(is_tp: &[bool], num_gt: usize) -> f64 {
    assert!(num_gt > 0);
    // PR points at each ranking prefix.
    let mut points = Vec::with_capacity(is_tp.len());
    let mut tp = 0usize;
    for (k, &flag) in is_tp.iter().enumerate() {
        if flag {
            tp += 1;
        }
        let precision = tp as f64 / (k + 1) as f64;
        let recall = tp as f64 / num_gt as f64;
        points.push((recall, precision));
    }
    // Monotone envelope from the right, then sum precision over recall steps.
    let mut ap = 0.0;
    let mut best_precision = 0.0f64;
    let mut prev_recall = points.last().map(|p| p.0).unwrap_or(0.0);
    for &(recall, precision) in points.iter().rev() {
        best_precision = best_precision.max(precision);
        ap += (prev_recall - recall) * best_precision;
        prev_recall = recall;
    }
    // The first segment from recall 0 to the first point's recall.
    ap += prev_recall * best_precision;
    ap
}

/// Mean AP per threshold over queries, plus the average across the grid.
pub fn mean_ap(queries: &[QueryEval], thresholds: &[f64]) -> (BTreeMap<String, f64>, f64) {
    assert!(!thresholds.is_empty(), "mean_ap needs a nonempty threshold grid");
    let mut per_threshold = BTreeMap::new();
    let mut total = 0.0;
    for &t in thresholds {
        let aps: Vec<f64> = queries
            .iter()
            .filter_map(|q| average_precision(t, &q.ranked, &q.gts))
            .collect();
        let map = if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        };
        per_threshold.insert(threshold_key(t), map);
        total += map;
    }
    (per_threshold, total / thresholds.len() as f64)
}

/// Canonical 0.50/0.55/../0.95 grid used for the average mAP.
pub fn default_map_grid() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

pub fn threshold_key(t: f64) -> String {
    format!("{t:.2}")
}

/// Per-query joint frame probabilities with the matching ground truth, for
/// the alignment-gap statistic.
#[derive(Debug, Clone)]
pub struct FrameProbRecord {
    pub p_joint: Vec<f64>,
    pub frame_duration: f64,
    pub gt: Span,
}

/// Mean joint probability of frames inside the ground truth, outside it, and
/// their difference, pooled over all (query, frame) pairs.
pub fn alignment_gap(records: &[FrameProbRecord]) -> (f64, f64, f64) {
    let (mut gt_sum, mut gt_n, mut bg_sum, mut bg_n) = (0.0, 0usize, 0.0, 0usize);
    for rec in records {
        let gt = rec.gt.to_seconds(rec.p_joint.len() as f64 * rec.frame_duration);
        for (i, &p) in rec.p_joint.iter().enumerate() {
            let center = (i as f64 + 0.5) * rec.frame_duration;
            if gt.start <= center && center <= gt.end {
                gt_sum += p;
                gt_n += 1;
            } else {
                bg_sum += p;
                bg_n += 1;
            }
        }
    }
    let gt_mean = if gt_n == 0 { 0.0 } else { gt_sum / gt_n as f64 };
    let bg_mean = if bg_n == 0 { 0.0 } else { bg_sum / bg_n as f64 };
    (gt_mean, bg_mean, gt_mean - bg_mean)
}

/// Full evaluation report, serialized for the CLI.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalResult {
    /// Keyed by "r{n}@{threshold}".
    pub recall: BTreeMap<String, f64>,
    /// Keyed by "{threshold:.2}".
    pub map: BTreeMap<String, f64>,
    pub avg_map: f64,
    pub alignment_gt: f64,
    pub alignment_non_gt: f64,
    pub alignment_gap: f64,
    pub num_queries: usize,
}

pub fn recall_key(n: usize, threshold: f64) -> String {
    format!("r{n}@{threshold:.2}")
}

/// Compute the standard report: R@{1,5} at IoU {0.3, 0.5, 0.7}, mAP at the
/// default grid, and the alignment gap.
pub fn evaluate(queries: &[QueryEval], probs: &[FrameProbRecord]) -> EvalResult {
    let mut recall = BTreeMap::new();
    for &n in &[1usize, 5] {
        for &t in &[0.3, 0.5, 0.7] {
            recall.insert(recall_key(n, t), recall_at(n, t, queries));
        }
    }
    let (map, avg_map) = mean_ap(queries, &default_map_grid());
    let (gt, non_gt, gap) = alignment_gap(probs);
    EvalResult {
        recall,
        map,
        avg_map,
        alignment_gt: gt,
        alignment_non_gt: non_gt,
        alignment_gap: gap,
        num_queries: queries.len(),
    }
}

impl EvalResult {
    /// key=value lines, deterministic order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.recall {
            out.push_str(&format!("{k}={v:.6}\n"));
        }
        for (k, v) in &self.map {
            out.push_str(&format!("map@{k}={v:.6}\n"));
        }
        out.push_str(&format!("avg_map={:.6}\n", self.avg_map));
        out.push_str(&format!("alignment_gt={:.6}\n", self.alignment_gt));
        out.push_str(&format!("alignment_non_gt={:.6}\n", self.alignment_non_gt));
        out.push_str(&format!("alignment_gap={:.6}\n", self.alignment_gap));
        out.push_str(&format!("num_queries={}\n", self.num_queries));
        out
    }
}
