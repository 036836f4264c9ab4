//! The training losses, all built on tape ops so gradients are checkable.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{NodeId, Tape};

/// Loss hyper-parameters. The moment-loss coefficients and the class weight
/// follow the published configuration (lambda_l1 = 1, lambda_iou = 8,
/// lambda_cls = 8, margin 0.2, temperature 0.07); the remaining weights
/// default to 1 and are configurable.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_l1: f64,
    pub lambda_iou: f64,
    pub lambda_cls: f64,
    pub margin: f64,
    pub temperature: f64,
    pub w_margin: f64,
    pub w_prob: f64,
    pub w_semantic: f64,
    /// Cross-entropy weight on unmatched (background) predictions.
    pub background_weight: f64,
    /// When set, the contrastive denominator keeps only negative pairs
    /// (the literal reading); default includes the positive pair.
    pub literal_contrastive_denominator: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_l1: 1.0,
            lambda_iou: 8.0,
            lambda_cls: 8.0,
            margin: 0.2,
            temperature: 0.07,
            w_margin: 1.0,
            w_prob: 1.0,
            w_semantic: 1.0,
            background_weight: 0.1,
            literal_contrastive_denominator: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> crate::Result<()> {
        if self.temperature <= 0.0 {
            return Err(crate::Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        for (name, v) in [
            ("lambda_l1", self.lambda_l1),
            ("lambda_iou", self.lambda_iou),
            ("lambda_cls", self.lambda_cls),
            ("w_margin", self.w_margin),
            ("w_prob", self.w_prob),
            ("w_semantic", self.w_semantic),
            ("background_weight", self.background_weight),
        ] {
            if v < 0.0 {
                return Err(crate::Error::Config(format!("{name} {v} must be nonnegative")));
            }
        }
        Ok(())
    }
}

/// Frame indices inside (P) and outside (N) the ground-truth span. A frame
/// belongs to P when its center time lies inside the span, boundary ties
/// included.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameIndexSets {
    pub fore: Vec<usize>,
    pub back: Vec<usize>,
}

impl FrameIndexSets {
    pub fn from_span(gt_start: f64, gt_end: f64, frame_count: usize, frame_duration: f64) -> Self {
        let mut fore = Vec::new();
        let mut back = Vec::new();
        for i in 0..frame_count {
            let center = (i as f64 + 0.5) * frame_duration;
            if gt_start <= center && center <= gt_end {
                fore.push(i);
            } else {
                back.push(i);
            }
        }
        FrameIndexSets { fore, back }
    }
}

/// Split an (M, 2) squashed (center, width) node into per-prediction
/// (start, end) column nodes, each (M, 1).
pub fn spans_to_start_end(tape: &mut Tape, span_cw: NodeId) -> (NodeId, NodeId) {
    let c = tape.slice_cols(span_cw, 0, 1);
    let w = tape.slice_cols(span_cw, 1, 2);
    let half = tape.mul_scalar(w, 0.5);
    let start = tape.sub(c, half);
    let end = tape.add(c, half);
    (start, end)
}

/// Moment localization loss for one matched prediction:
/// `lambda_l1 * (|ds| + |de|) + lambda_iou * (1 - giou)`, on the tape.
pub fn moment_loss(
    tape: &mut Tape,
    pred_start: NodeId,
    pred_end: NodeId,
    gt: (f64, f64),
    w: &LossWeights,
) -> NodeId {
    let gs = tape.constant(vec![1, 1], vec![gt.0]);
    let ge = tape.constant(vec![1, 1], vec![gt.1]);

    let ds = tape.sub(pred_start, gs);
    let ds = tape.abs(ds);
    let de = tape.sub(pred_end, ge);
    let de = tape.abs(de);
    let l1 = tape.add(ds, de);

    // Differentiable generalized IoU of [ps, pe] vs [gs, ge].
    let min_end = tape.min_elem(pred_end, ge);
    let max_start = tape.max_elem(pred_start, gs);
    let raw_inter = tape.sub(min_end, max_start);
    let inter = tape.relu(raw_inter);
    let pred_len = tape.sub(pred_end, pred_start);
    let gt_len = tape.constant(vec![1, 1], vec![gt.1 - gt.0]);
    let lens = tape.add(pred_len, gt_len);
    let union = tape.sub(lens, inter);
    let iou = tape.div(inter, union);
    let max_end = tape.max_elem(pred_end, ge);
    let min_start = tape.min_elem(pred_start, gs);
    let enclosure = tape.sub(max_end, min_start);
    let gap = tape.sub(enclosure, union);
    let gap_frac = tape.div(gap, enclosure);
    let giou = tape.sub(iou, gap_frac);

    let one = tape.constant(vec![1, 1], vec![1.0]);
    let iou_term = tape.sub(one, giou);
    let l1_scaled = tape.mul_scalar(l1, w.lambda_l1);
    let iou_scaled = tape.mul_scalar(iou_term, w.lambda_iou);
    let total = tape.add(l1_scaled, iou_scaled);
    tape.reshape(total, vec![1])
}

/// Weighted two-class cross-entropy over all M predictions: matched ones are
/// foreground (column 0), the rest background (column 1) scaled by the
/// background weight. Mean over predictions.
pub fn class_loss(
    tape: &mut Tape,
    class_logits: NodeId,
    matched_predictions: &[usize],
    w: &LossWeights,
) -> NodeId {
    let m = tape.shape(class_logits)[0];
    let log_probs = tape.log_softmax(class_logits);
    let mut flat = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    for i in 0..m {
        if matched_predictions.contains(&i) {
            flat.push(i * 2);
            weights.push(1.0);
        } else {
            flat.push(i * 2 + 1);
            weights.push(w.background_weight);
        }
    }
    let selected = tape.select_elems(log_probs, &flat);
    let wnode = tape.constant(vec![m], weights);
    let weighted = tape.mul(selected, wnode);
    let sum = tape.sum_all(weighted);
    let neg = tape.neg(sum);
    tape.mul_scalar(neg, 1.0 / m as f64)
}

/// Per-pair hinge between background and foreground frame scores:
/// `mean over pairs of max(0, margin + s_back - s_fore)`. Pairs are the full
/// cross product up to `max_pairs`, then a uniform sample. Empty side -> 0
/// with a warning.
pub fn margin_loss(
    tape: &mut Tape,
    frame_features: NodeId,
    sets: &FrameIndexSets,
    w_margin: NodeId,
    margin: f64,
    max_pairs: usize,
    rng: &mut ChaCha8Rng,
) -> NodeId {
    if sets.fore.is_empty() || sets.back.is_empty() {
        log::warn!("margin loss skipped: degenerate annotation (empty fore or back set)");
        return tape.constant_scalar(0.0);
    }
    let n = tape.shape(frame_features)[0];
    let scores2 = tape.matmul(frame_features, w_margin);
    let scores = tape.reshape(scores2, vec![n]);

    let all_pairs = sets.fore.len() * sets.back.len();
    let (fore_idx, back_idx): (Vec<usize>, Vec<usize>) = if all_pairs <= max_pairs {
        let mut f = Vec::with_capacity(all_pairs);
        let mut b = Vec::with_capacity(all_pairs);
        for &fi in &sets.fore {
            for &bi in &sets.back {
                f.push(fi);
                b.push(bi);
            }
        }
        (f, b)
    } else {
        let mut f = Vec::with_capacity(max_pairs);
        let mut b = Vec::with_capacity(max_pairs);
        for _ in 0..max_pairs {
            f.push(sets.fore[rng.gen_range(0..sets.fore.len())]);
            b.push(sets.back[rng.gen_range(0..sets.back.len())]);
        }
        (f, b)
    };

    let fore = tape.select_elems(scores, &fore_idx);
    let back = tape.select_elems(scores, &back_idx);
    let diff = tape.sub(back, fore);
    let shifted = tape.add_scalar(diff, margin);
    let hinged = tape.relu(shifted);
    tape.mean_all(hinged)
}

/// `1 - mean_P(p) + mean_N(p)`; an empty side contributes only its constant
/// term, with a warning.
pub fn frame_prob_loss(tape: &mut Tape, p_joint: NodeId, sets: &FrameIndexSets) -> NodeId {
    let one = tape.constant_scalar(1.0);
    let mut loss = one;
    if sets.fore.is_empty() {
        log::warn!("frame probability loss: empty foreground set");
    } else {
        let sel = tape.select_elems(p_joint, &sets.fore);
        let mean_p = tape.mean_all(sel);
        loss = tape.sub(loss, mean_p);
    }
    if sets.back.is_empty() {
        log::warn!("frame probability loss: empty background set");
    } else {
        let sel = tape.select_elems(p_joint, &sets.back);
        let mean_n = tape.mean_all(sel);
        loss = tape.add(loss, mean_n);
    }
    loss
}

/// Numerically-stable log-sum-exp of a 1-D node.
fn logsumexp(tape: &mut Tape, x: NodeId) -> NodeId {
    let max = tape
        .value(x)
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let shifted = tape.add_scalar(x, -max);
    let e = tape.exp(shifted);
    let s = tape.sum_all(e);
    let l = tape.ln(s);
    tape.add_scalar(l, max)
}

/// In-batch contrastive loss over pairwise alignment scores.
///
/// `scores[i][j]` is the semantic alignment score of video i against query j
/// (a scalar node); diagonal entries are the positive pairs. Temperature
/// divides every score. The denominator includes the positive pair unless
/// the literal negatives-only reading is requested. Batch of one -> 0 with a
/// warning.
pub fn semantic_alignment_loss(
    tape: &mut Tape,
    scores: &[Vec<NodeId>],
    w: &LossWeights,
) -> NodeId {
    let n = scores.len();
    if n < 2 {
        log::warn!("semantic alignment loss skipped: batch of {n} has no negatives");
        return tape.constant_scalar(0.0);
    }
    let inv_t = 1.0 / w.temperature;
    let mut per_sample = Vec::with_capacity(n);
    for i in 0..n {
        assert_eq!(scores[i].len(), n, "scores matrix must be square");
        let row_scaled: Vec<NodeId> = scores[i]
            .iter()
            .map(|&s| tape.mul_scalar(s, inv_t))
            .collect();
        let pos = row_scaled[i];
        let denom_entries: Vec<NodeId> = if w.literal_contrastive_denominator {
            row_scaled
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, &s)| s)
                .collect()
        } else {
            row_scaled.clone()
        };
        let denom_vec_2d: Vec<NodeId> = denom_entries
            .iter()
            .map(|&s| tape.reshape(s, vec![1]))
            .collect();
        let denom_vec = tape.concat_vec(&denom_vec_2d);
        let lse = logsumexp(tape, denom_vec);
        let log_p = tape.sub(pos, lse);
        per_sample.push(tape.neg(log_p));
    }
    let flat: Vec<NodeId> = per_sample
        .iter()
        .map(|&s| tape.reshape(s, vec![1]))
        .collect();
    let stacked = tape.concat_vec(&flat);
    tape.mean_all(stacked)
}

/// Scalar nodes of every component plus the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub moment: NodeId,
    pub class: NodeId,
    pub margin: NodeId,
    pub prob: NodeId,
    pub semantic: NodeId,
    pub total: NodeId,
}

/// Extracted component values for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    pub moment: f64,
    pub class: f64,
    pub margin: f64,
    pub prob: f64,
    pub semantic: f64,
    pub total: f64,
}

/// `total = lambda_cls * class + moment + w_m * margin + w_p * prob +
/// w_s * semantic` (the moment term carries its lambdas internally).
pub fn total_loss(
    tape: &mut Tape,
    moment: NodeId,
    class: NodeId,
    margin: NodeId,
    prob: NodeId,
    semantic: NodeId,
    w: &LossWeights,
) -> LossNodes {
    let class_scaled = tape.mul_scalar(class, w.lambda_cls);
    let margin_scaled = tape.mul_scalar(margin, w.w_margin);
    let prob_scaled = tape.mul_scalar(prob, w.w_prob);
    let semantic_scaled = tape.mul_scalar(semantic, w.w_semantic);
    let mut total = tape.add(class_scaled, moment);
    total = tape.add(total, margin_scaled);
    total = tape.add(total, prob_scaled);
    total = tape.add(total, semantic_scaled);
    LossNodes {
        moment,
        class,
        margin,
        prob,
        semantic,
        total,
    }
}

impl LossNodes {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            moment: tape.scalar_value(self.moment),
            class: tape.scalar_value(self.class),
            margin: tape.scalar_value(self.margin),
            prob: tape.scalar_value(self.prob),
            semantic: tape.scalar_value(self.semantic),
            total: tape.scalar_value(self.total),
        }
    }
}
