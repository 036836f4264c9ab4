//! The full moment-retrieval network.
//!
//! Forward pipeline: project both modalities, fuse them in the encoder, score
//! every frame against the query with the probabilistic frame-query matcher,
//! combine positive and (in training) negative scores into joint frame
//! probabilities, convert those to attention that rescales the frame
//! features, pool video/query context for the alignment score, and decode a
//! fixed set of moment predictions from learnable spans.

mod checkpoint;
mod decoder;
mod encoder;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use decoder::{DecodeOutput, Decoder, DecoderLayer, LearnableSpanSet, PositionalQuery};
pub use encoder::{l2_normalize_rows, EncoderLayer, EncoderStack, InputProjection};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::temporal::{from_center_width, Span};
use crate::tensor::nn::{Dropout, ParamFn};
use crate::tensor::{NodeId, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub num_spans: usize,
    pub feedforward: usize,
    pub dropout: f64,
    pub d_video: usize,
    pub d_text: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 256,
            encoder_layers: 3,
            decoder_layers: 3,
            heads: 8,
            num_spans: 10,
            feedforward: 1024,
            dropout: 0.1,
            d_video: 32,
            d_text: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let fail = |m: String| Err(crate::Error::Config(m));
        if self.hidden == 0 || self.hidden % self.heads != 0 {
            return fail(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            ));
        }
        if self.hidden % 4 != 0 {
            return fail(format!(
                "hidden {} must be divisible by 4 for the span encodings",
                self.hidden
            ));
        }
        if self.num_spans == 0 {
            return fail("num_spans must be at least 1".into());
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return fail("encoder_layers and decoder_layers must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.d_video == 0 || self.d_text == 0 {
            return fail("input dims must be positive".into());
        }
        Ok(())
    }
}

/// Probabilistic frame-query matcher: sigma(tanh(f W1) W2), bias-free.
#[derive(Debug, Clone)]
pub struct Pfm {
    pub w1: Tensor,
    pub w2: Tensor,
}

impl Pfm {
    pub fn new(hidden: usize, rng: &mut impl Rng) -> Self {
        let half = hidden / 2;
        Pfm {
            w1: Tensor::xavier(hidden, half, rng).requires_grad(true),
            w2: Tensor::xavier(half, 1, rng).requires_grad(true),
        }
    }

    /// (L_v, d) frame features -> (L_v,) match probabilities in (0, 1).
    pub fn forward(&self, tape: &mut Tape, frames: NodeId) -> NodeId {
        let w1 = self.w1.node().expect("pfm not bound to tape");
        let w2 = self.w2.node().expect("pfm not bound to tape");
        let h = tape.matmul(frames, w1);
        let h = tape.tanh(h);
        let logits = tape.matmul(h, w2);
        let n = tape.shape(logits)[0];
        let flat = tape.reshape(logits, vec![n]);
        tape.sigmoid(flat)
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamFn) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.w2"), &mut self.w2);
    }
}

/// Joint frame probability p = p_pos * (1 - p_neg); reduces to p_pos exactly
/// (the same tape node) when no negative is available.
pub fn joint_probability(tape: &mut Tape, p_pos: NodeId, p_neg: Option<NodeId>) -> NodeId {
    match p_neg {
        None => p_pos,
        Some(neg) => {
            assert_eq!(
                tape.shape(p_pos),
                tape.shape(neg),
                "joint probability length mismatch {:?} vs {:?}",
                tape.shape(p_pos),
                tape.shape(neg)
            );
            let n = tape.value(neg).len();
            let ones = tape.constant(vec![n], vec![1.0; n]);
            let complement = tape.sub(ones, neg);
            tape.mul(p_pos, complement)
        }
    }
}

/// Softmax over frames turning joint probabilities into attention scores.
pub fn frame_attention(tape: &mut Tape, p_joint: NodeId) -> NodeId {
    tape.softmax(p_joint)
}

/// Attentive pooling: softmax(rows W) as weights, convex combination of rows.
pub fn attentive_pool(tape: &mut Tape, rows: NodeId, w: NodeId) -> NodeId {
    let n = tape.shape(rows)[0];
    let logits = tape.matmul(rows, w);
    let flat = tape.reshape(logits, vec![n]);
    let weights = tape.softmax(flat);
    let row_vec = tape.reshape(weights, vec![1, n]);
    tape.matmul(row_vec, rows)
}

/// Cosine of two (1, d) pooled vectors, as a scalar node.
pub fn semantic_score(tape: &mut Tape, v: NodeId, q: NodeId) -> NodeId {
    assert_eq!(
        tape.shape(v),
        tape.shape(q),
        "semantic score shape mismatch {:?} vs {:?}",
        tape.shape(v),
        tape.shape(q)
    );
    let nv = tape.value(v).iter().map(|x| x * x).sum::<f64>();
    let nq = tape.value(q).iter().map(|x| x * x).sum::<f64>();
    assert!(
        nv > 0.0 && nq > 0.0,
        "semantic score undefined for a zero vector"
    );
    let prod = tape.mul(v, q);
    let dot = tape.sum_all(prod);
    let v2 = tape.mul(v, v);
    let v2s = tape.sum_all(v2);
    let v_norm = tape.sqrt(v2s);
    let q2 = tape.mul(q, q);
    let q2s = tape.sum_all(q2);
    let q_norm = tape.sqrt(q2s);
    let denom = tape.mul(v_norm, q_norm);
    tape.div(dot, denom)
}

/// Per-frame probabilities and attention for one video/query pair.
#[derive(Debug, Clone)]
pub struct FrameProbabilities {
    pub p_pos: Vec<f64>,
    pub p_neg: Option<Vec<f64>>,
    pub p_joint: Vec<f64>,
    pub attention: Vec<f64>,
}

/// One decoded moment: foreground probability plus a normalized span.
#[derive(Debug, Clone)]
pub struct MomentPrediction {
    pub foreground_prob: f64,
    pub span: Span,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Tape handles the training losses hook into, plus extracted values.
pub struct ForwardOutput {
    pub predictions: Vec<MomentPrediction>,
    pub frame_probs: FrameProbabilities,
    /// (M, 2) class logits node; column 0 = foreground.
    pub class_logits: NodeId,
    /// (M, 2) squashed (center, width) node.
    pub span_cw: NodeId,
    /// (L_v,) joint probability node.
    pub p_joint: NodeId,
    /// (L_v, d) attention-rescaled frame features.
    pub frame_features: NodeId,
    /// (1, d) pooled video / query context.
    pub pooled_video: NodeId,
    pub pooled_query: NodeId,
    /// Per-layer, per-head decoder cross-attention matrices (M x L).
    pub cross_attention: Vec<Vec<NodeId>>,
    /// Intermediate-layer (span_cw, class_logits) for auxiliary supervision.
    pub aux: Vec<(NodeId, NodeId)>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub projection: InputProjection,
    pub encoder: EncoderStack,
    pub pfm: Pfm,
    pub pool_video: Tensor,
    pub pool_query: Tensor,
    pub spans: LearnableSpanSet,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        cfg.validate().expect("invalid model config");
        Model {
            projection: InputProjection::new(&cfg, rng),
            encoder: EncoderStack::new(&cfg, rng),
            pfm: Pfm::new(cfg.hidden, rng),
            pool_video: Tensor::xavier(cfg.hidden, 1, rng).requires_grad(true),
            pool_query: Tensor::xavier(cfg.hidden, 1, rng).requires_grad(true),
            spans: LearnableSpanSet::new(cfg.num_spans, rng),
            decoder: Decoder::new(&cfg, rng),
            cfg,
        }
    }

    pub fn visit_params(&mut self, f: ParamFn) {
        self.projection.visit_params("projection", f);
        self.encoder.visit_params("encoder", f);
        self.pfm.visit_params("pfm", f);
        f("pool_video".into(), &mut self.pool_video);
        f("pool_query".into(), &mut self.pool_query);
        self.spans.visit_params("learnable", f);
        self.decoder.visit_params("decoder", f);
    }

    /// Bind every parameter to a fresh tape. Must precede `forward`.
    pub fn bind(&mut self, tape: &mut Tape) {
        self.visit_params(&mut |_, t| {
            t.bind(tape);
        });
    }

    /// Accumulate tape gradients into the parameters after backward.
    pub fn harvest_grads(&mut self, tape: &Tape) {
        self.visit_params(&mut |_, t| {
            t.harvest_grad(tape);
        });
    }

    pub fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| {
            n += t.numel();
        });
        n
    }

    /// Run the full pipeline for one video/query pair.
    ///
    /// In `Infer` mode the negative query is ignored even if supplied and
    /// dropout is disabled. Attention over frames always comes from the
    /// joint probability, which equals the positive path exactly whenever no
    /// negative participates.
    pub fn forward(
        &self,
        tape: &mut Tape,
        video_feats: &Tensor,
        pos_tokens: &Tensor,
        neg_tokens: Option<&Tensor>,
        mode: Mode,
        dropout_rng: &mut ChaCha8Rng,
    ) -> ForwardOutput {
        let l_v = video_feats.shape()[0];
        let mut dropout = Dropout {
            rate: self.cfg.dropout,
            active: mode == Mode::Train,
            rng: dropout_rng,
        };

        // Positive stream.
        let (v, q_pos) = self
            .projection
            .forward(tape, video_feats, pos_tokens, &mut dropout);
        let x_pos = self.encoder.forward(tape, v, q_pos, &mut dropout);
        let v_pos = tape.slice_rows(x_pos, 0, l_v);
        let q_part = tape.slice_rows(x_pos, l_v, tape.shape(x_pos)[0]);
        let p_pos = self.pfm.forward(tape, v_pos);

        // Negative stream only during training and only when available.
        let p_neg = match (mode, neg_tokens) {
            (Mode::Train, Some(neg)) => {
                let (v_n, q_neg) = self.projection.forward(tape, video_feats, neg, &mut dropout);
                let x_neg = self.encoder.forward(tape, v_n, q_neg, &mut dropout);
                let v_neg = tape.slice_rows(x_neg, 0, l_v);
                Some(self.pfm.forward(tape, v_neg))
            }
            _ => None,
        };

        let p_joint = joint_probability(tape, p_pos, p_neg);
        let attention = frame_attention(tape, p_joint);
        let v_scaled = tape.scale_rows(v_pos, attention);

        let pool_v = self.pool_video.node().expect("model not bound");
        let pool_q = self.pool_query.node().expect("model not bound");
        let pooled_video = attentive_pool(tape, v_scaled, pool_v);
        let pooled_query = attentive_pool(tape, q_part, pool_q);

        // Decoder memory: the attention scaling is renormalized by L_v so a
        // uniform o leaves frame rows at the encoder's magnitude instead of
        // shrinking them by 1/L_v; the text rows would otherwise drown out
        // the frame content in the cross-attention values.
        let v_mem = tape.mul_scalar(v_scaled, l_v as f64);
        let memory = tape.concat_rows(&[v_mem, q_part]);
        let text_rows = tape.shape(q_part)[0];
        let decoded = self.decoder.forward(tape, memory, text_rows, &self.spans, &mut dropout);

        let class_probs = tape.softmax(decoded.class_logits);
        let predictions = extract_predictions(tape, class_probs, decoded.span_cw);
        let frame_probs = FrameProbabilities {
            p_pos: tape.value(p_pos).to_vec(),
            p_neg: p_neg.map(|n| tape.value(n).to_vec()),
            p_joint: tape.value(p_joint).to_vec(),
            attention: tape.value(attention).to_vec(),
        };

        ForwardOutput {
            predictions,
            frame_probs,
            class_logits: decoded.class_logits,
            span_cw: decoded.span_cw,
            p_joint,
            frame_features: v_scaled,
            pooled_video,
            pooled_query,
            cross_attention: decoded.cross_attention,
            aux: decoded.aux,
        }
    }
}

fn extract_predictions(tape: &Tape, class_probs: NodeId, span_cw: NodeId) -> Vec<MomentPrediction> {
    let m = tape.shape(span_cw)[0];
    let probs = tape.value(class_probs);
    let cw = tape.value(span_cw);
    (0..m)
        .map(|i| MomentPrediction {
            foreground_prob: probs[i * 2],
            span: from_center_width(cw[i * 2], cw[i * 2 + 1]),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            hidden: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            num_spans: 4,
            feedforward: 32,
            dropout: 0.1,
            d_video: 6,
            d_text: 5,
        }
    }

    fn inputs() -> (Tensor, Tensor, Tensor) {
        let video = Tensor::from_vec(vec![8, 6], (0..48).map(|i| (i as f64 * 0.19).sin()).collect());
        let pos = Tensor::from_vec(vec![3, 5], (0..15).map(|i| (i as f64 * 0.41).cos()).collect());
        let neg = Tensor::from_vec(vec![4, 5], (0..20).map(|i| (i as f64 * 0.57).sin()).collect());
        (video, pos, neg)
    }

    #[test]
    fn pfm_zero_weights_give_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pfm = Pfm::new(16, &mut rng);
        pfm.w1 = Tensor::zeros(vec![16, 8]).requires_grad(true);
        pfm.w2 = Tensor::zeros(vec![8, 1]).requires_grad(true);
        let mut tape = Tape::new();
        pfm.visit_params("pfm", &mut |_, t| {
            t.bind(&mut tape);
        });
        let frames = tape.constant(vec![5, 16], vec![0.7; 80]);
        let p = pfm.forward(&mut tape, frames);
        for v in tape.value(p) {
            assert_abs_diff_eq!(*v, 0.5);
        }
    }

    #[test]
    fn pfm_hand_value() {
        // d = 2, W1 = [[1], [0]], W2 = [[1]], f = [1, 0]:
        // sigma(tanh(1)) ~ 0.6814
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pfm = Pfm::new(2, &mut rng);
        pfm.w1 = Tensor::from_vec(vec![2, 1], vec![1.0, 0.0]).requires_grad(true);
        pfm.w2 = Tensor::from_vec(vec![1, 1], vec![1.0]).requires_grad(true);
        let mut tape = Tape::new();
        pfm.visit_params("pfm", &mut |_, t| {
            t.bind(&mut tape);
        });
        let frames = tape.constant(vec![1, 2], vec![1.0, 0.0]);
        let p = pfm.forward(&mut tape, frames);
        let expected = 1.0 / (1.0 + (-(1f64.tanh())).exp());
        assert_abs_diff_eq!(tape.value(p)[0], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(p)[0], 0.6814, epsilon = 5e-4);
    }

    #[test]
    fn joint_probability_contract() {
        let mut tape = Tape::new();
        let p_pos = tape.constant(vec![3], vec![0.9, 0.5, 0.2]);
        // Absent negative: identical node.
        assert_eq!(joint_probability(&mut tape, p_pos, None), p_pos);

        let zero_neg = tape.constant(vec![3], vec![0.0, 0.0, 0.0]);
        let j = joint_probability(&mut tape, p_pos, Some(zero_neg));
        assert_eq!(tape.value(j), &[0.9, 0.5, 0.2]);

        let one_neg = tape.constant(vec![3], vec![1.0, 1.0, 1.0]);
        let j = joint_probability(&mut tape, p_pos, Some(one_neg));
        assert_eq!(tape.value(j), &[0.0, 0.0, 0.0]);

        let p = tape.constant(vec![1], vec![0.9]);
        let n = tape.constant(vec![1], vec![0.2]);
        let j = joint_probability(&mut tape, p, Some(n));
        assert_abs_diff_eq!(tape.value(j)[0], 0.72, epsilon = 1e-12);
    }

    #[test]
    fn frame_attention_hand_case() {
        let mut tape = Tape::new();
        let p = tape.constant(vec![2], vec![0.0, 2f64.ln()]);
        let o = frame_attention(&mut tape, p);
        assert_abs_diff_eq!(tape.value(o)[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(o)[1], 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn apply_attention_scales_rows() {
        let mut tape = Tape::new();
        let rows = tape.constant(vec![2, 2], vec![1.0, 1.0, 2.0, 2.0]);
        let o = tape.constant(vec![2], vec![0.25, 0.75]);
        let scaled = tape.scale_rows(rows, o);
        assert_eq!(tape.value(scaled), &[0.25, 0.25, 1.5, 1.5]);
    }

    #[test]
    fn attentive_pool_cases() {
        let mut tape = Tape::new();
        // Single row pools to itself.
        let one = tape.constant(vec![1, 3], vec![0.3, -1.0, 2.0]);
        let w = tape.constant(vec![3, 1], vec![0.5, 0.5, 0.5]);
        let pooled = attentive_pool(&mut tape, one, w);
        assert_eq!(tape.value(pooled), &[0.3, -1.0, 2.0]);

        // Zero scorer weights give the arithmetic mean.
        let rows = tape.constant(vec![2, 2], vec![1.0, 3.0, 5.0, 7.0]);
        let w0 = tape.constant(vec![2, 1], vec![0.0, 0.0]);
        let pooled = attentive_pool(&mut tape, rows, w0);
        assert_eq!(tape.value(pooled), &[3.0, 5.0]);

        // Logits (0, ln 3) weight rows 0.25 / 0.75.
        let w1 = tape.constant(vec![2, 1], vec![3f64.ln(), 0.0]);
        let rows2 = tape.constant(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]);
        let pooled = attentive_pool(&mut tape, rows2, w1);
        assert_abs_diff_eq!(tape.value(pooled)[0], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(pooled)[1], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn semantic_score_cases() {
        let mut tape = Tape::new();
        let v = tape.constant(vec![1, 2], vec![1.0, 0.0]);
        let q = tape.constant(vec![1, 2], vec![0.6, 0.8]);
        let s = semantic_score(&mut tape, v, q);
        assert_abs_diff_eq!(tape.scalar_value(s), 0.6, epsilon = 1e-12);

        let same = semantic_score(&mut tape, v, v);
        assert_abs_diff_eq!(tape.scalar_value(same), 1.0, epsilon = 1e-12);

        let neg = tape.constant(vec![1, 2], vec![-1.0, 0.0]);
        let opp = semantic_score(&mut tape, v, neg);
        assert_abs_diff_eq!(tape.scalar_value(opp), -1.0, epsilon = 1e-12);
    }

    #[test]
    #[should_panic(expected = "zero vector")]
    fn semantic_score_rejects_zero_vector() {
        let mut tape = Tape::new();
        let v = tape.constant(vec![1, 2], vec![0.0, 0.0]);
        let q = tape.constant(vec![1, 2], vec![1.0, 0.0]);
        semantic_score(&mut tape, v, q);
    }

    #[test]
    fn forward_shapes_and_infer_substitution() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = Model::new(cfg, &mut rng);
        let (video, pos, neg) = inputs();

        let mut tape = Tape::new();
        model.bind(&mut tape);
        let mut drng = ChaCha8Rng::seed_from_u64(0);
        let out = model.forward(&mut tape, &video, &pos, Some(&neg), Mode::Infer, &mut drng);

        assert_eq!(out.predictions.len(), cfg.num_spans);
        assert_eq!(out.frame_probs.p_joint.len(), 8);
        assert_eq!(tape.shape(out.pooled_video), &[1, 16]);
        assert_eq!(tape.shape(out.pooled_query), &[1, 16]);
        // Inference ignores the negative: p_joint == p_pos bitwise.
        assert!(out.frame_probs.p_neg.is_none());
        assert_eq!(out.frame_probs.p_joint, out.frame_probs.p_pos);
        for p in &out.predictions {
            assert!((0.0..=1.0).contains(&p.foreground_prob));
            assert!(p.span.start <= p.span.end);
            assert!(p.span.start >= 0.0 && p.span.end <= 1.0);
        }
    }

    #[test]
    fn train_without_negative_matches_infer_probabilities() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = Model::new(ModelConfig { dropout: 0.0, ..cfg }, &mut rng);
        let (video, pos, _) = inputs();

        let mut tape = Tape::new();
        model.bind(&mut tape);
        let mut drng = ChaCha8Rng::seed_from_u64(0);
        let train_out = model.forward(&mut tape, &video, &pos, None, Mode::Train, &mut drng);
        let infer_out = model.forward(&mut tape, &video, &pos, None, Mode::Infer, &mut drng);
        assert_eq!(train_out.frame_probs.p_joint, infer_out.frame_probs.p_joint);
    }

    #[test]
    fn joint_probability_monotone_in_negative() {
        // Raising any p_neg entry never raises the joint probability.
        let mut tape = Tape::new();
        let p_pos = tape.constant(vec![3], vec![0.9, 0.5, 0.7]);
        let neg_lo = tape.constant(vec![3], vec![0.1, 0.2, 0.3]);
        let neg_hi = tape.constant(vec![3], vec![0.5, 0.2, 0.3]);
        let j_lo = joint_probability(&mut tape, p_pos, Some(neg_lo));
        let j_hi = joint_probability(&mut tape, p_pos, Some(neg_hi));
        for (lo, hi) in tape.value(j_lo).to_vec().iter().zip(tape.value(j_hi)) {
            assert!(hi <= lo);
        }
    }
}
