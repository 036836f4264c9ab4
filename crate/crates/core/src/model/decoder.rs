//! Span-anchored transformer decoder.
//!
//! Decoder queries are learnable (center, width) spans kept in an
//! unconstrained parametrization and squashed to (0, 1) by a sigmoid. Each
//! layer runs self-attention over the decoder embeddings (with positional
//! queries derived from the current spans), cross-attention into the fused
//! multimodal features (content and positional parts concatenated on the
//! feature axis), and then refines the spans by an additive offset in the
//! unconstrained space. The refinement and positional-query MLPs are shared
//! across layers.

use rand::Rng;

use crate::tensor::nn::{
    sinusoidal_encoding_with_base, Dropout, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamFn,
    PositionalCrossAttention, SPAN_AXIS_PE_BASE,
};
use crate::tensor::{NodeId, Tape, Tensor};

use super::ModelConfig;

/// Learnable spans: an (M, 2) parameter of unconstrained (center, width)
/// values. Decoder embeddings start at exactly zero every forward pass.
#[derive(Debug, Clone)]
pub struct LearnableSpanSet {
    pub spans: Tensor,
}

impl LearnableSpanSet {
    /// Initial squashed centers tile (0, 1) as an even grid so early
    /// matching is position-stable; widths start uniform in (0.1, 0.35).
    /// Stored as logits.
    pub fn new(num_spans: usize, rng: &mut impl Rng) -> Self {
        let logit = |u: f64| (u / (1.0 - u)).ln();
        let mut data = Vec::with_capacity(num_spans * 2);
        for m in 0..num_spans {
            let center = (m as f64 + 0.5) / num_spans as f64;
            data.push(logit(center));
            data.push(logit(rng.gen_range(0.1..0.35)));
        }
        LearnableSpanSet {
            spans: Tensor::from_vec(vec![num_spans, 2], data).requires_grad(true),
        }
    }

    pub fn num_spans(&self) -> usize {
        self.spans.shape()[0]
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamFn) {
        f(format!("{prefix}.spans"), &mut self.spans);
    }
}

/// Positional query builder: P = MLP(PE(c) || PE(w)), widths d/2 each.
#[derive(Debug, Clone)]
pub struct PositionalQuery {
    pub mlp: Mlp,
    hidden: usize,
}

/// Normalized span coordinates are scaled by 2*pi before the sinusoid so the
/// highest-frequency channel covers one full period over (0, 1).
pub const SPAN_PE_SCALE: f64 = std::f64::consts::TAU;

impl PositionalQuery {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        PositionalQuery {
            mlp: Mlp::new(&[cfg.hidden, cfg.hidden, cfg.hidden], rng),
            hidden: cfg.hidden,
        }
    }

    /// PE(c) || PE(w) for squashed spans (M, 2), before the MLP.
    pub fn raw_encoding(&self, tape: &mut Tape, squashed: NodeId) -> NodeId {
        let m = tape.shape(squashed)[0];
        let c2 = tape.slice_cols(squashed, 0, 1);
        let c = tape.reshape(c2, vec![m]);
        let w2 = tape.slice_cols(squashed, 1, 2);
        let w = tape.reshape(w2, vec![m]);
        let c_scaled = tape.mul_scalar(c, SPAN_PE_SCALE);
        let w_scaled = tape.mul_scalar(w, SPAN_PE_SCALE);
        let pe_c = tape.sinusoidal_pe(c_scaled, self.hidden / 2, SPAN_AXIS_PE_BASE);
        let pe_w = tape.sinusoidal_pe(w_scaled, self.hidden / 2, SPAN_AXIS_PE_BASE);
        tape.concat_cols(&[pe_c, pe_w])
    }

    pub fn forward(&self, tape: &mut Tape, squashed: NodeId) -> NodeId {
        let pe = self.raw_encoding(tape, squashed);
        self.mlp.forward(tape, pe)
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamFn) {
        self.mlp.visit_params(&format!("{prefix}.mlp"), f);
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: PositionalCrossAttention,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        DecoderLayer {
            self_attn: MultiHeadAttention::new(cfg.hidden, cfg.hidden, cfg.hidden, cfg.heads, rng),
            norm1: LayerNorm::new(cfg.hidden),
            // Queries and keys carry content || position (width 2d); values
            // stay width d.
            cross_attn: PositionalCrossAttention::new(cfg.hidden, cfg.heads, rng),
            norm2: LayerNorm::new(cfg.hidden),
            ff1: Linear::new(cfg.hidden, cfg.feedforward, true, rng),
            ff2: Linear::new(cfg.feedforward, cfg.hidden, true, rng),
            norm3: LayerNorm::new(cfg.hidden),
        }
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamFn) {
        self.self_attn.visit_params(&format!("{prefix}.self_attn"), f);
        self.norm1.visit_params(&format!("{prefix}.norm1"), f);
        self.cross_attn.visit_params(&format!("{prefix}.cross_attn"), f);
        self.norm2.visit_params(&format!("{prefix}.norm2"), f);
        self.ff1.visit_params(&format!("{prefix}.ff1"), f);
        self.ff2.visit_params(&format!("{prefix}.ff2"), f);
        self.norm3.visit_params(&format!("{prefix}.norm3"), f);
    }
}

/// Full decoder: layers plus the shared positional-query, modulation,
/// refinement, and classification heads.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    pub pos_query: PositionalQuery,
    /// sigma(MLP(D)) modulation of the positional part of cross-attn queries.
    pub modulation: Mlp,
    /// Shared span-offset head (unconstrained space).
    pub refine: Mlp,
    /// Two-class (foreground, background) logits.
    pub class_head: Mlp,
    hidden: usize,
}

/// Everything the losses need from a decode pass.
pub struct DecodeOutput {
    /// (M, 2) squashed (center, width), final layer.
    pub span_cw: NodeId,
    /// (M, 2) class logits; column 0 is foreground.
    pub class_logits: NodeId,
    /// Per-layer, per-head cross-attention matrices (M x L).
    pub cross_attention: Vec<Vec<NodeId>>,
    /// Intermediate-layer (span_cw, class_logits) pairs for auxiliary
    /// supervision; excludes the final layer.
    pub aux: Vec<(NodeId, NodeId)>,
}

impl Decoder {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        Decoder {
            layers: (0..cfg.decoder_layers).map(|_| DecoderLayer::new(cfg, rng)).collect(),
            pos_query: PositionalQuery::new(cfg, rng),
            modulation: Mlp::new(&[cfg.hidden, cfg.hidden, cfg.hidden], rng),
            refine: Mlp::new(&[cfg.hidden, cfg.hidden, 2], rng),
            class_head: Mlp::new(&[cfg.hidden, cfg.hidden, 2], rng),
            hidden: cfg.hidden,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        memory: NodeId,
        text_rows: usize,
        spans: &LearnableSpanSet,
        dropout: &mut Dropout,
    ) -> DecodeOutput {
        let d = self.hidden;
        let l = tape.shape(memory)[0];
        let m = spans.num_spans();
        assert_eq!(
            tape.shape(memory)[1],
            d,
            "decoder memory width {:?} != hidden {d}",
            tape.shape(memory)
        );

        // Key positions live on the same normalized axis as span centers:
        // video frame j encodes (j + 0.5) / L_v (scaled like the spans);
        // the width half and the text rows carry no position.
        let l_v = l.saturating_sub(text_rows);
        let mut pos_k_data = vec![0.0; l * d];
        for j in 0..l_v {
            let frac = (j as f64 + 0.5) / l_v as f64;
            let enc = sinusoidal_encoding_with_base(&[frac * SPAN_PE_SCALE], d / 2, SPAN_AXIS_PE_BASE);
            pos_k_data[j * d..j * d + d / 2].copy_from_slice(&enc);
        }
        let pos_k = tape.constant(vec![l, d], pos_k_data);

        // Decoder embeddings start at zero; spans start at the learnable
        // parameter and are refined additively layer by layer.
        let mut dec = tape.constant(vec![m, d], vec![0.0; m * d]);
        let mut span_state = spans
            .spans
            .node()
            .expect("learnable spans not bound to tape");

        let mut cross_attention = Vec::with_capacity(self.layers.len());
        let mut aux = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            let squashed = tape.sigmoid(span_state);
            let p = self.pos_query.forward(tape, squashed);

            // Self-attention: Q = K = D + P, V = D.
            let qk = tape.add(dec, p);
            let (sa, _) = layer.self_attn.forward(tape, qk, qk, dec);
            let sa = dropout.apply(tape, sa);
            let sum = tape.add(dec, sa);
            dec = layer.norm1.forward(tape, sum);

            // Cross-attention: Q = D || PE(S) * sigma(MLP(D)), K = X || PE(X),
            // V = X.
            let pe_s = self.pos_query.raw_encoding(tape, squashed);
            let gate_raw = self.modulation.forward(tape, dec);
            let gate = tape.sigmoid(gate_raw);
            let pos_part = tape.mul(pe_s, gate);
            let (ca, attn) = layer
                .cross_attn
                .forward(tape, dec, pos_part, memory, pos_k, memory);
            cross_attention.push(attn);
            let ca = dropout.apply(tape, ca);
            let sum = tape.add(dec, ca);
            dec = layer.norm2.forward(tape, sum);

            // Feedforward.
            let h = layer.ff1.forward(tape, dec);
            let h = tape.relu(h);
            let h = dropout.apply(tape, h);
            let h = layer.ff2.forward(tape, h);
            let h = dropout.apply(tape, h);
            let sum = tape.add(dec, h);
            dec = layer.norm3.forward(tape, sum);

            // Additive span refinement in the unconstrained parametrization.
            let offset = self.refine.forward(tape, dec);
            span_state = tape.add(span_state, offset);

            if li + 1 < self.layers.len() {
                let cw = tape.sigmoid(span_state);
                let logits = self.class_head.forward(tape, dec);
                aux.push((cw, logits));
            }
        }

        let span_cw = tape.sigmoid(span_state);
        let class_logits = self.class_head.forward(tape, dec);
        DecodeOutput {
            span_cw,
            class_logits,
            cross_attention,
            aux,
        }
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamFn) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params(&format!("{prefix}.layers.{i}"), f);
        }
        self.pos_query.visit_params(&format!("{prefix}.pos_query"), f);
        self.modulation.visit_params(&format!("{prefix}.modulation"), f);
        self.refine.visit_params(&format!("{prefix}.refine"), f);
        self.class_head.visit_params(&format!("{prefix}.class_head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            hidden: 16,
            encoder_layers: 1,
            decoder_layers: 2,
            heads: 2,
            num_spans: 4,
            feedforward: 32,
            dropout: 0.0,
            d_video: 6,
            d_text: 5,
        }
    }

    fn no_dropout(rng: &mut ChaCha8Rng) -> Dropout<'_> {
        Dropout {
            rate: 0.0,
            active: false,
            rng,
        }
    }

    #[test]
    fn identical_spans_give_identical_positional_queries() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pq = PositionalQuery::new(&cfg, &mut rng);
        let mut tape = Tape::new();
        pq.visit_params("pq", &mut |_, t| {
            t.bind(&mut tape);
        });
        // Two spans with the same (c, w), one different.
        let squashed = tape.constant(vec![3, 2], vec![0.3, 0.5, 0.3, 0.5, 0.7, 0.2]);
        let p = pq.forward(&mut tape, squashed);
        let vals = tape.value(p);
        assert_eq!(&vals[0..16], &vals[16..32]);
        assert_ne!(&vals[0..16], &vals[32..48]);
    }

    #[test]
    fn raw_encoding_width_is_hidden() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pq = PositionalQuery::new(&cfg, &mut rng);
        let mut tape = Tape::new();
        pq.visit_params("pq", &mut |_, t| {
            t.bind(&mut tape);
        });
        let squashed = tape.constant(vec![2, 2], vec![0.1, 0.2, 0.9, 0.4]);
        let pe = pq.raw_encoding(&mut tape, squashed);
        assert_eq!(tape.shape(pe), &[2, 16]);
        // c = 0 encodes as the (0, 1, 0, 1, ...) pattern pre-MLP.
        let mut tape2 = Tape::new();
        let zero_span = tape2.constant(vec![1, 2], vec![0.0, 0.0]);
        let pe0 = pq.raw_encoding(&mut tape2, zero_span);
        for (i, v) in tape2.value(pe0).iter().enumerate() {
            if i % 2 == 0 {
                assert_abs_diff_eq!(*v, 0.0);
            } else {
                assert_abs_diff_eq!(*v, 1.0);
            }
        }
    }

    #[test]
    fn zero_weight_decoder_preserves_spans() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut dec = Decoder::new(&cfg, &mut rng);
        let mut spans = LearnableSpanSet::new(cfg.num_spans, &mut rng);

        let mut tape = Tape::new();
        dec.visit_params("dec", &mut |_, t| {
            let z = Tensor::zeros(t.shape().to_vec()).requires_grad(true);
            *t = z;
            t.bind(&mut tape);
        });
        spans.visit_params("spans", &mut |_, t| {
            t.bind(&mut tape);
        });

        let memory = tape.constant(vec![6, 16], (0..96).map(|i| (i as f64 * 0.17).sin()).collect());
        let mut rng_d = ChaCha8Rng::seed_from_u64(2);
        let mut drop = no_dropout(&mut rng_d);
        let out = dec.forward(&mut tape, memory, 0, &spans, &mut drop);

        let expected: Vec<f64> = spans
            .spans
            .data()
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        for (a, b) in tape.value(out.span_cw).iter().zip(&expected) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn cross_attention_rows_sum_to_one_over_keys() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut dec = Decoder::new(&cfg, &mut rng);
        let mut spans = LearnableSpanSet::new(cfg.num_spans, &mut rng);

        let mut tape = Tape::new();
        dec.visit_params("dec", &mut |_, t| {
            t.bind(&mut tape);
        });
        spans.visit_params("spans", &mut |_, t| {
            t.bind(&mut tape);
        });
        let l = 7;
        let memory = tape.constant(
            vec![l, 16],
            (0..l * 16).map(|i| (i as f64 * 0.23).cos()).collect(),
        );
        let mut rng_d = ChaCha8Rng::seed_from_u64(4);
        let mut drop = no_dropout(&mut rng_d);
        let out = dec.forward(&mut tape, memory, 0, &spans, &mut drop);

        assert_eq!(tape.shape(out.class_logits), &[cfg.num_spans, 2]);
        assert_eq!(tape.shape(out.span_cw), &[cfg.num_spans, 2]);
        assert_eq!(out.cross_attention.len(), cfg.decoder_layers);
        for layer_attn in &out.cross_attention {
            assert_eq!(layer_attn.len(), cfg.heads);
            for &attn in layer_attn {
                assert_eq!(tape.shape(attn), &[cfg.num_spans, l]);
                let vals = tape.value(attn);
                for row in 0..cfg.num_spans {
                    let s: f64 = vals[row * l..(row + 1) * l].iter().sum();
                    assert_abs_diff_eq!(s, 1.0, epsilon = 1e-9);
                }
            }
        }
    }
}
