//! Input projections and the multimodal transformer encoder.
//!
//! Video and text features are L2-normalized per row, projected into the
//! shared hidden width by two-layer MLPs, and fused by a stack of post-norm
//! transformer layers. Positional encodings are added to the video rows only
//! before concatenation.

use rand::Rng;

use crate::tensor::nn::{
    sinusoidal_encoding, Dropout, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamFn,
};
use crate::tensor::{NodeId, Tape, Tensor};

use super::ModelConfig;

/// L2-normalize each row; zero rows pass through unchanged.
pub fn l2_normalize_rows(features: &Tensor) -> Tensor {
    let shape = features.shape().to_vec();
    let (rows, dim) = (shape[0], shape[1]);
    let mut data = features.data().to_vec();
    for r in 0..rows {
        let row = &mut data[r * dim..(r + 1) * dim];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    Tensor::from_vec(shape, data)
}

/// Two projection MLPs bringing both modalities to the hidden width.
#[derive(Debug, Clone)]
pub struct InputProjection {
    pub video: Mlp,
    pub text: Mlp,
}

impl InputProjection {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        InputProjection {
            video: Mlp::new(&[cfg.d_video, cfg.hidden, cfg.hidden], rng),
            text: Mlp::new(&[cfg.d_text, cfg.hidden, cfg.hidden], rng),
        }
    }

    /// Normalize rows, bind as constants, and project. Returns (V, Q) nodes.
    pub fn forward(
        &self,
        tape: &mut Tape,
        video_feats: &Tensor,
        text_feats: &Tensor,
        dropout: &mut Dropout,
    ) -> (NodeId, NodeId) {
        let v_in = l2_normalize_rows(video_feats);
        let q_in = l2_normalize_rows(text_feats);
        let v = tape.constant(v_in.shape().to_vec(), v_in.data().to_vec());
        let q = tape.constant(q_in.shape().to_vec(), q_in.data().to_vec());
        (
            self.video.forward_dropout(tape, v, dropout),
            self.text.forward_dropout(tape, q, dropout),
        )
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamFn) {
        self.video.visit_params(&format!("{prefix}.video"), f);
        self.text.visit_params(&format!("{prefix}.text"), f);
    }
}

/// Post-norm transformer encoder layer.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        EncoderLayer {
            attn: MultiHeadAttention::new(cfg.hidden, cfg.hidden, cfg.hidden, cfg.heads, rng),
            norm1: LayerNorm::new(cfg.hidden),
            ff1: Linear::new(cfg.hidden, cfg.feedforward, true, rng),
            ff2: Linear::new(cfg.feedforward, cfg.hidden, true, rng),
            norm2: LayerNorm::new(cfg.hidden),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId, dropout: &mut Dropout) -> NodeId {
        let (attn_out, _) = self.attn.forward(tape, x, x, x);
        let attn_out = dropout.apply(tape, attn_out);
        let sum = tape.add(x, attn_out);
        let x = self.norm1.forward(tape, sum);

        let h = self.ff1.forward(tape, x);
        let h = tape.relu(h);
        let h = dropout.apply(tape, h);
        let h = self.ff2.forward(tape, h);
        let h = dropout.apply(tape, h);
        let sum = tape.add(x, h);
        self.norm2.forward(tape, sum)
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamFn) {
        self.attn.visit_params(&format!("{prefix}.attn"), f);
        self.norm1.visit_params(&format!("{prefix}.norm1"), f);
        self.ff1.visit_params(&format!("{prefix}.ff1"), f);
        self.ff2.visit_params(&format!("{prefix}.ff2"), f);
        self.norm2.visit_params(&format!("{prefix}.norm2"), f);
    }
}

#[derive(Debug, Clone)]
pub struct EncoderStack {
    pub layers: Vec<EncoderLayer>,
}

impl EncoderStack {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        EncoderStack {
            layers: (0..cfg.encoder_layers).map(|_| EncoderLayer::new(cfg, rng)).collect(),
        }
    }

    /// `E(PE(V) || Q)`: positional encoding on video rows, sequence concat,
    /// then the layer stack. Row order (video then text) is preserved.
    pub fn forward(
        &self,
        tape: &mut Tape,
        video: NodeId,
        text: NodeId,
        dropout: &mut Dropout,
    ) -> NodeId {
        let (l_v, d) = (tape.shape(video)[0], tape.shape(video)[1]);
        assert_eq!(
            tape.shape(text)[1],
            d,
            "encoder width mismatch: video {:?} vs text {:?}",
            tape.shape(video),
            tape.shape(text)
        );
        let positions: Vec<f64> = (0..l_v).map(|i| i as f64).collect();
        let pe = tape.constant(vec![l_v, d], sinusoidal_encoding(&positions, d));
        let video_pe = tape.add(video, pe);
        let mut x = tape.concat_rows(&[video_pe, text]);
        for layer in &self.layers {
            x = layer.forward(tape, x, dropout);
        }
        x
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamFn) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params(&format!("{prefix}.{i}"), f);
        }
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
            encoder_layers: 2,
            decoder_layers: 1,
            heads: 2,
            num_spans: 3,
            feedforward: 32,
            dropout: 0.1,
            d_video: 6,
            d_text: 5,
        }
    }

    #[test]
    fn normalization_makes_projection_scale_invariant() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut proj = InputProjection::new(&cfg, &mut rng);

        let video = Tensor::from_vec(vec![2, 6], (0..12).map(|i| i as f64 - 3.0).collect());
        let scaled = Tensor::from_vec(vec![2, 6], video.data().iter().map(|v| v * 10.0).collect());
        let text = Tensor::from_vec(vec![2, 5], vec![0.3; 10]);

        let mut tape = Tape::new();
        proj.visit_params("p", &mut |_, t| {
            t.bind(&mut tape);
        });
        let mut rng_d = ChaCha8Rng::seed_from_u64(1);
        let mut drop = Dropout {
            rate: 0.0,
            active: false,
            rng: &mut rng_d,
        };
        let (v1, _) = proj.forward(&mut tape, &video, &text, &mut drop);
        let (v2, _) = proj.forward(&mut tape, &scaled, &text, &mut drop);
        for (a, b) in tape.value(v1).to_vec().iter().zip(tape.value(v2)) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_rows_survive_normalization() {
        let m = Tensor::from_vec(vec![2, 3], vec![0.0, 0.0, 0.0, 3.0, 4.0, 0.0]);
        let n = l2_normalize_rows(&m);
        assert_eq!(&n.data()[0..3], &[0.0, 0.0, 0.0]);
        assert_abs_diff_eq!(n.data()[3], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(n.data()[4], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn encoder_output_has_concatenated_length() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut enc = EncoderStack::new(&cfg, &mut rng);
        let mut tape = Tape::new();
        enc.visit_params("enc", &mut |_, t| {
            t.bind(&mut tape);
        });
        let v = tape.constant(vec![8, 16], vec![0.1; 128]);
        let q = tape.constant(vec![5, 16], vec![0.2; 80]);
        let mut rng_d = ChaCha8Rng::seed_from_u64(1);
        let mut drop = Dropout {
            rate: 0.0,
            active: false,
            rng: &mut rng_d,
        };
        let x = enc.forward(&mut tape, v, q, &mut drop);
        assert_eq!(tape.shape(x), &[13, 16]);
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut enc = EncoderStack::new(&cfg, &mut rng);
        let mut tape = Tape::new();
        enc.visit_params("enc", &mut |_, t| {
            t.bind(&mut tape);
        });
        let v = tape.constant(vec![4, 16], (0..64).map(|i| (i as f64 * 0.13).sin()).collect());
        let q = tape.constant(vec![3, 16], (0..48).map(|i| (i as f64 * 0.29).cos()).collect());
        let mut rng_d = ChaCha8Rng::seed_from_u64(9);
        let mut drop = Dropout {
            rate: 0.1,
            active: false,
            rng: &mut rng_d,
        };
        let a = enc.forward(&mut tape, v, q, &mut drop);
        let b = enc.forward(&mut tape, v, q, &mut drop);
        assert_eq!(tape.value(a), tape.value(b));
    }
}
