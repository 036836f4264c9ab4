//! Layers assembled from tape primitives: linear maps, layer norm, MLPs,
//! multi-head attention, sinusoidal position encodings, dropout masks.
//!
//! Layers own their parameters as [`Tensor`]s. Before a forward pass the
//! owning model binds every parameter to the tape; layers then reference the
//! recorded node ids.

use rand::Rng;

use super::{NodeId, Tape, Tensor};

/// Walk every parameter with a stable, fully-qualified name.
pub type ParamFn<'a> = &'a mut dyn FnMut(String, &mut Tensor);

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x W (+ b)`, weight stored input-major (d_in, d_out).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Tensor::xavier(d_in, d_out, rng).requires_grad(true),
            bias: bias.then(|| Tensor::zeros(vec![d_out]).requires_grad(true)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let w = self.weight.node().expect("linear layer not bound to tape");
        let y = tape.matmul(x, w);
        match &self.bias {
            Some(b) => {
                let b = b.node().expect("linear bias not bound to tape");
                tape.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamFn) {
        f(format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(format!("{prefix}.bias"), b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::from_vec(vec![dim], vec![1.0; dim]).requires_grad(true),
            beta: Tensor::zeros(vec![dim]).requires_grad(true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let g = self.gamma.node().expect("layer norm not bound to tape");
        let b = self.beta.node().expect("layer norm not bound to tape");
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamFn) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let layers = dims
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], true, rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h);
            if i != last {
                h = tape.relu(h);
            }
        }
        h
    }

    /// Forward with dropout after each hidden activation.
    pub fn forward_dropout<R: Rng>(
        &self,
        tape: &mut Tape,
        x: NodeId,
        dropout: &mut DropoutState<R>,
    ) -> NodeId {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h);
            if i != last {
                h = tape.relu(h);
                h = dropout.apply(tape, h);
            }
        }
        h
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamFn) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params(&format!("{prefix}.{i}"), f);
        }
    }
}

/// Scaled dot-product attention over `heads` feature slices.
///
/// Query/key inputs may be wider than the value input (the decoder feeds
/// content-plus-position concatenations); projections bring everything to
/// `d_model`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(d_qk_in: usize, d_v_in: usize, d_model: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(d_model % heads == 0, "d_model {d_model} not divisible by heads {heads}");
        MultiHeadAttention {
            wq: Linear::new(d_qk_in, d_model, true, rng),
            wk: Linear::new(d_qk_in, d_model, true, rng),
            wv: Linear::new(d_v_in, d_model, true, rng),
            wo: Linear::new(d_model, d_model, true, rng),
            heads,
            d_model,
        }
    }

    /// Returns the attended output and one row-stochastic attention matrix
    /// per head (query rows x key rows).
    pub fn forward(
        &self,
        tape: &mut Tape,
        q_in: NodeId,
        k_in: NodeId,
        v_in: NodeId,
    ) -> (NodeId, Vec<NodeId>) {
        let q = self.wq.forward(tape, q_in);
        let k = self.wk.forward(tape, k_in);
        let v = self.wv.forward(tape, v_in);
        let head_dim = self.d_model / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let mut outputs = Vec::with_capacity(self.heads);
        let mut attns = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let lo = h * head_dim;
            let hi = lo + head_dim;
            let qh = tape.slice_cols(q, lo, hi);
            let kh = tape.slice_cols(k, lo, hi);
            let vh = tape.slice_cols(v, lo, hi);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scaled = tape.mul_scalar(scores, scale);
            let attn = tape.softmax(scaled);
            attns.push(attn);
            outputs.push(tape.matmul(attn, vh));
        }
        let merged = if outputs.len() == 1 {
            outputs[0]
        } else {
            tape.concat_cols(&outputs)
        };
        (self.wo.forward(tape, merged), attns)
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamFn) {
        self.wq.visit_params(&format!("{prefix}.wq"), f);
        self.wk.visit_params(&format!("{prefix}.wk"), f);
        self.wv.visit_params(&format!("{prefix}.wv"), f);
        self.wo.visit_params(&format!("{prefix}.wo"), f);
    }
}

/// Cross-attention whose query/key vectors are a concatenation of projected
/// content and raw positional encodings (per head: `[Wq c_q || p_q]` against
/// `[Wk c_k || p_k]`). Leaving the positional halves unprojected preserves
/// the sinusoid alignment prior: matching positions produce high dot
/// products from the start. Values carry content only.
/// Multiplier on the positional-alignment dot product in
/// [`PositionalCrossAttention`].
pub const POSITIONAL_ATTENTION_GAIN: f64 = 4.0;

/// Frequency base for encodings over the normalized (0, 1) span axis; small
/// enough that every channel resolves within one unit interval.
pub const SPAN_AXIS_PE_BASE: f64 = 20.0;

#[derive(Debug, Clone)]
pub struct PositionalCrossAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl PositionalCrossAttention {
    pub fn new(d_model: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(d_model % heads == 0, "d_model {d_model} not divisible by heads {heads}");
        assert!(
            (d_model / heads) % 2 == 0,
            "head width {} must be even to keep sin/cos pairs together",
            d_model / heads
        );
        PositionalCrossAttention {
            wq: Linear::new(d_model, d_model, true, rng),
            wk: Linear::new(d_model, d_model, true, rng),
            wv: Linear::new(d_model, d_model, true, rng),
            wo: Linear::new(d_model, d_model, true, rng),
            heads,
            d_model,
        }
    }

    /// `content_q`/`pos_q`: (M, d); `content_k`/`pos_k`/`values`: (L, d).
    /// Returns the attended output (M, d) and per-head attention matrices.
    pub fn forward(
        &self,
        tape: &mut Tape,
        content_q: NodeId,
        pos_q: NodeId,
        content_k: NodeId,
        pos_k: NodeId,
        values: NodeId,
    ) -> (NodeId, Vec<NodeId>) {
        let q = self.wq.forward(tape, content_q);
        let k = self.wk.forward(tape, content_k);
        let v = self.wv.forward(tape, values);
        let head_dim = self.d_model / self.heads;
        // Concatenated q/k head width is 2 * head_dim. The positional halves
        // are boosted so the alignment prior is decisive at initialization
        // (the learned gate on pos_q can still attenuate it).
        let scale = 1.0 / (2.0 * head_dim as f64).sqrt();
        let pos_boost = POSITIONAL_ATTENTION_GAIN.sqrt();
        let pos_q = tape.mul_scalar(pos_q, pos_boost);
        let pos_k = tape.mul_scalar(pos_k, pos_boost);

        let mut outputs = Vec::with_capacity(self.heads);
        let mut attns = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let lo = h * head_dim;
            let hi = lo + head_dim;
            let qc = tape.slice_cols(q, lo, hi);
            let qp = tape.slice_cols(pos_q, lo, hi);
            let qh = tape.concat_cols(&[qc, qp]);
            let kc = tape.slice_cols(k, lo, hi);
            let kp = tape.slice_cols(pos_k, lo, hi);
            let kh = tape.concat_cols(&[kc, kp]);
            let vh = tape.slice_cols(v, lo, hi);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scaled = tape.mul_scalar(scores, scale);
            let attn = tape.softmax(scaled);
            attns.push(attn);
            outputs.push(tape.matmul(attn, vh));
        }
        let merged = if outputs.len() == 1 {
            outputs[0]
        } else {
            tape.concat_cols(&outputs)
        };
        (self.wo.forward(tape, merged), attns)
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamFn) {
        self.wq.visit_params(&format!("{prefix}.wq"), f);
        self.wk.visit_params(&format!("{prefix}.wk"), f);
        self.wv.visit_params(&format!("{prefix}.wv"), f);
        self.wo.visit_params(&format!("{prefix}.wo"), f);
    }
}

/// Per-forward dropout configuration. In eval mode (`rate == 0` or
/// `active == false`) it is the identity and records nothing.
pub struct DropoutState<'r, R: Rng> {
    pub rate: f64,
    pub active: bool,
    pub rng: &'r mut R,
}

impl<'r, R: Rng> DropoutState<'r, R> {
    pub fn apply(&mut self, tape: &mut Tape, x: NodeId) -> NodeId {
        if !self.active || self.rate == 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let mask: Vec<f64> = (0..tape.value(x).len())
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        tape.dropout(x, mask)
    }
}

// Object-safe alias used by model code that doesn't care about the rng type.
pub type Dropout<'r> = DropoutState<'r, rand_chacha::ChaCha8Rng>;

/// Interleaved sinusoidal encoding of scalar positions:
/// `enc[2k] = sin(pos * w_k)`, `enc[2k+1] = cos(pos * w_k)` with
/// `w_k = base^(-2k/dim)`. Returns a row per position.
pub fn sinusoidal_encoding_with_base(positions: &[f64], dim: usize, base: f64) -> Vec<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "encoding dim must be even, got {dim}");
    let mut out = vec![0.0; positions.len() * dim];
    for (r, &pos) in positions.iter().enumerate() {
        for k in 0..dim / 2 {
            let omega = base.powf(-((2 * k) as f64) / dim as f64);
            out[r * dim + 2 * k] = (pos * omega).sin();
            out[r * dim + 2 * k + 1] = (pos * omega).cos();
        }
    }
    out
}

/// Standard transformer encoding with base 10000.
pub fn sinusoidal_encoding(positions: &[f64], dim: usize) -> Vec<f64> {
    sinusoidal_encoding_with_base(positions, dim, 10000.0)
}
