//! Operation tape for reverse-mode differentiation.
//!
//! Every op appends a node holding the output value and enough metadata to
//! compute vector-Jacobian products in reverse. Nodes are topologically
//! ordered by construction: an op can only reference ids that already exist.

/// Index of a node on the tape.
pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// (n, d) matrix plus a length-d row vector broadcast over rows.
    AddRow(NodeId, NodeId),
    /// Row i of an (n, d) matrix scaled by entry i of a length-n vector.
    ScaleRows(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    Neg(NodeId),
    Abs(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    /// Elementwise max; ties route the gradient to the first input.
    MaxElem(NodeId, NodeId),
    MinElem(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// Sum of a (n, d) matrix over `axis` (0 -> length-d, 1 -> length-n).
    SumAxis(NodeId, usize),
    MeanAxis(NodeId, usize),
    /// Softmax along the last axis (whole vector for 1-D, rows for 2-D).
    Softmax(NodeId),
    LogSoftmax(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    ConcatVec(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    /// Gather rows by index; repeats allowed, backward scatter-adds.
    SelectRows(NodeId, Vec<usize>),
    /// Gather scalar entries by flat index into a 1-D output.
    SelectElems(NodeId, Vec<usize>),
    Reshape(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    /// Inverted-dropout mask of 0 / (1/keep) factors, applied elementwise.
    Dropout(NodeId, Vec<f64>),
    /// Interleaved sin/cos encoding of 1-D positions into (n, dim) rows.
    SinusoidalPe(NodeId, usize, f64),
}

#[derive(Debug)]
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Records a forward computation and replays it in reverse for gradients.
///
/// Confined to a single thread; build a fresh tape per training step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        other => panic!("expected 1-D or 2-D tensor, got shape {:?}", other),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = self.nodes.len();
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            grad: None,
            op,
        });
        id
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> NodeId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "leaf data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.push(shape, data, requires_grad, Op::Leaf)
    }

    /// Untracked constant.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        self.leaf(shape, data, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> NodeId {
        self.leaf(vec![1], vec![value], false)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        assert_eq!(
            self.nodes[id].data.len(),
            1,
            "expected scalar node, got shape {:?}",
            self.nodes[id].shape
        );
        self.nodes[id].data[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    fn assert_same_shape(&self, a: NodeId, b: NodeId, op: &str) {
        assert_eq!(
            self.nodes[a].shape, self.nodes[b].shape,
            "{op}: shape mismatch {:?} vs {:?}",
            self.nodes[a].shape, self.nodes[b].shape
        );
    }

    // ── Elementwise binary ──────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape(a, b, "add");
        let data = zip_map(&self.nodes[a].data, &self.nodes[b].data, |x, y| x + y);
        self.push(
            self.nodes[a].shape.clone(),
            data,
            self.needs(&[a, b]),
            Op::Add(a, b),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape(a, b, "sub");
        let data = zip_map(&self.nodes[a].data, &self.nodes[b].data, |x, y| x - y);
        self.push(
            self.nodes[a].shape.clone(),
            data,
            self.needs(&[a, b]),
            Op::Sub(a, b),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape(a, b, "mul");
        let data = zip_map(&self.nodes[a].data, &self.nodes[b].data, |x, y| x * y);
        self.push(
            self.nodes[a].shape.clone(),
            data,
            self.needs(&[a, b]),
            Op::Mul(a, b),
        )
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape(a, b, "div");
        let data = zip_map(&self.nodes[a].data, &self.nodes[b].data, |x, y| x / y);
        self.push(
            self.nodes[a].shape.clone(),
            data,
            self.needs(&[a, b]),
            Op::Div(a, b),
        )
    }

    pub fn max_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape(a, b, "max_elem");
        let data = zip_map(&self.nodes[a].data, &self.nodes[b].data, |x, y| x.max(*y));
        self.push(
            self.nodes[a].shape.clone(),
            data,
            self.needs(&[a, b]),
            Op::MaxElem(a, b),
        )
    }

    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape(a, b, "min_elem");
        let data = zip_map(&self.nodes[a].data, &self.nodes[b].data, |x, y| x.min(*y));
        self.push(
            self.nodes[a].shape.clone(),
            data,
            self.needs(&[a, b]),
            Op::MinElem(a, b),
        )
    }

    /// `(n, d) + (d,)`, the vector broadcast across rows.
    pub fn add_row(&mut self, m: NodeId, row: NodeId) -> NodeId {
        let (n, d) = rows_cols(&self.nodes[m].shape);
        assert_eq!(
            self.nodes[row].shape,
            vec![d],
            "add_row: shape mismatch {:?} vs {:?}",
            self.nodes[m].shape,
            self.nodes[row].shape
        );
        let mut data = self.nodes[m].data.clone();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += self.nodes[row].data[j];
            }
        }
        self.push(
            self.nodes[m].shape.clone(),
            data,
            self.needs(&[m, row]),
            Op::AddRow(m, row),
        )
    }

    /// `(n, d)` with row i scaled by `scale[i]`.
    pub fn scale_rows(&mut self, m: NodeId, scale: NodeId) -> NodeId {
        let (n, d) = rows_cols(&self.nodes[m].shape);
        assert_eq!(
            self.nodes[scale].shape,
            vec![n],
            "scale_rows: shape mismatch {:?} vs {:?}",
            self.nodes[m].shape,
            self.nodes[scale].shape
        );
        let mut data = self.nodes[m].data.clone();
        for i in 0..n {
            let s = self.nodes[scale].data[i];
            for j in 0..d {
                data[i * d + j] *= s;
            }
        }
        self.push(
            self.nodes[m].shape.clone(),
            data,
            self.needs(&[m, scale]),
            Op::ScaleRows(m, scale),
        )
    }

    // ── Scalar and unary ────────────────────────────────────────────────

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.nodes[a].data.iter().map(|x| x + c).collect();
        self.push(
            self.nodes[a].shape.clone(),
            data,
            self.needs(&[a]),
            Op::AddScalar(a),
        )
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.nodes[a].data.iter().map(|x| x * c).collect();
        self.push(
            self.nodes[a].shape.clone(),
            data,
            self.needs(&[a]),
            Op::MulScalar(a, c),
        )
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a].data.iter().map(|x| -x).collect();
        self.push(
            self.nodes[a].shape.clone(),
            data,
            self.needs(&[a]),
            Op::Neg(a),
        )
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a].data.iter().map(|x| x.abs()).collect();
        self.push(
            self.nodes[a].shape.clone(),
            data,
            self.needs(&[a]),
            Op::Abs(a),
        )
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a].data.iter().map(|x| x.exp()).collect();
        self.push(
            self.nodes[a].shape.clone(),
            data,
            self.needs(&[a]),
            Op::Exp(a),
        )
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a].data.iter().map(|x| x.ln()).collect();
        self.push(
            self.nodes[a].shape.clone(),
            data,
            self.needs(&[a]),
            Op::Ln(a),
        )
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a].data.iter().map(|x| x.sqrt()).collect();
        self.push(
            self.nodes[a].shape.clone(),
            data,
            self.needs(&[a]),
            Op::Sqrt(a),
        )
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a].data.iter().map(|x| x.tanh()).collect();
        self.push(
            self.nodes[a].shape.clone(),
            data,
            self.needs(&[a]),
            Op::Tanh(a),
        )
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a]
            .data
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        self.push(
            self.nodes[a].shape.clone(),
            data,
            self.needs(&[a]),
            Op::Sigmoid(a),
        )
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a].data.iter().map(|x| x.max(0.0)).collect();
        self.push(
            self.nodes[a].shape.clone(),
            data,
            self.needs(&[a]),
            Op::Relu(a),
        )
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = match self.nodes[a].shape[..] {
            [m, k] => (m, k),
            ref s => panic!("matmul lhs must be 2-D, got {:?}", s),
        };
        let (k2, n) = match self.nodes[b].shape[..] {
            [k2, n] => (k2, n),
            ref s => panic!("matmul rhs must be 2-D, got {:?}", s),
        };
        assert_eq!(
            k, k2,
            "matmul: shape mismatch {:?} vs {:?}",
            self.nodes[a].shape, self.nodes[b].shape
        );
        let data = matmul_raw(&self.nodes[a].data, &self.nodes[b].data, m, k, n);
        self.push(vec![m, n], data, self.needs(&[a, b]), Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = match self.nodes[a].shape[..] {
            [r, c] => (r, c),
            ref s => panic!("transpose requires 2-D, got {:?}", s),
        };
        let src = &self.nodes[a].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.push(vec![c, r], data, self.needs(&[a]), Op::Transpose(a))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].data.iter().sum();
        self.push(vec![1], vec![s], self.needs(&[a]), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a].data.len();
        assert!(n > 0, "mean over empty tensor");
        let s: f64 = self.nodes[a].data.iter().sum();
        self.push(
            vec![1],
            vec![s / n as f64],
            self.needs(&[a]),
            Op::MeanAll(a),
        )
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        let (r, c) = match self.nodes[a].shape[..] {
            [r, c] => (r, c),
            ref s => panic!("sum_axis requires 2-D, got {:?}", s),
        };
        assert!(axis < 2, "sum_axis: axis {axis} out of range");
        let src = &self.nodes[a].data;
        let (len, data) = if axis == 0 {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += src[i * c + j];
                }
            }
            (c, out)
        } else {
            let mut out = vec![0.0; r];
            for i in 0..r {
                out[i] = src[i * c..(i + 1) * c].iter().sum();
            }
            (r, out)
        };
        self.push(vec![len], data, self.needs(&[a]), Op::SumAxis(a, axis))
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        let (r, c) = match self.nodes[a].shape[..] {
            [r, c] => (r, c),
            ref s => panic!("mean_axis requires 2-D, got {:?}", s),
        };
        assert!(axis < 2, "mean_axis: axis {axis} out of range");
        let denom = if axis == 0 { r } else { c } as f64;
        let src = &self.nodes[a].data;
        let (len, data) = if axis == 0 {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += src[i * c + j] / denom;
                }
            }
            (c, out)
        } else {
            let mut out = vec![0.0; r];
            for i in 0..r {
                out[i] = src[i * c..(i + 1) * c].iter().sum::<f64>() / denom;
            }
            (r, out)
        };
        self.push(vec![len], data, self.needs(&[a]), Op::MeanAxis(a, axis))
    }

    // ── Softmax family (last axis, max-subtracted) ─────────────────────

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let (lanes, width) = rows_cols(&self.nodes[a].shape);
        assert!(width > 0, "softmax over empty axis (shape {:?})", self.nodes[a].shape);
        let mut data = vec![0.0; lanes * width];
        for lane in 0..lanes {
            let src = &self.nodes[a].data[lane * width..(lane + 1) * width];
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut data[lane * width..(lane + 1) * width];
            let mut total = 0.0;
            for (d, &x) in dst.iter_mut().zip(src) {
                *d = (x - max).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        self.push(
            self.nodes[a].shape.clone(),
            data,
            self.needs(&[a]),
            Op::Softmax(a),
        )
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let (lanes, width) = rows_cols(&self.nodes[a].shape);
        assert!(width > 0, "log_softmax over empty axis (shape {:?})", self.nodes[a].shape);
        let mut data = vec![0.0; lanes * width];
        for lane in 0..lanes {
            let src = &self.nodes[a].data[lane * width..(lane + 1) * width];
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = src.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            for (j, &x) in src.iter().enumerate() {
                data[lane * width + j] = x - log_sum;
            }
        }
        self.push(
            self.nodes[a].shape.clone(),
            data,
            self.needs(&[a]),
            Op::LogSoftmax(a),
        )
    }

    // ── Shape surgery ───────────────────────────────────────────────────

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.nodes[parts[0]].shape[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = match self.nodes[p].shape[..] {
                [r, c] => (r, c),
                ref s => panic!("concat_rows requires 2-D parts, got {:?}", s),
            };
            assert_eq!(
                c, cols,
                "concat_rows: shape mismatch {:?} vs {:?}",
                self.nodes[parts[0]].shape, self.nodes[p].shape
            );
            rows += r;
            data.extend_from_slice(&self.nodes[p].data);
        }
        let needs = self.needs(parts);
        self.push(vec![rows, cols], data, needs, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.nodes[parts[0]].shape[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| match self.nodes[p].shape[..] {
                [r, c] => {
                    assert_eq!(
                        r, rows,
                        "concat_cols: shape mismatch {:?} vs {:?}",
                        self.nodes[parts[0]].shape, self.nodes[p].shape
                    );
                    c
                }
                ref s => panic!("concat_cols requires 2-D parts, got {:?}", s),
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            for i in 0..rows {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&self.nodes[p].data[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let needs = self.needs(parts);
        self.push(vec![rows, total], data, needs, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_vec(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_vec of nothing");
        let mut data = Vec::new();
        for &p in parts {
            assert_eq!(
                self.nodes[p].shape.len(),
                1,
                "concat_vec requires 1-D parts, got {:?}",
                self.nodes[p].shape
            );
            data.extend_from_slice(&self.nodes[p].data);
        }
        let len = data.len();
        let needs = self.needs(parts);
        self.push(vec![len], data, needs, Op::ConcatVec(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let (r, c) = match self.nodes[a].shape[..] {
            [r, c] => (r, c),
            ref s => panic!("slice_rows requires 2-D, got {:?}", s),
        };
        assert!(
            start <= end && end <= r,
            "slice_rows {start}..{end} out of range for {r} rows"
        );
        let data = self.nodes[a].data[start * c..end * c].to_vec();
        self.push(
            vec![end - start, c],
            data,
            self.needs(&[a]),
            Op::SliceRows(a, start, end),
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let (r, c) = match self.nodes[a].shape[..] {
            [r, c] => (r, c),
            ref s => panic!("slice_cols requires 2-D, got {:?}", s),
        };
        assert!(
            start <= end && end <= c,
            "slice_cols {start}..{end} out of range for {c} cols"
        );
        let w = end - start;
        let mut data = vec![0.0; r * w];
        for i in 0..r {
            data[i * w..(i + 1) * w].copy_from_slice(&self.nodes[a].data[i * c + start..i * c + end]);
        }
        self.push(vec![r, w], data, self.needs(&[a]), Op::SliceCols(a, start, end))
    }

    pub fn select_rows(&mut self, a: NodeId, indices: &[usize]) -> NodeId {
        let (r, c) = match self.nodes[a].shape[..] {
            [r, c] => (r, c),
            ref s => panic!("select_rows requires 2-D, got {:?}", s),
        };
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            assert!(i < r, "select_rows: index {i} out of range for {r} rows");
            data.extend_from_slice(&self.nodes[a].data[i * c..(i + 1) * c]);
        }
        self.push(
            vec![indices.len(), c],
            data,
            self.needs(&[a]),
            Op::SelectRows(a, indices.to_vec()),
        )
    }

    pub fn select_elems(&mut self, a: NodeId, flat_indices: &[usize]) -> NodeId {
        let n = self.nodes[a].data.len();
        let data = flat_indices
            .iter()
            .map(|&i| {
                assert!(i < n, "select_elems: index {i} out of range for {n} elements");
                self.nodes[a].data[i]
            })
            .collect();
        self.push(
            vec![flat_indices.len()],
            data,
            self.needs(&[a]),
            Op::SelectElems(a, flat_indices.to_vec()),
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.nodes[a].data.len(),
            "reshape to {:?} does not match {:?}",
            shape,
            self.nodes[a].shape
        );
        let data = self.nodes[a].data.clone();
        self.push(shape, data, self.needs(&[a]), Op::Reshape(a))
    }

    // ── Structured layers ───────────────────────────────────────────────

    /// Layer normalization over the last axis with learned affine.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let (lanes, width) = rows_cols(&self.nodes[x].shape);
        assert_eq!(
            self.nodes[gamma].shape,
            vec![width],
            "layer_norm: gamma shape {:?} vs feature width {width}",
            self.nodes[gamma].shape
        );
        assert_eq!(
            self.nodes[beta].shape,
            vec![width],
            "layer_norm: beta shape {:?} vs feature width {width}",
            self.nodes[beta].shape
        );
        let mut data = vec![0.0; lanes * width];
        for lane in 0..lanes {
            let src = &self.nodes[x].data[lane * width..(lane + 1) * width];
            let mean = src.iter().sum::<f64>() / width as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..width {
                data[lane * width + j] =
                    (src[j] - mean) * inv_std * self.nodes[gamma].data[j] + self.nodes[beta].data[j];
            }
        }
        self.push(
            self.nodes[x].shape.clone(),
            data,
            self.needs(&[x, gamma, beta]),
            Op::LayerNorm { x, gamma, beta, eps },
        )
    }

    /// Inverted dropout with a caller-supplied keep mask already scaled by
    /// 1/keep_prob. Identity when every factor is 1.
    pub fn dropout(&mut self, x: NodeId, mask: Vec<f64>) -> NodeId {
        assert_eq!(mask.len(), self.nodes[x].data.len(), "dropout mask length");
        let data = zip_map(&self.nodes[x].data, &mask, |v, m| v * m);
        self.push(
            self.nodes[x].shape.clone(),
            data,
            self.needs(&[x]),
            Op::Dropout(x, mask),
        )
    }

    /// Differentiable sinusoidal encoding: row r of the output encodes
    /// position p_r as (sin(p_r w_0), cos(p_r w_0), sin(p_r w_1), ...) with
    /// w_k = base^(-2k/dim).
    pub fn sinusoidal_pe(&mut self, positions: NodeId, dim: usize, base: f64) -> NodeId {
        assert!(dim >= 2 && dim % 2 == 0, "pe dim must be even, got {dim}");
        assert_eq!(
            self.nodes[positions].shape.len(),
            1,
            "sinusoidal_pe expects 1-D positions, got {:?}",
            self.nodes[positions].shape
        );
        let n = self.nodes[positions].data.len();
        let mut data = vec![0.0; n * dim];
        for (r, &p) in self.nodes[positions].data.iter().enumerate() {
            for k in 0..dim / 2 {
                let omega = pe_omega(k, dim, base);
                data[r * dim + 2 * k] = (p * omega).sin();
                data[r * dim + 2 * k + 1] = (p * omega).cos();
            }
        }
        self.push(
            vec![n, dim],
            data,
            self.needs(&[positions]),
            Op::SinusoidalPe(positions, dim, base),
        )
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Gradients accumulate rather than
    /// overwrite, so shared subgraphs combine correctly.
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(
            self.nodes[root].data.len(),
            1,
            "backward root must be scalar, got shape {:?}",
            self.nodes[root].shape
        );
        self.nodes[root].grad = Some(vec![1.0]);

        for id in (0..=root).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[id].grad.take() else {
                continue;
            };
            let op = self.nodes[id].op.clone();
            self.propagate(id, &grad, &op);
            self.nodes[id].grad = Some(grad);
        }
    }

    fn add_grad(&mut self, id: NodeId, delta_fn: impl FnOnce(&Tape) -> Vec<f64>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let delta = delta_fn(self);
        debug_assert_eq!(delta.len(), self.nodes[id].data.len());
        let node = &mut self.nodes[id];
        let g = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
        for (gi, di) in g.iter_mut().zip(&delta) {
            *gi += di;
        }
    }

    fn propagate(&mut self, out: NodeId, g: &[f64], op: &Op) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(a, |_| g.to_vec());
                self.add_grad(b, |_| g.to_vec());
            }
            Op::Sub(a, b) => {
                self.add_grad(a, |_| g.to_vec());
                self.add_grad(b, |_| g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                self.add_grad(a, |t| zip_map(g, &t.nodes[b].data, |gi, bi| gi * bi));
                self.add_grad(b, |t| zip_map(g, &t.nodes[a].data, |gi, ai| gi * ai));
            }
            Op::Div(a, b) => {
                self.add_grad(a, |t| zip_map(g, &t.nodes[b].data, |gi, bi| gi / bi));
                self.add_grad(b, |t| {
                    g.iter()
                        .zip(&t.nodes[a].data)
                        .zip(&t.nodes[b].data)
                        .map(|((gi, ai), bi)| -gi * ai / (bi * bi))
                        .collect()
                });
            }
            Op::AddRow(m, row) => {
                let (n, d) = rows_cols(&self.nodes[m].shape);
                self.add_grad(m, |_| g.to_vec());
                self.add_grad(row, |_| {
                    let mut out = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            out[j] += g[i * d + j];
                        }
                    }
                    out
                });
            }
            Op::ScaleRows(m, scale) => {
                let (n, d) = rows_cols(&self.nodes[m].shape);
                self.add_grad(m, |t| {
                    let mut out = vec![0.0; n * d];
                    for i in 0..n {
                        let s = t.nodes[scale].data[i];
                        for j in 0..d {
                            out[i * d + j] = g[i * d + j] * s;
                        }
                    }
                    out
                });
                self.add_grad(scale, |t| {
                    let mut out = vec![0.0; n];
                    for i in 0..n {
                        for j in 0..d {
                            out[i] += g[i * d + j] * t.nodes[m].data[i * d + j];
                        }
                    }
                    out
                });
            }
            Op::AddScalar(a) => self.add_grad(a, |_| g.to_vec()),
            Op::MulScalar(a, c) => self.add_grad(a, |_| g.iter().map(|x| x * c).collect()),
            Op::Neg(a) => self.add_grad(a, |_| g.iter().map(|x| -x).collect()),
            Op::Abs(a) => self.add_grad(a, |t| {
                zip_map(g, &t.nodes[a].data, |gi, ai| {
                    if *ai == 0.0 {
                        0.0
                    } else {
                        gi * ai.signum()
                    }
                })
            }),
            Op::Exp(a) => self.add_grad(a, |t| zip_map(g, &t.nodes[out].data, |gi, yi| gi * yi)),
            Op::Ln(a) => self.add_grad(a, |t| zip_map(g, &t.nodes[a].data, |gi, ai| gi / ai)),
            Op::Sqrt(a) => {
                self.add_grad(a, |t| zip_map(g, &t.nodes[out].data, |gi, yi| gi / (2.0 * yi)))
            }
            Op::Tanh(a) => self.add_grad(a, |t| {
                zip_map(g, &t.nodes[out].data, |gi, yi| gi * (1.0 - yi * yi))
            }),
            Op::Sigmoid(a) => self.add_grad(a, |t| {
                zip_map(g, &t.nodes[out].data, |gi, yi| gi * yi * (1.0 - yi))
            }),
            Op::Relu(a) => self.add_grad(a, |t| {
                zip_map(g, &t.nodes[a].data, |gi, ai| if *ai > 0.0 { *gi } else { 0.0 })
            }),
            Op::MaxElem(a, b) => {
                self.add_grad(a, |t| {
                    zip3_map(g, &t.nodes[a].data, &t.nodes[b].data, |gi, ai, bi| {
                        if ai >= bi {
                            gi
                        } else {
                            0.0
                        }
                    })
                });
                self.add_grad(b, |t| {
                    zip3_map(g, &t.nodes[a].data, &t.nodes[b].data, |gi, ai, bi| {
                        if ai < bi {
                            gi
                        } else {
                            0.0
                        }
                    })
                });
            }
            Op::MinElem(a, b) => {
                self.add_grad(a, |t| {
                    zip3_map(g, &t.nodes[a].data, &t.nodes[b].data, |gi, ai, bi| {
                        if ai <= bi {
                            gi
                        } else {
                            0.0
                        }
                    })
                });
                self.add_grad(b, |t| {
                    zip3_map(g, &t.nodes[a].data, &t.nodes[b].data, |gi, ai, bi| {
                        if ai > bi {
                            gi
                        } else {
                            0.0
                        }
                    })
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                self.add_grad(a, |t| {
                    // dA = G @ B^T
                    let b_data = &t.nodes[b].data;
                    let mut bt = vec![0.0; n * k];
                    for i in 0..k {
                        for j in 0..n {
                            bt[j * k + i] = b_data[i * n + j];
                        }
                    }
                    matmul_raw(g, &bt, m, n, k)
                });
                self.add_grad(b, |t| {
                    // dB = A^T @ G
                    let a_data = &t.nodes[a].data;
                    let mut at = vec![0.0; k * m];
                    for i in 0..m {
                        for j in 0..k {
                            at[j * m + i] = a_data[i * k + j];
                        }
                    }
                    matmul_raw(&at, g, k, m, n)
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                self.add_grad(a, |_| {
                    let mut out = vec![0.0; r * c];
                    for i in 0..c {
                        for j in 0..r {
                            out[j * c + i] = g[i * r + j];
                        }
                    }
                    out
                });
            }
            Op::SumAll(a) => {
                let n = self.nodes[a].data.len();
                self.add_grad(a, |_| vec![g[0]; n]);
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a].data.len();
                self.add_grad(a, |_| vec![g[0] / n as f64; n]);
            }
            Op::SumAxis(a, axis) => {
                let (r, c) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                self.add_grad(a, |_| {
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            out[i * c + j] = if axis == 0 { g[j] } else { g[i] };
                        }
                    }
                    out
                });
            }
            Op::MeanAxis(a, axis) => {
                let (r, c) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let denom = if axis == 0 { r } else { c } as f64;
                self.add_grad(a, |_| {
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            out[i * c + j] = if axis == 0 { g[j] } else { g[i] } / denom;
                        }
                    }
                    out
                });
            }
            Op::Softmax(a) => {
                let (lanes, width) = rows_cols(&self.nodes[out].shape);
                self.add_grad(a, |t| {
                    let y = &t.nodes[out].data;
                    let mut dx = vec![0.0; lanes * width];
                    for lane in 0..lanes {
                        let off = lane * width;
                        let dot: f64 = (0..width).map(|j| g[off + j] * y[off + j]).sum();
                        for j in 0..width {
                            dx[off + j] = y[off + j] * (g[off + j] - dot);
                        }
                    }
                    dx
                });
            }
            Op::LogSoftmax(a) => {
                let (lanes, width) = rows_cols(&self.nodes[out].shape);
                self.add_grad(a, |t| {
                    let y = &t.nodes[out].data;
                    let mut dx = vec![0.0; lanes * width];
                    for lane in 0..lanes {
                        let off = lane * width;
                        let g_sum: f64 = g[off..off + width].iter().sum();
                        for j in 0..width {
                            dx[off + j] = g[off + j] - y[off + j].exp() * g_sum;
                        }
                    }
                    dx
                });
            }
            Op::ConcatRows(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].data.len();
                    self.add_grad(p, |_| g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::ConcatCols(ref parts) => {
                let rows = self.nodes[out].shape[0];
                let total = self.nodes[out].shape[1];
                let mut col_off = 0;
                for &p in parts {
                    let w = self.nodes[p].shape[1];
                    self.add_grad(p, |_| {
                        let mut out_g = vec![0.0; rows * w];
                        for i in 0..rows {
                            out_g[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + col_off..i * total + col_off + w]);
                        }
                        out_g
                    });
                    col_off += w;
                }
            }
            Op::ConcatVec(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].data.len();
                    self.add_grad(p, |_| g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::SliceRows(a, start, _end) => {
                let (r, c) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                self.add_grad(a, |_| {
                    let mut out = vec![0.0; r * c];
                    out[start * c..start * c + g.len()].copy_from_slice(g);
                    out
                });
            }
            Op::SliceCols(a, start, end) => {
                let (r, c) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let w = end - start;
                self.add_grad(a, |_| {
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        out[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    out
                });
            }
            Op::SelectRows(a, ref indices) => {
                let (r, c) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                self.add_grad(a, |_| {
                    let mut out = vec![0.0; r * c];
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            out[i * c + j] += g[k * c + j];
                        }
                    }
                    out
                });
            }
            Op::SelectElems(a, ref indices) => {
                let n = self.nodes[a].data.len();
                self.add_grad(a, |_| {
                    let mut out = vec![0.0; n];
                    for (k, &i) in indices.iter().enumerate() {
                        out[i] += g[k];
                    }
                    out
                });
            }
            Op::Reshape(a) => self.add_grad(a, |_| g.to_vec()),
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (lanes, width) = rows_cols(&self.nodes[x].shape);
                self.add_grad(x, |t| {
                    let src = &t.nodes[x].data;
                    let gam = &t.nodes[gamma].data;
                    let mut dx = vec![0.0; lanes * width];
                    for lane in 0..lanes {
                        let off = lane * width;
                        let row = &src[off..off + width];
                        let mean = row.iter().sum::<f64>() / width as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        // dy_j = g_j * gamma_j; dx = inv_std*(dy - mean(dy) - xhat*mean(dy*xhat))
                        let mut dy = vec![0.0; width];
                        let mut xhat = vec![0.0; width];
                        for j in 0..width {
                            dy[j] = g[off + j] * gam[j];
                            xhat[j] = (row[j] - mean) * inv_std;
                        }
                        let mean_dy = dy.iter().sum::<f64>() / width as f64;
                        let mean_dy_xhat =
                            dy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / width as f64;
                        for j in 0..width {
                            dx[off + j] = inv_std * (dy[j] - mean_dy - xhat[j] * mean_dy_xhat);
                        }
                    }
                    dx
                });
                self.add_grad(gamma, |t| {
                    let src = &t.nodes[x].data;
                    let mut dg = vec![0.0; width];
                    for lane in 0..lanes {
                        let off = lane * width;
                        let row = &src[off..off + width];
                        let mean = row.iter().sum::<f64>() / width as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        for j in 0..width {
                            dg[j] += g[off + j] * (row[j] - mean) * inv_std;
                        }
                    }
                    dg
                });
                self.add_grad(beta, |_| {
                    let mut db = vec![0.0; width];
                    for lane in 0..lanes {
                        for j in 0..width {
                            db[j] += g[lane * width + j];
                        }
                    }
                    db
                });
            }
            Op::Dropout(x, ref mask) => {
                self.add_grad(x, |_| zip_map(g, mask, |gi, mi| gi * mi));
            }
            Op::SinusoidalPe(positions, dim, base) => {
                self.add_grad(positions, |t| {
                    let ps = &t.nodes[positions].data;
                    let mut dp = vec![0.0; ps.len()];
                    for (r, &p) in ps.iter().enumerate() {
                        for k in 0..dim / 2 {
                            let omega = pe_omega(k, dim, base);
                            dp[r] += omega
                                * (g[r * dim + 2 * k] * (p * omega).cos()
                                    - g[r * dim + 2 * k + 1] * (p * omega).sin());
                        }
                    }
                    dp
                });
            }
        }
    }
}

fn pe_omega(k: usize, dim: usize, base: f64) -> f64 {
    base.powf(-((2 * k) as f64) / dim as f64)
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(&f64, &f64) -> f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| f(x, y)).collect()
}

fn zip3_map(a: &[f64], b: &[f64], c: &[f64], f: impl Fn(f64, f64, f64) -> f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    debug_assert_eq!(a.len(), c.len());
    a.iter()
        .zip(b)
        .zip(c)
        .map(|((x, y), z)| f(*x, *y, *z))
        .collect()
}

/// A[m,k] @ B[k,n] with an i-k-j loop order for cache-friendly accumulation.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            let o_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                o_row[j] += aip * b_row[j];
            }
        }
    }
    out
}
