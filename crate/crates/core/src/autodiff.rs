//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already a topological order and
//! [`Graph::backward`] is a single reverse sweep. Leaf gradients accumulate
//! across repeated `backward` calls until [`Graph::zero_grad`].

use crate::tensor::{gemm, Tensor, TensorError, TensorResult};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One causal self-attention segment `[start, start + len)` within packed rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        dims: (usize, usize, usize),
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    MulCol {
        x: Var,
        col: Var,
    },
    Scale(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    Pick {
        x: Var,
        flat: Vec<usize>,
    },
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Reshape(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterRows {
        parts: Vec<(Var, Vec<usize>)>,
    },
    Sum(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRow { x, bias } => vec![*x, *bias],
            Op::MulCol { x, col } => vec![*x, *col],
            Op::Scale(a, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Gelu(a)
            | Op::Relu(a)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::Sum(a) => vec![*a],
            Op::Pick { x, .. }
            | Op::MaskedFill { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::SelectRows { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
            Op::ScatterRows { parts } => parts.iter().map(|(v, _)| *v).collect(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// The computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    let inv = 1.0 / total;
    dst.iter_mut().for_each(|d| *d *= inv);
}

fn log_softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + src.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = s - lse;
    }
}

/// Numerically stable row-wise softmax of a plain slice (no tape).
pub fn softmax_values(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_row(logits, &mut out);
    out
}

/// Numerically stable log-softmax of a plain slice (no tape).
pub fn log_softmax_values(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    log_softmax_row(logits, &mut out);
    out
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> TensorResult<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers a leaf. Non-finite values are rejected.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorResult<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor) -> TensorResult<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> TensorResult<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of a leaf as a tensor, zero-filled when no gradient reached it.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::from_parts(node.value.shape().to_vec(), g.clone()),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> TensorResult<(usize, usize)> {
        self.nodes[v.0].value.dims2(op)
    }

    // ---- primitives -------------------------------------------------------

    fn mm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> TensorResult<Var> {
        let (ar, ac) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            trans_a,
            self.value(b).data(),
            trans_b,
            0.0,
            &mut out,
        );
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                dims: (m, k, n),
            },
            "matmul",
        )
    }

    /// `a · b` for `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.mm(a, b, false, false)
    }

    /// `a · bᵀ` for `[m, k] x [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.mm(a, b, false, true)
    }

    /// `aᵀ · b` for `[k, m] x [k, n]`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.mm(a, b, true, false)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> TensorResult<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op_name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, data), op, op_name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[n]` bias to every row of `[m, n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> TensorResult<Var> {
        let (m, n) = self.dims2(x, "add_row")?;
        if self.value(bias).numel() != n || self.shape(bias).len() != 1 {
            return Err(mismatch("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            for (d, &bb) in data[r * n..(r + 1) * n].iter_mut().zip(b) {
                *d += bb;
            }
        }
        self.push(
            Tensor::from_parts(vec![m, n], data),
            Op::AddRow { x, bias },
            "add_row",
        )
    }

    /// Scales row `i` of `[m, n]` by `col[i]` (`col` is `[m]` or `[m, 1]`).
    pub fn mul_col(&mut self, x: Var, col: Var) -> TensorResult<Var> {
        let (m, n) = self.dims2(x, "mul_col")?;
        if self.value(col).numel() != m {
            return Err(mismatch("mul_col", self.shape(x), self.shape(col)));
        }
        let c = self.value(col).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            data[r * n..(r + 1) * n].iter_mut().for_each(|d| *d *= c[r]);
        }
        self.push(
            Tensor::from_parts(vec![m, n], data),
            Op::MulCol { x, col },
            "mul_col",
        )
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> TensorResult<Var> {
        if !factor.is_finite() {
            return Err(TensorError::NonFinite { op: "scale" });
        }
        let t = self.value(a).map(|x| x * factor);
        self.push(t, Op::Scale(a, factor), "scale")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> TensorResult<Var> {
        let src = self.value(a);
        let (m, n) = src.rows_cols();
        let mut data = vec![0.0; src.numel()];
        for r in 0..m {
            softmax_row(&src.data()[r * n..(r + 1) * n], &mut data[r * n..(r + 1) * n]);
        }
        let shape = src.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Softmax(a), "softmax")
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> TensorResult<Var> {
        let src = self.value(a);
        let (m, n) = src.rows_cols();
        let mut data = vec![0.0; src.numel()];
        for r in 0..m {
            log_softmax_row(&src.data()[r * n..(r + 1) * n], &mut data[r * n..(r + 1) * n]);
        }
        let shape = src.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, data),
            Op::LogSoftmax(a),
            "log_softmax",
        )
    }

    /// Gathers `x[rows[i], cols[i]]` into a vector of length `rows.len()`.
    pub fn gather(&mut self, x: Var, rows: &[usize], cols: &[usize]) -> TensorResult<Var> {
        let (m, n) = self.dims2(x, "gather")?;
        if rows.len() != cols.len() {
            return Err(mismatch("gather", &[rows.len()], &[cols.len()]));
        }
        let mut flat = Vec::with_capacity(rows.len());
        for (&r, &c) in rows.iter().zip(cols) {
            if r >= m {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: r,
                    extent: m,
                });
            }
            if c >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: c,
                    extent: n,
                });
            }
            flat.push(r * n + c);
        }
        let src = self.value(x).data();
        let data: Vec<f64> = flat.iter().map(|&i| src[i]).collect();
        self.push(
            Tensor::from_parts(vec![data.len()], data),
            Op::Pick { x, flat },
            "gather",
        )
    }

    /// Replaces entries where `mask` is true with `value`; those entries pass no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> TensorResult<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(mismatch("masked_fill", self.shape(x), &[mask.len()]));
        }
        let mut data = self.value(x).data().to_vec();
        for (d, &m) in data.iter_mut().zip(mask) {
            if m {
                *d = value;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::from_parts(shape, data),
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
            "masked_fill",
        )
    }

    /// Row-wise layer normalization with learned gain and bias over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> TensorResult<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gain)));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> TensorResult<Var> {
        let t = self.value(a).map(|x| {
            let u = GELU_C * (x + GELU_A * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        self.push(t, Op::Gelu(a), "gelu")
    }

    pub fn relu(&mut self, a: Var) -> TensorResult<Var> {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a), "relu")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> TensorResult<Var> {
        if shape.iter().product::<usize>() != self.value(a).numel() {
            return Err(mismatch("reshape", self.shape(a), shape));
        }
        let data = self.value(a).data().to_vec();
        self.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::Reshape(a),
            "reshape",
        )
    }

    pub fn transpose(&mut self, a: Var) -> TensorResult<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = src[r * n + c];
            }
        }
        self.push(
            Tensor::from_parts(vec![n, m], data),
            Op::Transpose(a),
            "transpose",
        )
    }

    /// Concatenates matrices along the row (sequence) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> TensorResult<Var> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat_rows",
            reason: "no inputs".into(),
        })?;
        let (_, n) = self.dims2(first, "concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (m, c) = self.dims2(p, "concat_rows")?;
            if c != n {
                return Err(mismatch("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(
            Tensor::from_parts(vec![rows, n], data),
            Op::ConcatRows(parts.to_vec()),
            "concat_rows",
        )
    }

    /// Concatenates matrices along the column (feature) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> TensorResult<Var> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat_cols",
            reason: "no inputs".into(),
        })?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != m {
                return Err(mismatch("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..m {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        self.push(
            Tensor::from_parts(vec![m, total], data),
            Op::ConcatCols(parts.to_vec()),
            "concat_cols",
        )
    }

    /// Rows `[start, start + len)` of a matrix (split along the sequence axis).
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> TensorResult<Var> {
        let (m, n) = self.dims2(x, "slice_rows")?;
        if start + len > m {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                extent: m,
            });
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        self.push(
            Tensor::from_parts(vec![len, n], data),
            Op::SliceRows { x, start },
            "slice_rows",
        )
    }

    /// Columns `[start, start + len)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> TensorResult<Var> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start + len > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                extent: n,
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        self.push(
            Tensor::from_parts(vec![m, len], data),
            Op::SliceCols { x, start },
            "slice_cols",
        )
    }

    /// Selects (possibly repeated) rows; used for embedding lookup and modality untying.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> TensorResult<Var> {
        let (m, n) = self.dims2(x, "select_rows")?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(TensorError::IndexOutOfRange {
                    op: "select_rows",
                    index: r,
                    extent: m,
                });
            }
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        self.push(
            Tensor::from_parts(vec![rows.len(), n], data),
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            "select_rows",
        )
    }

    /// Places row `i` of each part at output row `positions[i]`. Every output row
    /// must be written exactly once.
    pub fn scatter_rows(
        &mut self,
        total_rows: usize,
        cols: usize,
        parts: &[(Var, &[usize])],
    ) -> TensorResult<Var> {
        let mut seen = vec![false; total_rows];
        let mut data = vec![0.0; total_rows * cols];
        for (v, positions) in parts {
            let (m, n) = self.dims2(*v, "scatter_rows")?;
            if n != cols || m != positions.len() {
                return Err(mismatch("scatter_rows", self.shape(*v), &[positions.len(), cols]));
            }
            let src = self.value(*v).data();
            for (i, &p) in positions.iter().enumerate() {
                if p >= total_rows || seen[p] {
                    return Err(TensorError::Invalid {
                        op: "scatter_rows",
                        reason: format!("position {p} is out of range or written twice"),
                    });
                }
                seen[p] = true;
                data[p * cols..(p + 1) * cols].copy_from_slice(&src[i * cols..(i + 1) * cols]);
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(TensorError::Invalid {
                op: "scatter_rows",
                reason: format!("output row {missing} not covered"),
            });
        }
        let parts = parts.iter().map(|(v, p)| (*v, p.to_vec())).collect();
        self.push(
            Tensor::from_parts(vec![total_rows, cols], data),
            Op::ScatterRows { parts },
            "scatter_rows",
        )
    }

    pub fn sum(&mut self, a: Var) -> TensorResult<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> TensorResult<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "mean",
                reason: "empty tensor".into(),
            });
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Multi-head causal self-attention over packed rows. `q`, `k`, `v` are
    /// `[rows, d]`; each segment attends only within itself and only to earlier
    /// positions.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
    ) -> TensorResult<Var> {
        let (rows, d) = self.dims2(q, "attention")?;
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(mismatch("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid {
                op: "attention",
                reason: format!("model dim {d} not divisible by {heads} heads"),
            });
        }
        let mut covered = 0;
        for s in segments {
            if s.start != covered {
                return Err(TensorError::Invalid {
                    op: "attention",
                    reason: "segments must tile the rows in order".into(),
                });
            }
            covered += s.len;
        }
        if covered != rows {
            return Err(mismatch("attention", &[rows], &[covered]));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let prob_len: usize = segments.iter().map(|s| s.len * s.len).sum::<usize>() * heads;
        let mut probs = vec![0.0; prob_len];
        let mut out = vec![0.0; rows * d];
        let mut offset = 0;
        let mut scores = Vec::new();
        for seg in segments {
            let l = seg.len;
            for h in 0..heads {
                let c0 = h * dh;
                let p = &mut probs[offset..offset + l * l];
                for i in 0..l {
                    let qi = &qd[(seg.start + i) * d + c0..(seg.start + i) * d + c0 + dh];
                    scores.clear();
                    for j in 0..=i {
                        let kj = &kd[(seg.start + j) * d + c0..(seg.start + j) * d + c0 + dh];
                        let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                        scores.push(dot * scale);
                    }
                    softmax_row(&scores, &mut p[i * l..i * l + i + 1]);
                    let oi = &mut out[(seg.start + i) * d + c0..(seg.start + i) * d + c0 + dh];
                    for j in 0..=i {
                        let w = p[i * l + j];
                        let vj = &vd[(seg.start + j) * d + c0..(seg.start + j) * d + c0 + dh];
                        for (o, &vv) in oi.iter_mut().zip(vj) {
                            *o += w * vv;
                        }
                    }
                }
                offset += l * l;
            }
        }
        self.push(
            Tensor::from_parts(vec![rows, d], out),
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            "attention",
        )
    }

    // ---- reverse sweep ----------------------------------------------------

    /// Back-propagates from a scalar loss, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> TensorResult<()> {
        let loss_shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(loss_shape));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(dout) = adj[idx].take() else {
                continue;
            };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                if !dout.iter().all(|x| x.is_finite()) {
                    return Err(TensorError::NonFinite { op: "backward" });
                }
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(g) => g.iter_mut().zip(&dout).for_each(|(g, d)| *g += d),
                    None => node.grad = Some(dout),
                }
                continue;
            }
            self.propagate(idx, &dout, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, dout: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |v: &Var| nodes[v.0].requires_grad;
        let numel = |v: &Var| nodes[v.0].value.numel();
        let val = |v: &Var| nodes[v.0].value.data();
        let out = nodes[idx].value.data();
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                dims: (m, k, n),
            } => {
                let (m, k, n) = (*m, *k, *n);
                if needs(a) {
                    let len = numel(a);
                    let da = accumulate(adj, *a, len);
                    if !*trans_a {
                        gemm(m, n, k, 1.0, dout, false, val(b), !*trans_b, 1.0, da);
                    } else {
                        gemm(k, n, m, 1.0, val(b), *trans_b, dout, true, 1.0, da);
                    }
                }
                if needs(b) {
                    let len = numel(b);
                    let db = accumulate(adj, *b, len);
                    if !*trans_b {
                        gemm(k, m, n, 1.0, val(a), !*trans_a, dout, false, 1.0, db);
                    } else {
                        gemm(n, m, k, 1.0, dout, true, val(a), *trans_a, 1.0, db);
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(a, 1.0), (b, 1.0)] {
                    if needs(v) {
                        let g = accumulate(adj, *v, dout.len());
                        g.iter_mut().zip(dout).for_each(|(g, d)| *g += sign * d);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(a, 1.0), (b, -1.0)] {
                    if needs(v) {
                        let g = accumulate(adj, *v, dout.len());
                        g.iter_mut().zip(dout).for_each(|(g, d)| *g += sign * d);
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    let other = val(b);
                    let g = accumulate(adj, *a, dout.len());
                    for i in 0..dout.len() {
                        g[i] += dout[i] * other[i];
                    }
                }
                if needs(b) {
                    let other = val(a);
                    let g = accumulate(adj, *b, dout.len());
                    for i in 0..dout.len() {
                        g[i] += dout[i] * other[i];
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if needs(x) {
                    let g = accumulate(adj, *x, dout.len());
                    g.iter_mut().zip(dout).for_each(|(g, d)| *g += d);
                }
                if needs(bias) {
                    let n = numel(bias);
                    let g = accumulate(adj, *bias, n);
                    for (i, d) in dout.iter().enumerate() {
                        g[i % n] += d;
                    }
                }
            }
            Op::MulCol { x, col } => {
                let m = numel(col);
                let n = dout.len() / m.max(1);
                if needs(x) {
                    let c = val(col);
                    let g = accumulate(adj, *x, dout.len());
                    for r in 0..m {
                        for j in 0..n {
                            g[r * n + j] += dout[r * n + j] * c[r];
                        }
                    }
                }
                if needs(col) {
                    let xv = val(x);
                    let g = accumulate(adj, *col, m);
                    for r in 0..m {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += dout[r * n + j] * xv[r * n + j];
                        }
                        g[r] += s;
                    }
                }
            }
            Op::Scale(a, f) => {
                if needs(a) {
                    let g = accumulate(adj, *a, dout.len());
                    g.iter_mut().zip(dout).for_each(|(g, d)| *g += f * d);
                }
            }
            Op::Softmax(a) => {
                if needs(a) {
                    let (m, n) = nodes[idx].value.rows_cols();
                    let g = accumulate(adj, *a, dout.len());
                    for r in 0..m {
                        let y = &out[r * n..(r + 1) * n];
                        let dy = &dout[r * n..(r + 1) * n];
                        let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            g[r * n + j] += y[j] * (dy[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if needs(a) {
                    let (m, n) = nodes[idx].value.rows_cols();
                    let g = accumulate(adj, *a, dout.len());
                    for r in 0..m {
                        let y = &out[r * n..(r + 1) * n];
                        let dy = &dout[r * n..(r + 1) * n];
                        let total: f64 = dy.iter().sum();
                        for j in 0..n {
                            g[r * n + j] += dy[j] - y[j].exp() * total;
                        }
                    }
                }
            }
            Op::Pick { x, flat } => {
                if needs(x) {
                    let len = numel(x);
                    let g = accumulate(adj, *x, len);
                    for (&i, d) in flat.iter().zip(dout) {
                        g[i] += d;
                    }
                }
            }
            Op::MaskedFill { x, mask } => {
                if needs(x) {
                    let g = accumulate(adj, *x, dout.len());
                    for i in 0..dout.len() {
                        if !mask[i] {
                            g[i] += dout[i];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let m = inv_std.len();
                let n = dout.len() / m.max(1);
                if needs(gain) {
                    let g = accumulate(adj, *gain, n);
                    for r in 0..m {
                        for c in 0..n {
                            g[c] += dout[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if needs(bias) {
                    let g = accumulate(adj, *bias, n);
                    for r in 0..m {
                        for c in 0..n {
                            g[c] += dout[r * n + c];
                        }
                    }
                }
                if needs(x) {
                    let gv = val(gain).to_vec();
                    let g = accumulate(adj, *x, dout.len());
                    let mut dxhat = vec![0.0; n];
                    for r in 0..m {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..n {
                            dxhat[c] = dout[r * n + c] * gv[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xhat[r * n + c];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for c in 0..n {
                            g[r * n + c] +=
                                inv_std[r] * (dxhat[c] - mean_d - xhat[r * n + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if needs(a) {
                    let xv = val(a);
                    let g = accumulate(adj, *a, dout.len());
                    for i in 0..dout.len() {
                        let x = xv[i];
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        g[i] += dout[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                    }
                }
            }
            Op::Relu(a) => {
                if needs(a) {
                    let xv = val(a);
                    let g = accumulate(adj, *a, dout.len());
                    for i in 0..dout.len() {
                        if xv[i] > 0.0 {
                            g[i] += dout[i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if needs(a) {
                    let g = accumulate(adj, *a, dout.len());
                    g.iter_mut().zip(dout).for_each(|(g, d)| *g += d);
                }
            }
            Op::Transpose(a) => {
                if needs(a) {
                    let (m, n) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                    let g = accumulate(adj, *a, dout.len());
                    for r in 0..m {
                        for c in 0..n {
                            g[r * n + c] += dout[c * m + r];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = numel(p);
                    if needs(p) {
                        let g = accumulate(adj, *p, len);
                        g.iter_mut()
                            .zip(&dout[offset..offset + len])
                            .for_each(|(g, d)| *g += d);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = nodes[idx].value.shape()[1];
                let m = nodes[idx].value.shape()[0];
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.shape()[1];
                    if needs(p) {
                        let g = accumulate(adj, *p, m * w);
                        for r in 0..m {
                            for c in 0..w {
                                g[r * w + c] += dout[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                if needs(x) {
                    let n = nodes[x.0].value.shape()[1];
                    let len = numel(x);
                    let g = accumulate(adj, *x, len);
                    g[start * n..start * n + dout.len()]
                        .iter_mut()
                        .zip(dout)
                        .for_each(|(g, d)| *g += d);
                }
            }
            Op::SliceCols { x, start } => {
                if needs(x) {
                    let n = nodes[x.0].value.shape()[1];
                    let m = nodes[x.0].value.shape()[0];
                    let w = dout.len() / m.max(1);
                    let len = numel(x);
                    let g = accumulate(adj, *x, len);
                    for r in 0..m {
                        for c in 0..w {
                            g[r * n + start + c] += dout[r * w + c];
                        }
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                if needs(x) {
                    let n = nodes[x.0].value.shape()[1];
                    let len = numel(x);
                    let g = accumulate(adj, *x, len);
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..n {
                            g[r * n + c] += dout[i * n + c];
                        }
                    }
                }
            }
            Op::ScatterRows { parts } => {
                let cols = nodes[idx].value.shape()[1];
                for (v, positions) in parts {
                    if needs(v) {
                        let len = numel(v);
                        let g = accumulate(adj, *v, len);
                        for (i, &p) in positions.iter().enumerate() {
                            for c in 0..cols {
                                g[i * cols + c] += dout[p * cols + c];
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if needs(a) {
                    let len = numel(a);
                    let g = accumulate(adj, *a, len);
                    g.iter_mut().for_each(|g| *g += dout[0]);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let d = nodes[q.0].value.shape()[1];
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(q), val(k), val(v));
                let rows = nodes[q.0].value.shape()[0];
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut offset = 0;
                let mut dp = Vec::new();
                for seg in segments {
                    let l = seg.len;
                    for h in 0..*heads {
                        let c0 = h * dh;
                        let p = &probs[offset..offset + l * l];
                        for i in 0..l {
                            let row_i = (seg.start + i) * d + c0;
                            let doi = &dout[row_i..row_i + dh];
                            dp.clear();
                            for j in 0..=i {
                                let row_j = (seg.start + j) * d + c0;
                                let w = p[i * l + j];
                                let vj = &vd[row_j..row_j + dh];
                                dp.push(doi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>());
                                for c in 0..dh {
                                    dv[row_j + c] += w * doi[c];
                                }
                            }
                            let dot: f64 = (0..=i).map(|j| p[i * l + j] * dp[j]).sum();
                            for j in 0..=i {
                                let ds = p[i * l + j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let row_j = (seg.start + j) * d + c0;
                                for c in 0..dh {
                                    dq[row_i + c] += ds * kd[row_j + c];
                                    dk[row_j + c] += ds * qd[row_i + c];
                                }
                            }
                        }
                        offset += l * l;
                    }
                }
                for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
                    if needs(var) {
                        let g = accumulate(adj, *var, rows * d);
                        g.iter_mut().zip(&grad).for_each(|(g, d)| *g += d);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2)).unwrap();
        let m = g
            .constant(Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]).unwrap())
            .unwrap();
        let out = g.matmul(i, m).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn uniform_softmax() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0; 3]).unwrap()).unwrap();
        let s = g.softmax(x).unwrap();
        for &p in g.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_against_scalar_exp() {
        // exp(z_i) / sum_j exp(z_j), evaluated directly.
        let z = [1.0f64, 2.0, 3.0];
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        let oracle: Vec<f64> = z.iter().map(|v| v.exp() / denom).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(z.to_vec()).unwrap()).unwrap();
        let s = g.softmax(x).unwrap();
        for (a, b) in g.value(s).data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-15);
        }
        // 0.09003057317038046, 0.24472847105479764, 0.6652409557748219
        assert!((oracle[0] - 0.090_030_573_170_380_46).abs() < 1e-15);
        assert!((oracle[2] - 0.665_240_955_774_821_9).abs() < 1e-15);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::vector(vec![1000.0, 999.0, -1000.0]).unwrap())
            .unwrap();
        let s = g.softmax(x).unwrap();
        let sum: f64 = g.value(s).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let theta = g.param(Tensor::zeros(&[2, 3])).unwrap();
        let loss = g.sum(theta).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(theta).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_half_square_norm() {
        let mut g = Graph::new();
        let theta = g.param(Tensor::vector(vec![3.0, -4.0]).unwrap()).unwrap();
        let sq = g.mul(theta, theta).unwrap();
        let s = g.sum(sq).unwrap();
        let loss = g.scale(s, 0.5).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(theta).unwrap(), &[3.0, -4.0]);
    }

    #[test]
    fn repeated_backward_accumulates_and_zero_grad_clears() {
        let mut g = Graph::new();
        let theta = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        let loss = g.sum(theta).unwrap();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(theta).unwrap(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(theta).is_none());
    }

    #[test]
    fn rejects_non_scalar_loss_and_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.param(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.backward(a), Err(TensorError::NotScalar(_))));
        assert!(matches!(
            g.matmul(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            g.leaf(Tensor::from_parts(vec![1], vec![f64::INFINITY]), true),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn scatter_inverts_select() {
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::from_rows(&[&[1.0], &[2.0], &[3.0], &[4.0]]).unwrap())
            .unwrap();
        let evens = [0usize, 2];
        let odds = [1usize, 3];
        let a = g.select_rows(x, &evens).unwrap();
        let b = g.select_rows(x, &odds).unwrap();
        let back = g.scatter_rows(4, 1, &[(b, &odds), (a, &evens)]).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
        assert!(g.scatter_rows(4, 1, &[(a, &evens)]).is_err());
    }
}
