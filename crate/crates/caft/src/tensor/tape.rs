//! Wengert tape: ops record themselves on execution, backward replays the
//! record in exact reverse order and accumulates gradients into every node
//! that asked for them.

use super::{ensure_finite, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: f64 },
    AddBiasRows { x: TensorId, bias: TensorId },
    Matmul { a: TensorId, b: TensorId },
    Transpose { x: TensorId },
    Tanh { x: TensorId },
    Relu { x: TensorId },
    SoftmaxRows { x: TensorId },
    LogSoftmaxRows { x: TensorId },
    LayerNormRows { x: TensorId, gain: TensorId, bias: TensorId },
    MeanRows { x: TensorId },
    ConcatFeature { a: TensorId, b: TensorId },
    ConcatRows { parts: Vec<TensorId> },
    RepeatRows { x: TensorId, copies: usize },
    Reshape { x: TensorId },
    SliceCols { x: TensorId, start: usize, len: usize },
    Select { x: TensorId, index: usize },
    LogSumExp { xs: Vec<TensorId> },
    L2Distance { a: TensorId, b: TensorId },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Execution tape. One tape per forward/backward pass; independent tapes may
/// live on different threads, a single tape is strictly single-threaded.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const LN_EPS: f64 = 1e-5;

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

    /// Record an input node. `requires_grad` marks it as a differentiation
    /// target; gradients accumulate into it during [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Record a constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient buffer accumulated for `id` by the last [`Tape::backward`],
    /// if any flowed to it. Same length as the node's value.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a tracked node, zeros if none flowed to it.
    pub fn grad_or_zeros(&self, id: TensorId) -> Vec<f64> {
        match self.grad(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.nodes[id.0].value.numel()],
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { value, requires_grad, op });
        id
    }

    fn push_op(&mut self, op_name: &'static str, value: Tensor, parents: &[TensorId], op: Op) -> Result<TensorId> {
        ensure_finite(op_name, value.data())?;
        let requires = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(value, requires, op))
    }

    // ── Forward ops ──────────────────────────────────────────────────

    /// Elementwise sum of two equal-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("add preserves shape");
        self.push_op("add", value, &[a, b], Op::Add { a, b })
    }

    /// Elementwise product of two equal-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("mul preserves shape");
        self.push_op("mul", value, &[a, b], Op::Mul { a, b })
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let tx = self.value(x);
        let data: Vec<f64> = tx.data().iter().map(|v| c * v).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("scale preserves shape");
        self.push_op("scale", value, &[x], Op::Scale { x, c })
    }

    /// Add a length-N bias vector to every row of an M×N matrix.
    pub fn add_bias_rows(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.value(x).dims2()?;
        let tb = self.value(bias);
        if tb.shape() != [cols] {
            return Err(shape_err("add_bias_rows", format!("bias {:?} for {} columns", tb.shape(), cols)));
        }
        let tx = self.value(x);
        let tb = self.value(bias);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(tx.data()[r * cols + c] + tb.data()[c]);
            }
        }
        let value = Tensor::new(vec![rows, cols], data).expect("add_bias_rows shape");
        self.push_op("add_bias_rows", value, &[x, bias], Op::AddBiasRows { x, bias })
    }

    /// Matrix product of M×K by K×N.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(shape_err("matmul", format!("inner dims {} vs {}", ka, kb)));
        }
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for k in 0..ka {
                let aik = ta[i * ka + k];
                let brow = &tb[k * n..(k + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aik * brow[j];
                }
            }
        }
        let value = Tensor::new(vec![m, n], out).expect("matmul shape");
        self.push_op("matmul", value, &[a, b], Op::Matmul { a, b })
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.value(x).dims2()?;
        let tx = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = tx[r * cols + c];
            }
        }
        let value = Tensor::new(vec![cols, rows], out).expect("transpose shape");
        self.push_op("transpose", value, &[x], Op::Transpose { x })
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        let tx = self.value(x);
        let data: Vec<f64> = tx.data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("tanh preserves shape");
        self.push_op("tanh", value, &[x], Op::Tanh { x })
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let tx = self.value(x);
        let data: Vec<f64> = tx.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("relu preserves shape");
        self.push_op("relu", value, &[x], Op::Relu { x })
    }

    /// Row-wise softmax of an M×N matrix, max-shifted per row.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.value(x).dims2()?;
        let tx = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &tx[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, v) in row.iter().enumerate() {
                let e = (v - m).exp();
                out[r * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                out[r * cols + j] /= sum;
            }
        }
        let value = Tensor::new(vec![rows, cols], out).expect("softmax shape");
        self.push_op("softmax_rows", value, &[x], Op::SoftmaxRows { x })
    }

    /// Row-wise log-softmax of an M×N matrix.
    pub fn log_softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.value(x).dims2()?;
        let tx = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &tx[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..cols {
                out[r * cols + j] = row[j] - lse;
            }
        }
        let value = Tensor::new(vec![rows, cols], out).expect("log_softmax shape");
        self.push_op("log_softmax_rows", value, &[x], Op::LogSoftmaxRows { x })
    }

    /// Layer normalization over the feature (column) dimension with learned
    /// gain and bias vectors of length N.
    pub fn layer_norm_rows(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.value(x).dims2()?;
        if self.value(gain).shape() != [cols] || self.value(bias).shape() != [cols] {
            return Err(shape_err(
                "layer_norm_rows",
                format!(
                    "gain {:?} / bias {:?} for {} columns",
                    self.value(gain).shape(),
                    self.value(bias).shape(),
                    cols
                ),
            ));
        }
        let tx = self.value(x).data();
        let tg = self.value(gain).data();
        let tb = self.value(bias).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &tx[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..cols {
                out[r * cols + j] = tg[j] * (row[j] - mean) * inv + tb[j];
            }
        }
        let value = Tensor::new(vec![rows, cols], out).expect("layer_norm shape");
        self.push_op("layer_norm_rows", value, &[x, gain, bias], Op::LayerNormRows { x, gain, bias })
    }

    /// Mean over rows (the time axis): T×N → 1×N.
    pub fn mean_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.value(x).dims2()?;
        let tx = self.value(x).data();
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] += tx[r * cols + c];
            }
        }
        for v in &mut out {
            *v /= rows as f64;
        }
        let value = Tensor::new(vec![1, cols], out).expect("mean_rows shape");
        self.push_op("mean_rows", value, &[x], Op::MeanRows { x })
    }

    /// Row-by-row feature concatenation: T×H and T×D → T×(H+D).
    pub fn concat_feature(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ra, ca) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        if ra != rb {
            return Err(shape_err("concat_feature", format!("first dims {} vs {}", ra, rb)));
        }
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&ta[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&tb[r * cb..(r + 1) * cb]);
        }
        let value = Tensor::new(vec![ra, ca + cb], out).expect("concat_feature shape");
        self.push_op("concat_feature", value, &[a, b], Op::ConcatFeature { a, b })
    }

    /// Stack 2-D parts along the row (time) axis; all must share a column count.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::Empty { op: "concat_rows" });
        }
        let (_, cols) = self.value(parts[0]).dims2()?;
        let mut total_rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(shape_err("concat_rows", format!("columns {} vs {}", c, cols)));
            }
            total_rows += r;
        }
        let mut out = Vec::with_capacity(total_rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![total_rows, cols], out).expect("concat_rows shape");
        self.push_op("concat_rows", value, parts, Op::ConcatRows { parts: parts.to_vec() })
    }

    /// Broadcast a 1×N row to `copies`×N.
    pub fn repeat_rows(&mut self, x: TensorId, copies: usize) -> Result<TensorId> {
        let (rows, cols) = self.value(x).dims2()?;
        if rows != 1 {
            return Err(shape_err("repeat_rows", format!("expected 1×N input, got {}×{}", rows, cols)));
        }
        if copies == 0 {
            return Err(TensorError::Empty { op: "repeat_rows" });
        }
        let tx = self.value(x).data();
        let mut out = Vec::with_capacity(copies * cols);
        for _ in 0..copies {
            out.extend_from_slice(tx);
        }
        let value = Tensor::new(vec![copies, cols], out).expect("repeat_rows shape");
        self.push_op("repeat_rows", value, &[x], Op::RepeatRows { x, copies })
    }

    /// Reinterpret the elements under a new shape (same element count).
    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let tx = self.value(x);
        if shape.iter().product::<usize>() != tx.numel() {
            return Err(shape_err("reshape", format!("{:?} to {:?}", tx.shape(), shape)));
        }
        let value = Tensor::new(shape, tx.data().to_vec())?;
        self.push_op("reshape", value, &[x], Op::Reshape { x })
    }

    /// Column slice [start, start+len) of an M×N matrix.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (rows, cols) = self.value(x).dims2()?;
        if len == 0 || start + len > cols {
            return Err(shape_err("slice_cols", format!("[{}, {}) of {} columns", start, start + len, cols)));
        }
        let tx = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&tx[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new(vec![rows, len], out).expect("slice_cols shape");
        self.push_op("slice_cols", value, &[x], Op::SliceCols { x, start, len })
    }

    /// Pick one element by flat index as a scalar node.
    pub fn select(&mut self, x: TensorId, index: usize) -> Result<TensorId> {
        let tx = self.value(x);
        if index >= tx.numel() {
            return Err(shape_err("select", format!("index {} of {} elements", index, tx.numel())));
        }
        let value = Tensor::scalar(tx.data()[index]);
        self.push_op("select", value, &[x], Op::Select { x, index })
    }

    /// log Σ exp over a nonempty list of scalar nodes, max-shifted.
    /// Exact for a single element.
    pub fn logsumexp(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(TensorError::Empty { op: "logsumexp" });
        }
        let mut vals = Vec::with_capacity(xs.len());
        for &x in xs {
            let t = self.value(x);
            if t.numel() != 1 {
                return Err(shape_err("logsumexp", format!("inputs must be scalars, got {:?}", t.shape())));
            }
            vals.push(t.item());
        }
        let out = if vals.len() == 1 {
            vals[0]
        } else {
            let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        };
        let value = Tensor::scalar(out);
        self.push_op("logsumexp", value, xs, Op::LogSumExp { xs: xs.to_vec() })
    }

    /// Euclidean distance sqrt(Σ(a−b)²) between equal-shape tensors.
    /// The gradient at zero distance is defined as 0 (subgradient choice;
    /// the distance is non-smooth where the inputs coincide).
    pub fn l2_distance(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("l2_distance", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let sum: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(sum.sqrt());
        self.push_op("l2_distance", value, &[a, b], Op::L2Distance { a, b })
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. Traverses nodes in exact
    /// reverse execution order; every tracked ancestor accumulates the sum
    /// of contributions from all ops that consumed it.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward", format!("loss must be scalar, got {:?}", self.value(loss).shape())));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            // Loss does not depend on any tracked input; all grads are zero.
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = self.grads[i].take().expect("checked above");
            let op = self.nodes[i].op.clone();
            self.backward_op(&op, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, contribution: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(buf) => {
                for (acc, c) in buf.iter_mut().zip(contribution) {
                    *acc += c;
                }
            }
            None => self.grads[id.0] = Some(contribution.to_vec()),
        }
    }

    fn backward_op(&mut self, op: &Op, out_idx: usize, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Mul { a, b } => {
                let ga: Vec<f64> = g.iter().zip(self.nodes[b.0].value.data()).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = g.iter().zip(self.nodes[a.0].value.data()).map(|(g, x)| g * x).collect();
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            Op::Scale { x, c } => {
                let gx: Vec<f64> = g.iter().map(|g| c * g).collect();
                self.accumulate(x, &gx);
            }
            Op::AddBiasRows { x, bias } => {
                let cols = self.nodes[bias.0].value.numel();
                let rows = g.len() / cols;
                self.accumulate(x, g);
                let mut gb = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        gb[c] += g[r * cols + c];
                    }
                }
                self.accumulate(bias, &gb);
            }
            Op::Matmul { a, b } => {
                let (m, k) = self.nodes[a.0].value.dims2().expect("matmul parent is 2-D");
                let (_, n) = self.nodes[b.0].value.dims2().expect("matmul parent is 2-D");
                // dL/da = g · bᵀ
                let tb = self.nodes[b.0].value.data();
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        for kk in 0..k {
                            ga[i * k + kk] += gij * tb[kk * n + j];
                        }
                    }
                }
                // dL/db = aᵀ · g
                let ta = self.nodes[a.0].value.data();
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for kk in 0..k {
                        let aik = ta[i * k + kk];
                        for j in 0..n {
                            gb[kk * n + j] += aik * g[i * n + j];
                        }
                    }
                }
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            Op::Transpose { x } => {
                let (rows, cols) = self.nodes[x.0].value.dims2().expect("transpose parent is 2-D");
                // g has shape cols×rows; transpose it back.
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        gx[r * cols + c] = g[c * rows + r];
                    }
                }
                self.accumulate(x, &gx);
            }
            Op::Tanh { x } => {
                let y = self.nodes[out_idx].value.data();
                let gx: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(x, &gx);
            }
            Op::Relu { x } => {
                let tx = self.nodes[x.0].value.data();
                let gx: Vec<f64> = g.iter().zip(tx).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(x, &gx);
            }
            Op::SoftmaxRows { x } => {
                let y = self.nodes[out_idx].value.data();
                let (rows, cols) = self.nodes[out_idx].value.dims2().expect("softmax output is 2-D");
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..cols {
                        gx[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(x, &gx);
            }
            Op::LogSoftmaxRows { x } => {
                let y = self.nodes[out_idx].value.data();
                let (rows, cols) = self.nodes[out_idx].value.dims2().expect("log_softmax output is 2-D");
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..cols {
                        gx[r * cols + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                self.accumulate(x, &gx);
            }
            Op::LayerNormRows { x, gain, bias } => {
                let (rows, cols) = self.nodes[x.0].value.dims2().expect("layer_norm parent is 2-D");
                let tx = self.nodes[x.0].value.data().to_vec();
                let tg = self.nodes[gain.0].value.data().to_vec();
                let mut gx = vec![0.0; rows * cols];
                let mut ggain = vec![0.0; cols];
                let mut gbias = vec![0.0; cols];
                for r in 0..rows {
                    let row = &tx[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(&tg).map(|(g, gn)| g * gn).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / cols as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / cols as f64;
                    for j in 0..cols {
                        ggain[j] += gr[j] * xhat[j];
                        gbias[j] += gr[j];
                        gx[r * cols + j] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                self.accumulate(x, &gx);
                self.accumulate(gain, &ggain);
                self.accumulate(bias, &gbias);
            }
            Op::MeanRows { x } => {
                let (rows, cols) = self.nodes[x.0].value.dims2().expect("mean_rows parent is 2-D");
                let inv = 1.0 / rows as f64;
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        gx[r * cols + c] = g[c] * inv;
                    }
                }
                self.accumulate(x, &gx);
            }
            Op::ConcatFeature { a, b } => {
                let (rows, ca) = self.nodes[a.0].value.dims2().expect("concat parent is 2-D");
                let (_, cb) = self.nodes[b.0].value.dims2().expect("concat parent is 2-D");
                let mut ga = vec![0.0; rows * ca];
                let mut gb = vec![0.0; rows * cb];
                let w = ca + cb;
                for r in 0..rows {
                    ga[r * ca..(r + 1) * ca].copy_from_slice(&g[r * w..r * w + ca]);
                    gb[r * cb..(r + 1) * cb].copy_from_slice(&g[r * w + ca..(r + 1) * w]);
                }
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            Op::ConcatRows { ref parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    let gp = g[offset..offset + n].to_vec();
                    self.accumulate(p, &gp);
                    offset += n;
                }
            }
            Op::RepeatRows { x, copies } => {
                let cols = self.nodes[x.0].value.numel();
                let mut gx = vec![0.0; cols];
                for r in 0..copies {
                    for c in 0..cols {
                        gx[c] += g[r * cols + c];
                    }
                }
                self.accumulate(x, &gx);
            }
            Op::Reshape { x } => {
                self.accumulate(x, g);
            }
            Op::SliceCols { x, start, len } => {
                let (rows, cols) = self.nodes[x.0].value.dims2().expect("slice parent is 2-D");
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(x, &gx);
            }
            Op::Select { x, index } => {
                let mut gx = vec![0.0; self.nodes[x.0].value.numel()];
                gx[index] = g[0];
                self.accumulate(x, &gx);
            }
            Op::LogSumExp { ref xs } => {
                let out = self.nodes[out_idx].value.item();
                for &xi in xs {
                    let v = self.nodes[xi.0].value.item();
                    let gx = [g[0] * (v - out).exp()];
                    self.accumulate(xi, &gx);
                }
            }
            Op::L2Distance { a, b } => {
                let dist = self.nodes[out_idx].value.item();
                if dist == 0.0 {
                    return;
                }
                let ta = self.nodes[a.0].value.data();
                let tb = self.nodes[b.0].value.data();
                let ga: Vec<f64> = ta.iter().zip(tb).map(|(x, y)| g[0] * (x - y) / dist).collect();
                let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
        }
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}
