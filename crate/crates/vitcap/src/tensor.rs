//! Dense f64 tensors and a recording tape for reverse-mode
//! differentiation.
//!
//! Every differentiable primitive is a tape operation with a
//! hand-written backward rule. A forward pass records nodes in
//! evaluation order; `backward` replays them in reverse and accumulates
//! gradients additively, so values reused by several consumers receive
//! the sum of their downstream gradients. All op constructors validate
//! shapes and reject non-finite outputs.

use std::collections::BTreeMap;

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::rng;

/// Scale of the additive mask applied to blocked attention logits.
const MASK_VALUE: f64 = -1e9;

/// A dense row-major tensor with a gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` matches the shape and is
    /// finite throughout.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::InvalidArgument(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        ensure_finite("tensor", &data)?;
        let grad = vec![0.0; numel];
        Ok(Tensor { shape, data, grad })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            grad: vec![0.0; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Named tensor table holding model parameters.
///
/// Iteration order is always sorted by name, which fixes the order of
/// weight initialization, optimizer updates, and checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct Parameters {
    table: BTreeMap<String, Tensor>,
}

impl Parameters {
    pub fn new() -> Self {
        Parameters {
            table: BTreeMap::new(),
        }
    }

    /// Inserts a fresh parameter. Duplicate names are rejected.
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.table.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        self.table.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.table
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.table
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))
    }

    /// Entries in sorted name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.table.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.table.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.table.keys()
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Total number of scalar entries across all tensors.
    pub fn total_len(&self) -> usize {
        self.table.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.table.values_mut().for_each(Tensor::zero_grad);
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Param(String),
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    SoftmaxRows {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        // per-row statistics saved by the forward pass
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu {
        x: NodeId,
    },
    Lookup {
        table: NodeId,
        ids: Vec<u32>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        // post-softmax weights [Lq x Lk] saved by the forward pass
        weights: Vec<f64>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        width: usize,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    MeanRows {
        x: NodeId,
    },
    Sum {
        x: NodeId,
    },
    MeanAll {
        x: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
        pad: u32,
        active: usize,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
}

/// Arena of recorded operations for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, what: &str) -> Result<NodeId> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        ensure_finite(what, &value)?;
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node {
            op,
            shape,
            value,
            grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        let node = &self.nodes[id.0];
        if node.value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "node has shape {:?}, expected a scalar",
                node.shape
            )));
        }
        Ok(node.value[0])
    }

    /// Records a constant input. Its gradient is computed but not
    /// written anywhere.
    pub fn leaf(&mut self, t: &Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), "leaf")
    }

    /// Records a named parameter by copying its current value.
    /// `write_grads` later routes the node gradient back to the table.
    pub fn param(&mut self, name: &str, params: &Parameters) -> Result<NodeId> {
        let t = params.get(name)?;
        self.push(
            Op::Param(name.to_string()),
            t.shape.clone(),
            t.data.clone(),
            "param",
        )
    }

    fn dims2(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "{what}: expected a matrix, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    /// Matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a, "matmul lhs")?;
        let (kb, n) = self.dims2(b, "matmul rhs")?;
        if ka != kb {
            return Err(Error::InvalidArgument(format!(
                "matmul: inner dimensions differ ({ka} vs {kb})"
            )));
        }
        let out = mat_mul(self.value(a), self.value(b), m, ka, n);
        self.push(Op::MatMul { a, b }, vec![m, n], out, "matmul")
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::InvalidArgument(format!(
                "add: shapes differ ({:?} vs {:?})",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Add { a, b }, shape, out, "add")
    }

    /// Adds a length-n bias vector to every row of an `[m,n]` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "add_bias input")?;
        let bs = self.shape(bias);
        if bs != [n] {
            return Err(Error::InvalidArgument(format!(
                "add_bias: bias shape {bs:?} does not match row width {n}"
            )));
        }
        let xv = self.value(x);
        let bv = self.value(bias);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[r * n + c] = xv[r * n + c] + bv[c];
            }
        }
        self.push(Op::AddBias { x, bias }, vec![m, n], out, "add_bias")
    }

    /// Row-wise softmax of an `[m,n]` matrix.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "softmax input")?;
        if n == 0 {
            return Err(Error::InvalidArgument(
                "softmax: rows must be non-empty".into(),
            ));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            softmax_into(&xv[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n]);
        }
        self.push(Op::SoftmaxRows { x }, vec![m, n], out, "softmax")
    }

    /// Normalizes each row of `[m,n]` to zero mean and unit variance
    /// (population variance), then applies the affine pair
    /// `gamma`, `beta` of shape `[n]`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "layer_norm input")?;
        if n == 0 {
            return Err(Error::InvalidArgument(
                "layer_norm: rows must be non-empty".into(),
            ));
        }
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::InvalidArgument(format!(
                "layer_norm: gamma/beta must have shape [{n}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if !(eps.is_finite() && eps >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "layer_norm: eps must be finite and non-negative, got {eps}"
            )));
        }
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut out = vec![0.0; m * n];
        let mut mean = vec![0.0; m];
        let mut inv_std = vec![0.0; m];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let istd = 1.0 / (var + eps).sqrt();
            mean[r] = mu;
            inv_std[r] = istd;
            for c in 0..n {
                out[r * n + c] = (row[c] - mu) * istd * gv[c] + bv[c];
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            vec![m, n],
            out,
            "layer_norm",
        )
    }

    /// Elementwise tanh-form GELU.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.value(x).iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Gelu { x }, shape, out, "gelu")
    }

    /// Gathers rows of a `[v,d]` table: output row i is `table[ids[i]]`.
    pub fn lookup(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let (v, d) = self.dims2(table, "lookup table")?;
        for &id in ids {
            if id as usize >= v {
                return Err(Error::InvalidArgument(format!(
                    "lookup: id {id} out of range for table with {v} rows"
                )));
            }
        }
        let tv = self.value(table);
        let mut out = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&tv[id as usize * d..(id as usize + 1) * d]);
        }
        self.push(
            Op::Lookup {
                table,
                ids: ids.to_vec(),
            },
            vec![ids.len(), d],
            out,
            "lookup",
        )
    }

    /// Fused scaled dot-product attention over one head.
    ///
    /// Scores are `q k^T / sqrt(d)`; with `causal` set, entries above
    /// the diagonal get `-1e9` added before the softmax so position i
    /// attends only to positions <= i. The post-softmax weights are
    /// saved for the backward pass.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, causal: bool) -> Result<NodeId> {
        let (lq, d) = self.dims2(q, "attention query")?;
        let (lk, dk) = self.dims2(k, "attention key")?;
        let (lv, dv) = self.dims2(v, "attention value")?;
        if d != dk || lk != lv {
            return Err(Error::InvalidArgument(format!(
                "attention: incompatible shapes q[{lq},{d}] k[{lk},{dk}] v[{lv},{dv}]"
            )));
        }
        if d == 0 || lk == 0 {
            return Err(Error::InvalidArgument(
                "attention: key length and head width must be positive".into(),
            ));
        }
        if causal && lq != lk {
            return Err(Error::InvalidArgument(format!(
                "attention: causal mask needs square scores, got {lq}x{lk}"
            )));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let mut weights = vec![0.0; lq * lk];
        let mut scores = vec![0.0; lk];
        for i in 0..lq {
            for j in 0..lk {
                let mut s = 0.0;
                for t in 0..d {
                    s += qv[i * d + t] * kv[j * d + t];
                }
                scores[j] = s * scale;
                if causal && j > i {
                    scores[j] += MASK_VALUE;
                }
            }
            softmax_into(&scores, &mut weights[i * lk..(i + 1) * lk]);
        }
        let out = mat_mul(&weights, vv, lq, lk, dv);
        self.push(
            Op::Attention { q, k, v, weights },
            vec![lq, dv],
            out,
            "attention",
        )
    }

    /// Column slice `[m,n] -> [m,width]` starting at `start`.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "slice_cols input")?;
        if start + width > n || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "slice_cols: columns {start}..{} out of range for width {n}",
                start + width
            )));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; m * width];
        for r in 0..m {
            out[r * width..(r + 1) * width]
                .copy_from_slice(&xv[r * n + start..r * n + start + width]);
        }
        self.push(
            Op::SliceCols { x, start, width },
            vec![m, width],
            out,
            "slice_cols",
        )
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument(
                "concat_cols: need at least one part".into(),
            ));
        }
        let (m, _) = self.dims2(parts[0], "concat_cols part")?;
        let mut total = 0;
        for &p in parts {
            let (mp, np) = self.dims2(p, "concat_cols part")?;
            if mp != m {
                return Err(Error::InvalidArgument(format!(
                    "concat_cols: row counts differ ({m} vs {mp})"
                )));
            }
            total += np;
        }
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for &p in parts {
            let np = self.shape(p)[1];
            let pv = self.value(p);
            for r in 0..m {
                out[r * total + offset..r * total + offset + np]
                    .copy_from_slice(&pv[r * np..(r + 1) * np]);
            }
            offset += np;
        }
        self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            vec![m, total],
            out,
            "concat_cols",
        )
    }

    /// Column means over rows: `[m,n] -> [1,n]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "mean_rows input")?;
        if m == 0 {
            return Err(Error::InvalidArgument(
                "mean_rows: mean over zero rows is undefined".into(),
            ));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; n];
        for r in 0..m {
            for c in 0..n {
                out[c] += xv[r * n + c];
            }
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        self.push(Op::MeanRows { x }, vec![1, n], out, "mean_rows")
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(x).iter().sum();
        self.push(Op::Sum { x }, vec![], vec![total], "sum")
    }

    /// Mean of all entries, as a scalar node.
    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::InvalidArgument(
                "mean_all: mean of an empty tensor is undefined".into(),
            ));
        }
        let total: f64 = self.value(x).iter().sum();
        self.push(
            Op::MeanAll { x },
            vec![],
            vec![total / n as f64],
            "mean_all",
        )
    }

    /// Token-averaged cross-entropy from `[t,v]` logits.
    ///
    /// Rows whose target equals `pad` are excluded from both the loss
    /// and the gradient. Log-probabilities use a max-shifted
    /// log-sum-exp, so large logits do not overflow. A batch with no
    /// active rows is an error.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32], pad: u32) -> Result<NodeId> {
        let (t, v) = self.dims2(logits, "cross_entropy logits")?;
        if targets.len() != t {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: {} targets for {t} logit rows",
                targets.len()
            )));
        }
        if v == 0 {
            return Err(Error::InvalidArgument(
                "cross_entropy: vocabulary axis is empty".into(),
            ));
        }
        for &tok in targets {
            if tok != pad && tok as usize >= v {
                return Err(Error::InvalidArgument(format!(
                    "cross_entropy: target {tok} out of range for vocab {v}"
                )));
            }
        }
        let lv = self.value(logits);
        let mut active = 0usize;
        let mut total = 0.0;
        for (r, &tok) in targets.iter().enumerate() {
            if tok == pad {
                continue;
            }
            active += 1;
            let row = &lv[r * v..(r + 1) * v];
            total += log_sum_exp(row) - row[tok as usize];
        }
        if active == 0 {
            return Err(Error::Numeric(
                "cross_entropy: every target is padding, loss is undefined".into(),
            ));
        }
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad,
                active,
            },
            vec![],
            vec![total / active as f64],
            "cross_entropy",
        )
    }

    /// Runs reverse-mode accumulation from a scalar root.
    ///
    /// Replays nodes in reverse record order, adding each node's
    /// contribution to its inputs' gradients. Running it twice without
    /// `reset_grads` is an error.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::InvalidArgument(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        self.backward_done = true;
        self.nodes[root.0].grad[0] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            self.step_backward(i)?;
        }
        Ok(())
    }

    /// Clears all node gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.backward_done = false;
    }

    /// Adds node gradients of parameter nodes into the table's
    /// gradient buffers. Requires a completed backward pass.
    pub fn write_grads(&self, params: &mut Parameters) -> Result<()> {
        if !self.backward_done {
            return Err(Error::InvalidArgument(
                "write_grads called before backward".into(),
            ));
        }
        for node in &self.nodes {
            if let Op::Param(name) = &node.op {
                let t = params.get_mut(name)?;
                if t.shape() != node.shape.as_slice() {
                    return Err(Error::InvalidArgument(format!(
                        "parameter {name:?} changed shape since the forward pass"
                    )));
                }
                for (g, d) in t.grad_mut().iter_mut().zip(&node.grad) {
                    *g += d;
                }
            }
        }
        Ok(())
    }

    fn step_backward(&mut self, i: usize) -> Result<()> {
        // Take the node's gradient out so inputs can be borrowed freely.
        let grad = std::mem::take(&mut self.nodes[i].grad);
        let shape = std::mem::take(&mut self.nodes[i].shape);
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = shape[1];
                let da = mat_mul_nt(&grad, &self.nodes[b.0].value, m, n, k);
                let db = mat_mul_tn(&self.nodes[a.0].value, &grad, m, k, n);
                add_into(&mut self.nodes[a.0].grad, &da);
                add_into(&mut self.nodes[b.0].grad, &db);
            }
            Op::Add { a, b } => {
                add_into(&mut self.nodes[a.0].grad, &grad);
                add_into(&mut self.nodes[b.0].grad, &grad);
            }
            Op::AddBias { x, bias } => {
                let (m, n) = (shape[0], shape[1]);
                add_into(&mut self.nodes[x.0].grad, &grad);
                for r in 0..m {
                    for c in 0..n {
                        self.nodes[bias.0].grad[c] += grad[r * n + c];
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                let (m, n) = (shape[0], shape[1]);
                let y = &self.nodes[i].value;
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let dot: f64 = (0..n).map(|c| grad[r * n + c] * y[r * n + c]).sum();
                    for c in 0..n {
                        dx[r * n + c] = y[r * n + c] * (grad[r * n + c] - dot);
                    }
                }
                add_into(&mut self.nodes[x.0].grad, &dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (m, n) = (shape[0], shape[1]);
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gamma.0].value;
                let mut dx = vec![0.0; m * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for r in 0..m {
                    let istd = inv_std[r];
                    let mu = mean[r];
                    // xhat and dxhat for this row
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    let mut xh = vec![0.0; n];
                    let mut dxh = vec![0.0; n];
                    for c in 0..n {
                        xh[c] = (xv[r * n + c] - mu) * istd;
                        dxh[c] = grad[r * n + c] * gv[c];
                        sum_dxh += dxh[c];
                        sum_dxh_xh += dxh[c] * xh[c];
                        dgamma[c] += grad[r * n + c] * xh[c];
                        dbeta[c] += grad[r * n + c];
                    }
                    let inv_n = 1.0 / n as f64;
                    for c in 0..n {
                        dx[r * n + c] =
                            istd * (dxh[c] - sum_dxh * inv_n - xh[c] * sum_dxh_xh * inv_n);
                    }
                }
                add_into(&mut self.nodes[x.0].grad, &dx);
                add_into(&mut self.nodes[gamma.0].grad, &dgamma);
                add_into(&mut self.nodes[beta.0].grad, &dbeta);
            }
            Op::Gelu { x } => {
                let xv = &self.nodes[x.0].value;
                let dx: Vec<f64> = xv
                    .iter()
                    .zip(&grad)
                    .map(|(&v, &g)| g * gelu_derivative(v))
                    .collect();
                add_into(&mut self.nodes[x.0].grad, &dx);
            }
            Op::Lookup { table, ids } => {
                let d = shape[1];
                for (row, &id) in ids.iter().enumerate() {
                    let dst = &mut self.nodes[table.0].grad[id as usize * d..(id as usize + 1) * d];
                    for (g, s) in dst.iter_mut().zip(&grad[row * d..(row + 1) * d]) {
                        *g += s;
                    }
                }
            }
            Op::Attention { q, k, v, weights } => {
                let lq = shape[0];
                let dh = self.nodes[q.0].shape[1];
                let lk = self.nodes[k.0].shape[0];
                let dv = self.nodes[v.0].shape[1];
                let scale = 1.0 / (dh as f64).sqrt();
                // dV = A^T dOut
                let dvg = mat_mul_tn(weights, &grad, lq, lk, dv);
                add_into(&mut self.nodes[v.0].grad, &dvg);
                // dA = dOut V^T, then softmax backward to dS
                let da = mat_mul_nt(&grad, &self.nodes[v.0].value, lq, dv, lk);
                let mut ds = vec![0.0; lq * lk];
                for r in 0..lq {
                    let dot: f64 = (0..lk).map(|c| da[r * lk + c] * weights[r * lk + c]).sum();
                    for c in 0..lk {
                        ds[r * lk + c] = weights[r * lk + c] * (da[r * lk + c] - dot);
                    }
                }
                // dQ = dS K * scale, dK = dS^T Q * scale
                let mut dq = mat_mul(&ds, &self.nodes[k.0].value, lq, lk, dh);
                dq.iter_mut().for_each(|g| *g *= scale);
                add_into(&mut self.nodes[q.0].grad, &dq);
                let mut dk = mat_mul_tn(&ds, &self.nodes[q.0].value, lq, lk, dh);
                dk.iter_mut().for_each(|g| *g *= scale);
                add_into(&mut self.nodes[k.0].grad, &dk);
            }
            Op::SliceCols { x, start, width } => {
                let m = shape[0];
                let n = self.nodes[x.0].shape[1];
                for r in 0..m {
                    for c in 0..*width {
                        self.nodes[x.0].grad[r * n + start + c] += grad[r * width + c];
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let m = shape[0];
                let total = shape[1];
                let mut offset = 0;
                for &p in parts {
                    let np = self.nodes[p.0].shape[1];
                    for r in 0..m {
                        for c in 0..np {
                            self.nodes[p.0].grad[r * np + c] += grad[r * total + offset + c];
                        }
                    }
                    offset += np;
                }
            }
            Op::MeanRows { x } => {
                let m = self.nodes[x.0].shape[0];
                let n = shape[1];
                let inv_m = 1.0 / m as f64;
                for r in 0..m {
                    let row = &mut self.nodes[x.0].grad[r * n..(r + 1) * n];
                    for (d, g) in row.iter_mut().zip(&grad) {
                        *d += g * inv_m;
                    }
                }
            }
            Op::Sum { x } => {
                let g = grad[0];
                self.nodes[x.0].grad.iter_mut().for_each(|d| *d += g);
            }
            Op::MeanAll { x } => {
                let n = self.nodes[x.0].value.len();
                let g = grad[0] / n as f64;
                self.nodes[x.0].grad.iter_mut().for_each(|d| *d += g);
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                active,
            } => {
                let v = self.nodes[logits.0].shape[1];
                let g = grad[0] / *active as f64;
                let lv = self.nodes[logits.0].value.clone();
                let mut probs = vec![0.0; v];
                for (r, &tok) in targets.iter().enumerate() {
                    if tok == *pad {
                        continue;
                    }
                    softmax_into(&lv[r * v..(r + 1) * v], &mut probs);
                    let dst = &mut self.nodes[logits.0].grad[r * v..(r + 1) * v];
                    for c in 0..v {
                        dst[c] += g * probs[c];
                    }
                    dst[tok as usize] -= g;
                }
            }
        }
        self.nodes[i].grad = grad;
        self.nodes[i].shape = shape;
        self.nodes[i].op = op;
        Ok(())
    }
}

/// Report from a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_error: f64,
    /// Parameter holding the worst coordinate.
    pub worst_tensor: String,
    /// Flat index of the worst coordinate within that parameter.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Compares analytic gradients against central differences.
///
/// `backward` must run the full forward and backward pass once,
/// leaving gradients in `params` and returning the loss. `loss` must
/// recompute the same scalar from current parameter values. At least
/// `min_coords` coordinates are probed, at least one per tensor,
/// sampled without replacement from the `seed` stream. The relative
/// error at a coordinate is `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<L, B>(
    params: &mut Parameters,
    mut loss: L,
    backward: B,
    h: f64,
    min_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    L: FnMut(&Parameters) -> Result<f64>,
    B: FnOnce(&mut Parameters) -> Result<f64>,
{
    if !(h.is_finite() && h > 0.0 && h <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "step size must lie in (0, 1e-2], got {h}"
        )));
    }
    if min_coords == 0 {
        return Err(Error::InvalidArgument(
            "gradient check needs at least one coordinate".into(),
        ));
    }
    if params.is_empty() {
        return Err(Error::InvalidArgument(
            "gradient check needs a non-empty parameter table".into(),
        ));
    }

    params.zero_grads();
    let base_loss = backward(params)?;
    if !base_loss.is_finite() {
        return Err(Error::Numeric(format!(
            "gradient check loss is not finite: {base_loss}"
        )));
    }
    let analytic: Vec<(String, Vec<f64>)> = params
        .iter()
        .map(|(name, t)| (name.clone(), t.grad().to_vec()))
        .collect();

    // Quotas proportional to tensor size, at least one per tensor,
    // topped up in name order until min_coords is reached.
    let sizes: Vec<usize> = params.iter().map(|(_, t)| t.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut quotas: Vec<usize> = sizes
        .iter()
        .map(|&s| ((min_coords * s) / total).max(1).min(s))
        .collect();
    let mut assigned: usize = quotas.iter().sum();
    let mut cursor = 0;
    while assigned < min_coords && quotas.iter().zip(&sizes).any(|(q, s)| q < s) {
        if quotas[cursor] < sizes[cursor] {
            quotas[cursor] += 1;
            assigned += 1;
        }
        cursor = (cursor + 1) % quotas.len();
    }

    let mut rng = rng::labeled(seed, "gradcheck");
    let mut plan: Vec<(String, usize)> = Vec::with_capacity(assigned);
    for ((name, grads), quota) in analytic.iter().zip(&quotas) {
        for idx in sample(&mut rng, grads.len(), *quota) {
            plan.push((name.clone(), idx));
        }
    }

    let mut report = GradCheckReport {
        coords_checked: 0,
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    for (name, idx) in plan {
        let orig = params.get(&name)?.data()[idx];
        params.get_mut(&name)?.data_mut()[idx] = orig + h;
        let up = loss(&*params)?;
        params.get_mut(&name)?.data_mut()[idx] = orig - h;
        let down = loss(&*params)?;
        params.get_mut(&name)?.data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        if !numeric.is_finite() {
            return Err(Error::Numeric(format!(
                "finite difference at {name}[{idx}] is not finite"
            )));
        }
        let a = analytic
            .iter()
            .find(|(n, _)| n == &name)
            .map(|(_, g)| g[idx])
            .unwrap_or(0.0);
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        report.coords_checked += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_tensor = name;
            report.worst_index = idx;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}

fn ensure_finite(what: &str, vals: &[f64]) -> Result<()> {
    for &v in vals {
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "{what} produced a non-finite value ({v})"
            )));
        }
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `[m,k] x [k,n]` row-major product.
fn mat_mul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// `a [m,n] x b^T` where b is `[k,n]`, giving `[m,k]`.
fn mat_mul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..k {
            let mut s = 0.0;
            for t in 0..n {
                s += a[i * n + t] * b[j * n + t];
            }
            out[i * k + j] = s;
        }
    }
    out
}

/// `a^T x b` where a is `[m,k]` and b is `[m,n]`, giving `[k,n]`.
fn mat_mul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for t in 0..m {
        for i in 0..k {
            let av = a[t * k + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// Max-shifted softmax of one row.
fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Max-shifted log(sum(exp(row))).
fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
