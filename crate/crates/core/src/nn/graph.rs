use std::collections::HashMap;

use super::{NnError, Tensor};

const LN_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Input { name: String },
    MatMul { a: NodeId, b: NodeId },
    /// a @ b^T with b stored row-major, so both operands stream by rows.
    MatMulBT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddRowBias { a: NodeId, bias: NodeId },
    Scale { a: NodeId, c: f64 },
    Gelu { a: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    Softmax { a: NodeId },
    CausalSelfAttention { q: NodeId, k: NodeId, v: NodeId, n_heads: usize },
    RowConcat { parts: Vec<NodeId> },
    SliceRows { a: NodeId, start: usize, len: usize },
    EmbedRows { table: NodeId, ids: Vec<usize> },
    Sum { a: NodeId },
    /// Mean over (row, label) pairs of -log softmax(logits[row])[label].
    CeAtPositions { logits: NodeId, pairs: Vec<(usize, usize)> },
    /// Like CeAtPositions but labels are a (rows × vocab) weight matrix node.
    CeSoftRows { logits: NodeId, soft: NodeId, rows: Vec<usize> },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f64>>,
    /// Cached per-op state from the forward pass (attention probabilities,
    /// layernorm row statistics).
    aux: Vec<f64>,
}

/// Reverse-mode tape. Ops evaluate eagerly when pushed; inputs can be
/// rebound and the whole graph re-evaluated with [`Graph::forward`].
pub struct Graph {
    nodes: Vec<Node>,
    inputs: HashMap<String, NodeId>,
    evaluated: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), inputs: HashMap::new(), evaluated: true }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op) -> Result<NodeId, NnError> {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value: Tensor::zeros(vec![0]), grad: None, aux: Vec::new() });
        self.eval_node(id.0)?;
        Ok(id)
    }

    // ── graph construction ──────────────────────────────────────────────

    pub fn input(&mut self, name: &str, value: Tensor) -> Result<NodeId, NnError> {
        if !value.all_finite() {
            return Err(NnError::NonFinite { op: "input" });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Input { name: name.to_string() },
            value,
            grad: None,
            aux: Vec::new(),
        });
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    /// Rebind a named input to a new tensor of identical shape; the graph
    /// must be re-run with [`Graph::forward`] before reading values.
    pub fn set_input(&mut self, name: &str, value: Tensor) -> Result<(), NnError> {
        let id = *self.inputs.get(name).ok_or_else(|| NnError::UnknownInput(name.to_string()))?;
        if self.nodes[id.0].value.shape() != value.shape() {
            return Err(NnError::ShapeMismatch {
                op: "set_input",
                detail: format!(
                    "input {name:?} has shape {:?}, got {:?}",
                    self.nodes[id.0].value.shape(),
                    value.shape()
                ),
            });
        }
        if !value.all_finite() {
            return Err(NnError::NonFinite { op: "input" });
        }
        self.nodes[id.0].value = value;
        self.evaluated = false;
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.push(Op::MatMul { a, b })
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.push(Op::MatMulBT { a, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.push(Op::Add { a, b })
    }

    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, NnError> {
        self.push(Op::AddRowBias { a, bias })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, NnError> {
        self.push(Op::Scale { a, c })
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        self.push(Op::Gelu { a })
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId, NnError> {
        self.push(Op::LayerNorm { x, gamma, beta })
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        self.push(Op::Softmax { a })
    }

    pub fn causal_self_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
    ) -> Result<NodeId, NnError> {
        self.push(Op::CausalSelfAttention { q, k, v, n_heads })
    }

    pub fn row_concat(&mut self, parts: Vec<NodeId>) -> Result<NodeId, NnError> {
        self.push(Op::RowConcat { parts })
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, NnError> {
        self.push(Op::SliceRows { a, start, len })
    }

    pub fn embed_rows(&mut self, table: NodeId, ids: Vec<usize>) -> Result<NodeId, NnError> {
        self.push(Op::EmbedRows { table, ids })
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        self.push(Op::Sum { a })
    }

    pub fn ce_at_positions(
        &mut self,
        logits: NodeId,
        pairs: Vec<(usize, usize)>,
    ) -> Result<NodeId, NnError> {
        self.push(Op::CeAtPositions { logits, pairs })
    }

    /// Mean over target positions of -log softmax(logits[i])[target_ids[i]].
    /// `logits` must provide one row per target.
    pub fn cross_entropy_target(
        &mut self,
        logits: NodeId,
        target_ids: &[usize],
    ) -> Result<NodeId, NnError> {
        let rows = self.nodes[logits.0].value.rows();
        if rows != target_ids.len() {
            return Err(NnError::ShapeMismatch {
                op: "cross_entropy_target",
                detail: format!("{} logit rows vs {} targets", rows, target_ids.len()),
            });
        }
        let pairs = target_ids.iter().copied().enumerate().collect();
        self.push(Op::CeAtPositions { logits, pairs })
    }

    pub fn ce_soft_rows(
        &mut self,
        logits: NodeId,
        soft: NodeId,
        rows: Vec<usize>,
    ) -> Result<NodeId, NnError> {
        self.push(Op::CeSoftRows { logits, soft, rows })
    }

    // ── forward ─────────────────────────────────────────────────────────

    /// Re-evaluate every non-input node in construction order.
    pub fn forward(&mut self) -> Result<(), NnError> {
        for i in 0..self.nodes.len() {
            if !matches!(self.nodes[i].op, Op::Input { .. }) {
                self.eval_node(i)?;
            }
        }
        self.evaluated = true;
        Ok(())
    }

    fn eval_node(&mut self, i: usize) -> Result<(), NnError> {
        let op = self.nodes[i].op.clone();
        let (value, aux) = self.eval_op(&op)?;
        if !value.all_finite() {
            return Err(NnError::NonFinite { op: op_name(&op) });
        }
        self.nodes[i].value = value;
        self.nodes[i].aux = aux;
        Ok(())
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn eval_op(&self, op: &Op) -> Result<(Tensor, Vec<f64>), NnError> {
        let t = match op {
            Op::Input { .. } => unreachable!("inputs are never re-evaluated"),
            Op::MatMul { a, b } => {
                let (a, b) = (self.val(*a), self.val(*b));
                let (m, ka) = (a.rows(), a.cols());
                let (kb, n) = (b.rows(), b.cols());
                if ka != kb {
                    return Err(shape_err("matmul", a, b));
                }
                let mut out = vec![0.0f32; m * n];
                let mut acc = vec![0.0f64; n];
                for i in 0..m {
                    acc.iter_mut().for_each(|x| *x = 0.0);
                    let ar = a.row(i);
                    for (k, &aik) in ar.iter().enumerate() {
                        let br = b.row(k);
                        let aik = aik as f64;
                        for (j, &bkj) in br.iter().enumerate() {
                            acc[j] += aik * bkj as f64;
                        }
                    }
                    for j in 0..n {
                        out[i * n + j] = acc[j] as f32;
                    }
                }
                (Tensor::new(vec![m, n], out)?, Vec::new())
            }
            Op::MatMulBT { a, b } => {
                let (a, b) = (self.val(*a), self.val(*b));
                let (m, ka) = (a.rows(), a.cols());
                let (n, kb) = (b.rows(), b.cols());
                if ka != kb {
                    return Err(shape_err("matmul_bt", a, b));
                }
                let mut out = vec![0.0f32; m * n];
                for i in 0..m {
                    let ar = a.row(i);
                    for j in 0..n {
                        let br = b.row(j);
                        let mut acc = 0.0f64;
                        for (x, y) in ar.iter().zip(br.iter()) {
                            acc += *x as f64 * *y as f64;
                        }
                        out[i * n + j] = acc as f32;
                    }
                }
                (Tensor::new(vec![m, n], out)?, Vec::new())
            }
            Op::Add { a, b } => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.shape() != b.shape() {
                    return Err(shape_err("add", a, b));
                }
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                (Tensor::new(a.shape().to_vec(), data)?, Vec::new())
            }
            Op::AddRowBias { a, bias } => {
                let (a, bias) = (self.val(*a), self.val(*bias));
                if a.cols() != bias.numel() {
                    return Err(shape_err("add_row_bias", a, bias));
                }
                let cols = a.cols();
                let data = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x + bias.data()[i % cols])
                    .collect();
                (Tensor::new(a.shape().to_vec(), data)?, Vec::new())
            }
            Op::Scale { a, c } => {
                let a = self.val(*a);
                let data = a.data().iter().map(|x| (*x as f64 * c) as f32).collect();
                (Tensor::new(a.shape().to_vec(), data)?, Vec::new())
            }
            Op::Gelu { a } => {
                let a = self.val(*a);
                let data = a.data().iter().map(|&x| gelu_f(x as f64) as f32).collect();
                (Tensor::new(a.shape().to_vec(), data)?, Vec::new())
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (x, gamma, beta) = (self.val(*x), self.val(*gamma), self.val(*beta));
                let d = x.cols();
                if gamma.numel() != d || beta.numel() != d {
                    return Err(shape_err("layer_norm", x, gamma));
                }
                let rows = x.rows();
                let mut out = vec![0.0f32; rows * d];
                // aux holds (mean, inv_std) per row
                let mut aux = Vec::with_capacity(rows * 2);
                for r in 0..rows {
                    let row = x.row(r);
                    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                    let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + LN_EPS).sqrt();
                    aux.push(mean);
                    aux.push(inv_std);
                    for j in 0..d {
                        let xh = (row[j] as f64 - mean) * inv_std;
                        out[r * d + j] =
                            (xh * gamma.data()[j] as f64 + beta.data()[j] as f64) as f32;
                    }
                }
                (Tensor::new(x.shape().to_vec(), out)?, aux)
            }
            Op::Softmax { a } => {
                let a = self.val(*a);
                let (rows, cols) = (a.rows(), a.cols());
                let mut out = vec![0.0f32; rows * cols];
                for r in 0..rows {
                    softmax_row_into(a.row(r), &mut out[r * cols..(r + 1) * cols]);
                }
                (Tensor::new(a.shape().to_vec(), out)?, Vec::new())
            }
            Op::CausalSelfAttention { q, k, v, n_heads } => {
                let (q, k, v) = (self.val(*q), self.val(*k), self.val(*v));
                if q.shape() != k.shape() || q.shape() != v.shape() {
                    return Err(shape_err("attention", q, k));
                }
                let (s, d) = (q.rows(), q.cols());
                let h = *n_heads;
                if d % h != 0 {
                    return Err(NnError::ShapeMismatch {
                        op: "attention",
                        detail: format!("d_model {} not divisible by {} heads", d, h),
                    });
                }
                let dh = d / h;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut out = vec![0.0f32; s * d];
                // aux caches probabilities: h heads × s rows × s cols
                let mut probs = vec![0.0f64; h * s * s];
                for head in 0..h {
                    let off = head * dh;
                    for i in 0..s {
                        let qi = &q.row(i)[off..off + dh];
                        // scores over j <= i
                        let mut row = vec![0.0f64; i + 1];
                        for (j, rj) in row.iter_mut().enumerate() {
                            let kj = &k.row(j)[off..off + dh];
                            let mut acc = 0.0f64;
                            for (x, y) in qi.iter().zip(kj.iter()) {
                                acc += *x as f64 * *y as f64;
                            }
                            *rj = acc * scale;
                        }
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut denom = 0.0f64;
                        for rj in row.iter_mut() {
                            *rj = (*rj - max).exp();
                            denom += *rj;
                        }
                        for (j, rj) in row.iter().enumerate() {
                            let p = rj / denom;
                            probs[head * s * s + i * s + j] = p;
                            let vj = &v.row(j)[off..off + dh];
                            for (x, &vv) in vj.iter().enumerate() {
                                out[i * d + off + x] += (p * vv as f64) as f32;
                            }
                        }
                    }
                }
                (Tensor::new(vec![s, d], out)?, probs)
            }
            Op::RowConcat { parts } => {
                let cols = self.val(parts[0]).cols();
                let mut rows = 0;
                for p in parts {
                    let t = self.val(*p);
                    if t.cols() != cols {
                        return Err(NnError::ShapeMismatch {
                            op: "row_concat",
                            detail: format!("column mismatch {} vs {}", t.cols(), cols),
                        });
                    }
                    rows += t.rows();
                }
                let mut data = Vec::with_capacity(rows * cols);
                for p in parts {
                    data.extend_from_slice(self.val(*p).data());
                }
                (Tensor::new(vec![rows, cols], data)?, Vec::new())
            }
            Op::SliceRows { a, start, len } => {
                let a = self.val(*a);
                if start + len > a.rows() {
                    return Err(NnError::ShapeMismatch {
                        op: "slice_rows",
                        detail: format!("rows {}..{} out of {}", start, start + len, a.rows()),
                    });
                }
                let cols = a.cols();
                let data = a.data()[start * cols..(start + len) * cols].to_vec();
                (Tensor::new(vec![*len, cols], data)?, Vec::new())
            }
            Op::EmbedRows { table, ids } => {
                let table = self.val(*table);
                let cols = table.cols();
                let mut data = Vec::with_capacity(ids.len() * cols);
                for &id in ids {
                    if id >= table.rows() {
                        return Err(NnError::ShapeMismatch {
                            op: "embed_rows",
                            detail: format!("row {} out of {}", id, table.rows()),
                        });
                    }
                    data.extend_from_slice(table.row(id));
                }
                (Tensor::new(vec![ids.len(), cols], data)?, Vec::new())
            }
            Op::Sum { a } => {
                let a = self.val(*a);
                let s: f64 = a.data().iter().map(|&v| v as f64).sum();
                (Tensor::scalar(s as f32), Vec::new())
            }
            Op::CeAtPositions { logits, pairs } => {
                let logits = self.val(*logits);
                let (rows, cols) = (logits.rows(), logits.cols());
                let mut total = 0.0f64;
                for &(row, label) in pairs {
                    if row >= rows || label >= cols {
                        return Err(NnError::ShapeMismatch {
                            op: "ce_at_positions",
                            detail: format!("pair ({row},{label}) out of {rows}x{cols}"),
                        });
                    }
                    let r = logits.row(row);
                    total += log_sum_exp(r) - r[label] as f64;
                }
                (Tensor::scalar((total / pairs.len() as f64) as f32), Vec::new())
            }
            Op::CeSoftRows { logits, soft, rows } => {
                let (logits, soft) = (self.val(*logits), self.val(*soft));
                if soft.rows() != rows.len() || soft.cols() != logits.cols() {
                    return Err(shape_err("ce_soft_rows", logits, soft));
                }
                let mut total = 0.0f64;
                for (j, &row) in rows.iter().enumerate() {
                    let r = logits.row(row);
                    let lse = log_sum_exp(r);
                    let w = soft.row(j);
                    let mut acc = 0.0f64;
                    for (x, &wv) in r.iter().zip(w.iter()) {
                        acc += wv as f64 * (lse - *x as f64);
                    }
                    total += acc;
                }
                (Tensor::scalar((total / rows.len() as f64) as f32), Vec::new())
            }
        };
        Ok(t)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Backpropagate from a scalar loss node. Gradients accumulate in f64
    /// buffers and are read back as f32 tensors.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NnError> {
        if !self.evaluated {
            return Err(NnError::BackwardBeforeForward);
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(NnError::NonScalarLoss);
        }
        for n in self.nodes.iter_mut() {
            n.grad = Some(vec![0.0f64; n.value.numel()]);
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = 1.0;

        for i in (0..=loss.0).rev() {
            let g = self.nodes[i].grad.clone().unwrap();
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Input { .. } => {}
                Op::MatMul { a, b } => {
                    let (av, bv) = (self.val(a).clone(), self.val(b).clone());
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    {
                        let da = self.nodes[a.0].grad.as_mut().unwrap();
                        for i2 in 0..m {
                            for x in 0..k {
                                let br = bv.row(x);
                                let mut acc = 0.0f64;
                                for j in 0..n {
                                    acc += g[i2 * n + j] * br[j] as f64;
                                }
                                da[i2 * k + x] += acc;
                            }
                        }
                    }
                    {
                        let db = self.nodes[b.0].grad.as_mut().unwrap();
                        for x in 0..k {
                            for i2 in 0..m {
                                let axi = av.data()[i2 * k + x] as f64;
                                if axi == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    db[x * n + j] += axi * g[i2 * n + j];
                                }
                            }
                        }
                    }
                }
                Op::MatMulBT { a, b } => {
                    let (av, bv) = (self.val(a).clone(), self.val(b).clone());
                    let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                    {
                        let da = self.nodes[a.0].grad.as_mut().unwrap();
                        for i2 in 0..m {
                            for j in 0..n {
                                let gij = g[i2 * n + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                let br = bv.row(j);
                                for x in 0..k {
                                    da[i2 * k + x] += gij * br[x] as f64;
                                }
                            }
                        }
                    }
                    {
                        let db = self.nodes[b.0].grad.as_mut().unwrap();
                        for j in 0..n {
                            for i2 in 0..m {
                                let gij = g[i2 * n + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                let ar = av.row(i2);
                                for x in 0..k {
                                    db[j * k + x] += gij * ar[x] as f64;
                                }
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for id in [a, b] {
                        let d = self.nodes[id.0].grad.as_mut().unwrap();
                        for (dv, gv) in d.iter_mut().zip(g.iter()) {
                            *dv += gv;
                        }
                    }
                }
                Op::AddRowBias { a, bias } => {
                    {
                        let da = self.nodes[a.0].grad.as_mut().unwrap();
                        for (dv, gv) in da.iter_mut().zip(g.iter()) {
                            *dv += gv;
                        }
                    }
                    let cols = self.val(bias).numel();
                    let db = self.nodes[bias.0].grad.as_mut().unwrap();
                    for (i2, gv) in g.iter().enumerate() {
                        db[i2 % cols] += gv;
                    }
                }
                Op::Scale { a, c } => {
                    let da = self.nodes[a.0].grad.as_mut().unwrap();
                    for (dv, gv) in da.iter_mut().zip(g.iter()) {
                        *dv += gv * c;
                    }
                }
                Op::Gelu { a } => {
                    let av = self.val(a).clone();
                    let da = self.nodes[a.0].grad.as_mut().unwrap();
                    for (i2, (dv, gv)) in da.iter_mut().zip(g.iter()).enumerate() {
                        *dv += gv * gelu_df(av.data()[i2] as f64);
                    }
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let xv = self.val(x).clone();
                    let gv_ = self.val(gamma).clone();
                    let aux = self.nodes[i].aux.clone();
                    let d = xv.cols();
                    let rows = xv.rows();
                    let mut dx = vec![0.0f64; rows * d];
                    let mut dgamma = vec![0.0f64; d];
                    let mut dbeta = vec![0.0f64; d];
                    for r in 0..rows {
                        let mean = aux[r * 2];
                        let inv_std = aux[r * 2 + 1];
                        let row = xv.row(r);
                        let gr = &g[r * d..(r + 1) * d];
                        let xhat: Vec<f64> =
                            row.iter().map(|&v| (v as f64 - mean) * inv_std).collect();
                        let mut dxhat = vec![0.0f64; d];
                        for j in 0..d {
                            dgamma[j] += gr[j] * xhat[j];
                            dbeta[j] += gr[j];
                            dxhat[j] = gr[j] * gv_.data()[j] as f64;
                        }
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 =
                            dxhat.iter().zip(xhat.iter()).map(|(a2, b2)| a2 * b2).sum();
                        let df = d as f64;
                        for j in 0..d {
                            dx[r * d + j] += inv_std / df
                                * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    add_into(self.nodes[x.0].grad.as_mut().unwrap(), &dx);
                    add_into(self.nodes[gamma.0].grad.as_mut().unwrap(), &dgamma);
                    add_into(self.nodes[beta.0].grad.as_mut().unwrap(), &dbeta);
                }
                Op::Softmax { a } => {
                    let sv = self.nodes[i].value.clone();
                    let (rows, cols) = (sv.rows(), sv.cols());
                    let da = self.nodes[a.0].grad.as_mut().unwrap();
                    for r in 0..rows {
                        let s = sv.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 =
                            gr.iter().zip(s.iter()).map(|(gv, &pv)| gv * pv as f64).sum();
                        for j in 0..cols {
                            da[r * cols + j] += s[j] as f64 * (gr[j] - dot);
                        }
                    }
                }
                Op::CausalSelfAttention { q, k, v, n_heads } => {
                    let (qv, kv, vv) =
                        (self.val(q).clone(), self.val(k).clone(), self.val(v).clone());
                    let probs = self.nodes[i].aux.clone();
                    let (s, d) = (qv.rows(), qv.cols());
                    let h = n_heads;
                    let dh = d / h;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = vec![0.0f64; s * d];
                    let mut dk = vec![0.0f64; s * d];
                    let mut dv = vec![0.0f64; s * d];
                    for head in 0..h {
                        let off = head * dh;
                        let p = &probs[head * s * s..(head + 1) * s * s];
                        for i2 in 0..s {
                            let go = &g[i2 * d + off..i2 * d + off + dh];
                            // dP[i2][j] = dot(gOut_i2_head, V_j_head); dV += P^T gOut
                            let mut dp = vec![0.0f64; i2 + 1];
                            for (j, dpj) in dp.iter_mut().enumerate() {
                                let vr = &vv.row(j)[off..off + dh];
                                let mut acc = 0.0f64;
                                for (gx, &vx) in go.iter().zip(vr.iter()) {
                                    acc += gx * vx as f64;
                                }
                                *dpj = acc;
                                let pij = p[i2 * s + j];
                                for (x, gx) in go.iter().enumerate() {
                                    dv[j * d + off + x] += pij * gx;
                                }
                            }
                            // softmax backward within the causal row
                            let dot: f64 = dp
                                .iter()
                                .enumerate()
                                .map(|(j, dpj)| dpj * p[i2 * s + j])
                                .sum();
                            for (j, dpj) in dp.iter().enumerate() {
                                let ds = p[i2 * s + j] * (dpj - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kr = &kv.row(j)[off..off + dh];
                                let qr = &qv.row(i2)[off..off + dh];
                                for x in 0..dh {
                                    dq[i2 * d + off + x] += ds * kr[x] as f64;
                                    dk[j * d + off + x] += ds * qr[x] as f64;
                                }
                            }
                        }
                    }
                    add_into(self.nodes[q.0].grad.as_mut().unwrap(), &dq);
                    add_into(self.nodes[k.0].grad.as_mut().unwrap(), &dk);
                    add_into(self.nodes[v.0].grad.as_mut().unwrap(), &dv);
                }
                Op::RowConcat { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.val(p).numel();
                        let dp = self.nodes[p.0].grad.as_mut().unwrap();
                        for (dv, gv) in dp.iter_mut().zip(g[offset..offset + n].iter()) {
                            *dv += gv;
                        }
                        offset += n;
                    }
                }
                Op::SliceRows { a, start, .. } => {
                    let cols = self.val(a).cols();
                    let da = self.nodes[a.0].grad.as_mut().unwrap();
                    for (i2, gv) in g.iter().enumerate() {
                        da[start * cols + i2] += gv;
                    }
                }
                Op::EmbedRows { table, ids } => {
                    let cols = self.val(table).cols();
                    let dt = self.nodes[table.0].grad.as_mut().unwrap();
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            dt[id * cols + j] += g[r * cols + j];
                        }
                    }
                }
                Op::Sum { a } => {
                    let da = self.nodes[a.0].grad.as_mut().unwrap();
                    for dv in da.iter_mut() {
                        *dv += g[0];
                    }
                }
                Op::CeAtPositions { logits, pairs } => {
                    let lv = self.val(logits).clone();
                    let cols = lv.cols();
                    let n = pairs.len() as f64;
                    let dl = self.nodes[logits.0].grad.as_mut().unwrap();
                    let mut sm = vec![0.0f32; cols];
                    for &(row, label) in &pairs {
                        softmax_row_into(lv.row(row), &mut sm);
                        for j in 0..cols {
                            let indicator = if j == label { 1.0 } else { 0.0 };
                            dl[row * cols + j] += g[0] * (sm[j] as f64 - indicator) / n;
                        }
                    }
                }
                Op::CeSoftRows { logits, soft, rows } => {
                    let lv = self.val(logits).clone();
                    let sv = self.val(soft).clone();
                    let cols = lv.cols();
                    let n = rows.len() as f64;
                    let mut sm = vec![0.0f32; cols];
                    {
                        let dl = self.nodes[logits.0].grad.as_mut().unwrap();
                        for (j2, &row) in rows.iter().enumerate() {
                            softmax_row_into(lv.row(row), &mut sm);
                            let w = sv.row(j2);
                            let wsum: f64 = w.iter().map(|&x| x as f64).sum();
                            for j in 0..cols {
                                dl[row * cols + j] +=
                                    g[0] * (wsum * sm[j] as f64 - w[j] as f64) / n;
                            }
                        }
                    }
                    {
                        let ds = self.nodes[soft.0].grad.as_mut().unwrap();
                        for (j2, &row) in rows.iter().enumerate() {
                            let r = lv.row(row);
                            let lse = log_sum_exp(r);
                            for j in 0..cols {
                                ds[j2 * cols + j] += g[0] * (lse - r[j] as f64) / n;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Raw f64 gradient buffer of the most recent backward pass.
    pub fn grad_f64(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Gradient of the most recent backward pass with respect to a node.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        self.nodes[id.0].grad.as_ref().map(|g| {
            Tensor::new(
                self.nodes[id.0].value.shape().to_vec(),
                g.iter().map(|&v| v as f32).collect(),
            )
            .expect("grad buffer matches value shape")
        })
    }

    /// Gradients for every named input, keyed by name.
    pub fn input_grads(&self) -> HashMap<String, Tensor> {
        self.inputs
            .iter()
            .filter_map(|(name, id)| self.grad(*id).map(|t| (name.clone(), t)))
            .collect()
    }

    // ── f64 replay ──────────────────────────────────────────────────────

    /// Recompute the graph entirely in f64, optionally overriding named
    /// inputs. Used as the high-precision reference for finite-difference
    /// checks; returns the value of the requested node.
    pub fn replay_f64(
        &self,
        overrides: &HashMap<String, Vec<f64>>,
        out: NodeId,
    ) -> Result<Vec<f64>, NnError> {
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            if i > out.0 {
                break;
            }
            let v = match &node.op {
                Op::Input { name } => match overrides.get(name) {
                    Some(o) => {
                        if o.len() != node.value.numel() {
                            return Err(NnError::ShapeMismatch {
                                op: "replay",
                                detail: format!("override {name} wrong length"),
                            });
                        }
                        o.clone()
                    }
                    None => node.value.data().iter().map(|&x| x as f64).collect(),
                },
                op => self.replay_op(op, &vals)?,
            };
            vals.push(v);
        }
        Ok(vals[out.0].clone())
    }

    fn replay_op(&self, op: &Op, vals: &[Vec<f64>]) -> Result<Vec<f64>, NnError> {
        let dim = |id: NodeId| (self.nodes[id.0].value.rows(), self.nodes[id.0].value.cols());
        Ok(match op {
            Op::Input { .. } => unreachable!(),
            Op::MatMul { a, b } => {
                let (m, k) = dim(*a);
                let n = dim(*b).1;
                let (av, bv) = (&vals[a.0], &vals[b.0]);
                let mut out = vec![0.0f64; m * n];
                for i in 0..m {
                    for x in 0..k {
                        let aik = av[i * k + x];
                        for j in 0..n {
                            out[i * n + j] += aik * bv[x * n + j];
                        }
                    }
                }
                out
            }
            Op::MatMulBT { a, b } => {
                let (m, k) = dim(*a);
                let n = dim(*b).0;
                let (av, bv) = (&vals[a.0], &vals[b.0]);
                let mut out = vec![0.0f64; m * n];
                for i in 0..m {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for x in 0..k {
                            acc += av[i * k + x] * bv[j * k + x];
                        }
                        out[i * n + j] = acc;
                    }
                }
                out
            }
            Op::Add { a, b } => vals[a.0].iter().zip(&vals[b.0]).map(|(x, y)| x + y).collect(),
            Op::AddRowBias { a, bias } => {
                let cols = dim(*a).1;
                vals[a.0]
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x + vals[bias.0][i % cols])
                    .collect()
            }
            Op::Scale { a, c } => vals[a.0].iter().map(|x| x * c).collect(),
            Op::Gelu { a } => vals[a.0].iter().map(|&x| gelu_f(x)).collect(),
            Op::LayerNorm { x, gamma, beta } => {
                let (rows, d) = dim(*x);
                let xv = &vals[x.0];
                let mut out = vec![0.0f64; rows * d];
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + LN_EPS).sqrt();
                    for j in 0..d {
                        out[r * d + j] =
                            (row[j] - mean) * inv_std * vals[gamma.0][j] + vals[beta.0][j];
                    }
                }
                out
            }
            Op::Softmax { a } => {
                let (rows, cols) = dim(*a);
                let av = &vals[a.0];
                let mut out = vec![0.0f64; rows * cols];
                for r in 0..rows {
                    let row = &av[r * cols..(r + 1) * cols];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut denom = 0.0;
                    for j in 0..cols {
                        out[r * cols + j] = (row[j] - max).exp();
                        denom += out[r * cols + j];
                    }
                    for j in 0..cols {
                        out[r * cols + j] /= denom;
                    }
                }
                out
            }
            Op::CausalSelfAttention { q, k, v, n_heads } => {
                let (s, d) = dim(*q);
                let h = *n_heads;
                let dh = d / h;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (&vals[q.0], &vals[k.0], &vals[v.0]);
                let mut out = vec![0.0f64; s * d];
                for head in 0..h {
                    let off = head * dh;
                    for i in 0..s {
                        let mut row = vec![0.0f64; i + 1];
                        for (j, rj) in row.iter_mut().enumerate() {
                            let mut acc = 0.0;
                            for x in 0..dh {
                                acc += qv[i * d + off + x] * kv[j * d + off + x];
                            }
                            *rj = acc * scale;
                        }
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut denom = 0.0;
                        for rj in row.iter_mut() {
                            *rj = (*rj - max).exp();
                            denom += *rj;
                        }
                        for (j, rj) in row.iter().enumerate() {
                            let p = rj / denom;
                            for x in 0..dh {
                                out[i * d + off + x] += p * vv[j * d + off + x];
                            }
                        }
                    }
                }
                out
            }
            Op::RowConcat { parts } => {
                let mut out = Vec::new();
                for p in parts {
                    out.extend_from_slice(&vals[p.0]);
                }
                out
            }
            Op::SliceRows { a, start, len } => {
                let cols = dim(*a).1;
                vals[a.0][start * cols..(start + len) * cols].to_vec()
            }
            Op::EmbedRows { table, ids } => {
                let cols = dim(*table).1;
                let tv = &vals[table.0];
                let mut out = Vec::with_capacity(ids.len() * cols);
                for &id in ids {
                    out.extend_from_slice(&tv[id * cols..(id + 1) * cols]);
                }
                out
            }
            Op::Sum { a } => vec![vals[a.0].iter().sum()],
            Op::CeAtPositions { logits, pairs } => {
                let cols = dim(*logits).1;
                let lv = &vals[logits.0];
                let mut total = 0.0f64;
                for &(row, label) in pairs {
                    let r = &lv[row * cols..(row + 1) * cols];
                    total += log_sum_exp_f64(r) - r[label];
                }
                vec![total / pairs.len() as f64]
            }
            Op::CeSoftRows { logits, soft, rows } => {
                let cols = dim(*logits).1;
                let lv = &vals[logits.0];
                let sv = &vals[soft.0];
                let mut total = 0.0f64;
                for (j2, &row) in rows.iter().enumerate() {
                    let r = &lv[row * cols..(row + 1) * cols];
                    let lse = log_sum_exp_f64(r);
                    for j in 0..cols {
                        total += sv[j2 * cols + j] * (lse - r[j]);
                    }
                }
                vec![total / rows.len() as f64]
            }
        })
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input { .. } => "input",
        Op::MatMul { .. } => "matmul",
        Op::MatMulBT { .. } => "matmul_bt",
        Op::Add { .. } => "add",
        Op::AddRowBias { .. } => "add_row_bias",
        Op::Scale { .. } => "scale",
        Op::Gelu { .. } => "gelu",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Softmax { .. } => "softmax",
        Op::CausalSelfAttention { .. } => "attention",
        Op::RowConcat { .. } => "row_concat",
        Op::SliceRows { .. } => "slice_rows",
        Op::EmbedRows { .. } => "embed_rows",
        Op::Sum { .. } => "sum",
        Op::CeAtPositions { .. } => "ce_at_positions",
        Op::CeSoftRows { .. } => "ce_soft_rows",
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NnError {
    NnError::ShapeMismatch {
        op,
        detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += s;
    }
}

fn gelu_f(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_df(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = c * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable softmax of an f32 row with f64 accumulation.
pub(crate) fn softmax_row_into(row: &[f32], out: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut denom = 0.0f64;
    for (o, &x) in out.iter_mut().zip(row.iter()) {
        let e = (x as f64 - max).exp();
        *o = e as f32;
        denom += e;
    }
    for o in out.iter_mut() {
        *o = (*o as f64 / denom) as f32;
    }
}

pub(crate) fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum();
    max + sum.ln()
}

fn log_sum_exp_f64(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rng(seed: u64) -> impl Rng {
        crate::rng::substream(seed, "nn-test")
    }

    fn rand_tensor(r: &mut impl Rng, shape: Vec<usize>, scale: f32) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| (r.gen::<f32>() - 0.5) * 2.0 * scale).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g
            .input("i", Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap())
            .unwrap();
        let a = g
            .input("a", Tensor::new(vec![2, 2], vec![3., -1., 2., 7.]).unwrap())
            .unwrap();
        let c = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(c).data(), &[3., -1., 2., 7.]);
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut g = Graph::new();
        let a = g.input("a", Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap()).unwrap();
        let s = g.softmax(a).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = rng(2);
        let mut g = Graph::new();
        let a = g.input("a", rand_tensor(&mut r, vec![5, 9], 4.0)).unwrap();
        let s = g.softmax(a).unwrap();
        for row in 0..5 {
            let sum: f64 = g.value(s).row(row).iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::new(vec![1, 4], vec![3.5; 4]).unwrap()).unwrap();
        let gamma = g.input("g", Tensor::new(vec![4], vec![1.0; 4]).unwrap()).unwrap();
        let beta = g.input("b", Tensor::new(vec![4], vec![0.0; 4]).unwrap()).unwrap();
        let y = g.layer_norm(x, gamma, beta).unwrap();
        for &v in g.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut r = rng(3);
        let mut g = Graph::new();
        let x = g.input("x", rand_tensor(&mut r, vec![3, 4], 2.0)).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        for &v in g.grad(x).unwrap().data() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn cross_entropy_uniform_closed_form() {
        // uniform logits over V=16: loss = ln 16, grad at target = 1/16 - 1.
        let v = 16;
        let mut g = Graph::new();
        let logits = g.input("l", Tensor::new(vec![1, v], vec![0.0; v]).unwrap()).unwrap();
        let loss = g.cross_entropy_target(logits, &[5]).unwrap();
        assert!((g.value(loss).item() as f64 - (v as f64).ln()).abs() < 1e-6);
        g.backward(loss).unwrap();
        let grad = g.grad(logits).unwrap();
        for (j, &gv) in grad.data().iter().enumerate() {
            let expect = if j == 5 { 1.0 / v as f32 - 1.0 } else { 1.0 / v as f32 };
            assert!((gv - expect).abs() < 1e-6, "grad[{j}] = {gv}");
        }
    }

    #[test]
    fn cross_entropy_point_mass_is_zero() {
        let mut g = Graph::new();
        let mut data = vec![-60.0f32; 8];
        data[2] = 60.0;
        let logits = g.input("l", Tensor::new(vec![1, 8], data).unwrap()).unwrap();
        let loss = g.cross_entropy_target(logits, &[2]).unwrap();
        assert!(g.value(loss).item().abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_hand_table() {
        // three-token target under a hand-built logits table; expected value
        // computed per token as -log p and averaged by hand.
        let rows = vec![
            vec![2.0f32, 0.0, -1.0, 0.5],
            vec![0.0, 0.0, 0.0, 0.0],
            vec![-3.0, 4.0, 1.0, 0.0],
        ];
        let targets = [0usize, 3, 1];
        let mut expect = 0.0f64;
        for (r, &t) in rows.iter().zip(targets.iter()) {
            let lse = log_sum_exp(r);
            expect += lse - r[t] as f64;
        }
        expect /= 3.0;
        let mut g = Graph::new();
        let flat: Vec<f32> = rows.concat();
        let logits = g.input("l", Tensor::new(vec![3, 4], flat).unwrap()).unwrap();
        let loss = g.cross_entropy_target(logits, &targets).unwrap();
        assert!((g.value(loss).item() as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_length_mismatch() {
        let mut g = Graph::new();
        let logits = g.input("l", Tensor::new(vec![2, 4], vec![0.0; 8]).unwrap()).unwrap();
        assert!(g.cross_entropy_target(logits, &[1]).is_err());
    }

    #[test]
    fn backward_before_forward_rejected() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::scalar(1.0)).unwrap();
        let s = g.sum(x).unwrap();
        g.set_input("x", Tensor::scalar(2.0)).unwrap();
        assert!(matches!(g.backward(s), Err(NnError::BackwardBeforeForward)));
        g.forward().unwrap();
        assert!(g.backward(s).is_ok());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(matches!(g.backward(x), Err(NnError::NonScalarLoss)));
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut g = Graph::new();
        assert!(g.input("x", Tensor::scalar(f32::NAN)).is_err());
    }

    /// Builds a random 2-layer toy transformer over a one-hot suffix block
    /// and returns (graph, onehot node, loss node).
    fn toy_transformer(seed: u64, s: usize, vocab: usize, d: usize, heads: usize) -> (Graph, NodeId, NodeId) {
        let mut r = rng(seed);
        let suffix_len = 2.min(s - 2);
        let prefix_len = s - suffix_len - 1; // one target position at the end
        let mut g = Graph::new();
        let wte = g.input("wte", rand_tensor(&mut r, vec![vocab, d], 0.5)).unwrap();
        let wpe = g.input("wpe", rand_tensor(&mut r, vec![s, d], 0.5)).unwrap();

        let prefix_ids: Vec<usize> = (0..prefix_len).map(|_| r.gen_range(0..vocab)).collect();
        let tail_ids: Vec<usize> = vec![r.gen_range(0..vocab)];
        let mut onehot = vec![0.0f32; suffix_len * vocab];
        for row in 0..suffix_len {
            onehot[row * vocab + r.gen_range(0..vocab)] = 1.0;
        }
        let oh = g
            .input("onehot", Tensor::new(vec![suffix_len, vocab], onehot).unwrap())
            .unwrap();

        let pe = g.embed_rows(wte, prefix_ids).unwrap();
        let se = g.matmul(oh, wte).unwrap();
        let te = g.embed_rows(wte, tail_ids).unwrap();
        let cat = g.row_concat(vec![pe, se, te]).unwrap();
        let pos = g.slice_rows(wpe, 0, s).unwrap();
        let mut x = g.add(cat, pos).unwrap();

        for layer in 0..2 {
            let lg = g.input(&format!("ln{layer}g"), Tensor::new(vec![d], vec![1.0; d]).unwrap()).unwrap();
            let lb = g.input(&format!("ln{layer}b"), Tensor::new(vec![d], vec![0.0; d]).unwrap()).unwrap();
            let a = g.layer_norm(x, lg, lb).unwrap();
            let wq = g.input(&format!("wq{layer}"), rand_tensor(&mut r, vec![d, d], 0.5)).unwrap();
            let wk = g.input(&format!("wk{layer}"), rand_tensor(&mut r, vec![d, d], 0.5)).unwrap();
            let wv = g.input(&format!("wv{layer}"), rand_tensor(&mut r, vec![d, d], 0.5)).unwrap();
            let q = g.matmul(a, wq).unwrap();
            let k = g.matmul(a, wk).unwrap();
            let v = g.matmul(a, wv).unwrap();
            let att = g.causal_self_attention(q, k, v, heads).unwrap();
            x = g.add(x, att).unwrap();
            let w1 = g.input(&format!("w1_{layer}"), rand_tensor(&mut r, vec![d, 2 * d], 0.5)).unwrap();
            let b1 = g.input(&format!("b1_{layer}"), rand_tensor(&mut r, vec![2 * d], 0.2)).unwrap();
            let w2 = g.input(&format!("w2_{layer}"), rand_tensor(&mut r, vec![2 * d, d], 0.5)).unwrap();
            let h = g.matmul(x, w1).unwrap();
            let h = g.add_row_bias(h, b1).unwrap();
            let h = g.gelu(h).unwrap();
            let m = g.matmul(h, w2).unwrap();
            x = g.add(x, m).unwrap();
        }
        let logits = g.matmul_bt(x, wte).unwrap();
        let last = g.slice_rows(logits, s - 2, 2).unwrap();
        let loss = g.cross_entropy_target(last, &[1, 2]).unwrap();
        (g, oh, loss)
    }

    /// Central finite differences against the f64 replay, per spec h=1e-3.
    fn fd_grad(g: &Graph, name: &str, base: &Tensor, loss: NodeId) -> Vec<f64> {
        let h = 1e-3;
        let mut out = vec![0.0f64; base.numel()];
        let base64: Vec<f64> = base.data().iter().map(|&x| x as f64).collect();
        for i in 0..base.numel() {
            let mut plus = base64.clone();
            plus[i] += h;
            let mut minus = base64.clone();
            minus[i] -= h;
            let mut ov = HashMap::new();
            ov.insert(name.to_string(), plus);
            let lp = g.replay_f64(&ov, loss).unwrap()[0];
            ov.insert(name.to_string(), minus);
            let lm = g.replay_f64(&ov, loss).unwrap()[0];
            out[i] = (lp - lm) / (2.0 * h);
        }
        out
    }

    fn max_rel_err(analytic: &[f32], reference: &[f64]) -> f64 {
        let gmax = reference.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        let floor = (gmax * 1e-2).max(1e-6);
        analytic
            .iter()
            .zip(reference.iter())
            .map(|(&a, &f)| (a as f64 - f).abs() / f.abs().max(floor))
            .fold(0.0, f64::max)
    }

    #[test]
    fn toy_transformer_onehot_grad_matches_fd() {
        let (mut g, oh, loss) = toy_transformer(11, 7, 12, 8, 2);
        g.backward(loss).unwrap();
        let analytic = g.grad(oh).unwrap();
        let fd = fd_grad(&g, "onehot", g.value(oh), loss);
        let err = max_rel_err(analytic.data(), &fd);
        assert!(err < 1e-3, "max relative error {err}");
    }

    #[test]
    fn replay_matches_f32_forward() {
        let (g, _, loss) = toy_transformer(13, 6, 10, 8, 1);
        let replayed = g.replay_f64(&HashMap::new(), loss).unwrap()[0];
        let direct = g.value(loss).item() as f64;
        assert!((replayed - direct).abs() < 1e-4 * direct.abs().max(1.0));
    }

    #[test]
    fn backward_is_linear_in_loss() {
        // grad(a*L1 + b*L2) == a*grad(L1) + b*grad(L2)
        let mut r = rng(17);
        let build = |x_val: &Tensor| {
            let mut g = Graph::new();
            let x = g.input("x", x_val.clone()).unwrap();
            let w = g
                .input("w", Tensor::new(vec![3, 3], vec![0.3, -0.2, 0.5, 0.1, 0.9, -0.4, 0.0, 0.2, 0.6]).unwrap())
                .unwrap();
            let y = g.matmul(x, w).unwrap();
            let sm = g.softmax(y).unwrap();
            let l1 = g.sum(sm).unwrap();
            let gl = g.gelu(y).unwrap();
            let l2 = g.sum(gl).unwrap();
            (g, x, l1, l2)
        };
        let x_val = rand_tensor(&mut r, vec![2, 3], 1.0);
        let (a, b) = (0.7f64, -1.3f64);

        let (mut g1, x1, l1, _) = build(&x_val);
        g1.backward(l1).unwrap();
        let grad1 = g1.grad(x1).unwrap();

        let (mut g2, x2, _, l2) = build(&x_val);
        g2.backward(l2).unwrap();
        let grad2 = g2.grad(x2).unwrap();

        let (mut g3, x3, l1b, l2b) = build(&x_val);
        let sa = g3.scale(l1b, a).unwrap();
        let sb = g3.scale(l2b, b).unwrap();
        let combo = g3.add(sa, sb).unwrap();
        g3.backward(combo).unwrap();
        let grad3 = g3.grad(x3).unwrap();

        for i in 0..grad3.numel() {
            let expect = a * grad1.data()[i] as f64 + b * grad2.data()[i] as f64;
            assert!((grad3.data()[i] as f64 - expect).abs() < 1e-5);
        }
    }

    #[test]
    fn deterministic_forward_backward() {
        let run = || {
            let (mut g, oh, loss) = toy_transformer(23, 8, 14, 8, 2);
            g.backward(loss).unwrap();
            (g.value(loss).item(), g.grad(oh).unwrap().data().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1.len(), g2.len());
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn fuzzed_ops_grads_match_fd() {
        // per-op fuzz: attention, layernorm, gelu, softmax, matmul chains
        for seed in 0..20u64 {
            let mut r = rng(100 + seed);
            let s = r.gen_range(3..7);
            let d = 2 * r.gen_range(2..5);
            let mut g = Graph::new();
            let x = g.input("x", rand_tensor(&mut r, vec![s, d], 1.0)).unwrap();
            let wq = g.input("wq", rand_tensor(&mut r, vec![d, d], 0.7)).unwrap();
            let q = g.matmul(x, wq).unwrap();
            let k = g.matmul(x, wq).unwrap();
            let gamma = g.input("gamma", rand_tensor(&mut r, vec![d], 1.0)).unwrap();
            let beta = g.input("beta", rand_tensor(&mut r, vec![d], 0.5)).unwrap();
            let v = g.layer_norm(x, gamma, beta).unwrap();
            let att = g.causal_self_attention(q, k, v, 2).unwrap();
            let sm = g.softmax(att).unwrap();
            let w3 = g.input("w3", rand_tensor(&mut r, vec![d, d], 0.8)).unwrap();
            let h = g.matmul(sm, w3).unwrap();
            let ge = g.gelu(h).unwrap();
            let wte = g.input("wte", rand_tensor(&mut r, vec![d + 3, d], 0.6)).unwrap();
            let logits = g.matmul_bt(ge, wte).unwrap();
            let pairs: Vec<(usize, usize)> =
                (0..s).map(|row| (row, r.gen_range(0..d + 3))).collect();
            let loss = g.ce_at_positions(logits, pairs).unwrap();
            g.backward(loss).unwrap();
            let analytic = g.grad(x).unwrap();
            let fd = fd_grad(&g, "x", g.value(x), loss);
            let err = max_rel_err(analytic.data(), &fd);
            assert!(err < 1e-3, "seed {seed}: max relative error {err}");
        }
    }
}
