use std::collections::BTreeMap;
use std::sync::Arc;

use super::kernels::{gemm, gemm_view, Layout};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    ColMean(NodeId),
    ColMoment(NodeId, usize),
    SelectRows(NodeId, Vec<usize>),
    SliceRows(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    Attention {
        qkv: NodeId,
        heads: usize,
        probs: Vec<f64>,
    },
    NormalizeRows {
        x: NodeId,
        norms: Vec<f64>,
    },
    Abs(NodeId),
    Square(NodeId),
    PowI(NodeId, i32),
    Ln(NodeId),
    ClampMin(NodeId, f64),
    Entropy(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to the gradient-participating
/// leaves it depends on.
#[derive(Debug, Default)]
pub struct Gradients {
    map: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.map.contains_key(&id)
    }

    pub fn leaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.map.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Gradient for `id`, or zeros shaped like `like` when the leaf was not
    /// reached from the loss.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor) -> Tensor {
        self.map
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

/// Tape of recorded operations. Nodes are appended in evaluation order, so
/// the tape is topologically sorted by construction.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const NORM_FLOOR: f64 = 1e-12;

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn check_rank2(op: &'static str, t: &Tensor) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::Dimension {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok(())
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

    /// Gradient-participating leaf.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.leaf(Arc::new(t), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(Arc::new(t), false)
    }

    /// Leaf sharing storage with the caller (no copy).
    pub fn shared(&mut self, t: Arc<Tensor>, requires_grad: bool) -> NodeId {
        self.leaf(t, requires_grad)
    }

    fn leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> NodeId {
        check_rank2("leaf", &value).expect("graph tensors are rank 2");
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        debug_assert!(
            value.is_finite() || !inputs.iter().all(|i| self.nodes[i.0].value.is_finite()),
            "non-finite output from {op:?}"
        );
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        if vb.rows() != k {
            return Err(dim_err("matmul", va, vb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, false);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, n) = (va.rows(), va.cols(), vb.rows());
        if vb.cols() != k {
            return Err(dim_err("matmul_nt", va, vb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), true, &mut out, false);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMulNt(a, b), &[a, b]))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (m, k, n) = (vx.rows(), vx.cols(), vw.cols());
        if vw.rows() != k {
            return Err(dim_err("linear", vx, vw));
        }
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.rows() != 1 || vb.cols() != n {
                return Err(dim_err("linear bias", vw, vb));
            }
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(vb.data());
            }
        }
        gemm(
            m,
            k,
            n,
            vx.data(),
            false,
            vw.data(),
            false,
            &mut out,
            b.is_some(),
        );
        let inputs: Vec<NodeId> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Tensor::matrix(m, n, out), Op::Linear { x, w, b }, &inputs))
    }

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(dim_err(op_name, va, vb));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 × d` row to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (vx, vr) = (self.value(x), self.value(row));
        if vr.rows() != 1 || vr.cols() != vx.cols() {
            return Err(dim_err("add_row", vx, vr));
        }
        let d = vx.cols();
        let mut data = vx.data().to_vec();
        for r in data.chunks_exact_mut(d) {
            for (v, b) in r.iter_mut().zip(vr.data()) {
                *v += b;
            }
        }
        let t = Tensor::matrix(vx.rows(), d, data);
        Ok(self.push(t, Op::AddRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::AddScalar(x), &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean over rows: `n × d → 1 × d`.
    pub fn col_mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let (n, d) = (v.rows(), v.cols());
        let mut out = vec![0.0; d];
        for r in v.data().chunks_exact(d) {
            for (o, x) in out.iter_mut().zip(r) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        self.push(Tensor::row(out), Op::ColMean(x), &[x])
    }

    /// Channel-wise moment over rows, `n × d → 1 × d`: the mean for `k = 1`,
    /// the biased central moment `(1/n) Σ (x − μ)^k` for `k ≥ 2`. The forward
    /// value comes from the single-pass accumulator, so it is bit-identical to
    /// streaming statistics over the same rows in the same order.
    pub fn col_moment(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        if k == 0 {
            return Err(Error::contract("col_moment: order must be at least 1"));
        }
        let v = self.value(x);
        let rows: Vec<usize> = (0..v.rows()).collect();
        let out = crate::stats::moments::row_moment(v.data(), v.cols(), &rows, k);
        Ok(self.push(Tensor::row(out), Op::ColMoment(x, k), &[x]))
    }

    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let v = self.value(x);
        let d = v.cols();
        if rows.is_empty() {
            return Err(Error::contract("select_rows: empty row selection"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= v.rows()) {
            return Err(Error::contract(format!(
                "select_rows: row {bad} out of {}",
                v.rows()
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(v.row_slice(r));
        }
        let t = Tensor::matrix(rows.len(), d, data);
        Ok(self.push(t, Op::SelectRows(x, rows.to_vec()), &[x]))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(x);
        if start >= end || end > v.rows() {
            return Err(Error::contract(format!(
                "slice_rows: {start}..{end} out of {} rows",
                v.rows()
            )));
        }
        let d = v.cols();
        let t = Tensor::matrix(end - start, d, v.data()[start * d..end * d].to_vec());
        Ok(self.push(t, Op::SliceRows(x, start), &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows: no inputs"))?;
        let d = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != d {
                return Err(dim_err("concat_rows", self.value(first), v));
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let t = Tensor::matrix(rows, d, data);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (both `1 × d`).
    pub fn layernorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = vx.cols();
        if d < 2 {
            return Err(Error::contract(
                "layernorm: last axis must have length >= 2",
            ));
        }
        if vg.numel() != d || vb.numel() != d {
            return Err(dim_err("layernorm", vx, vg));
        }
        let n = vx.rows();
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = vx.row_slice(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * vg.data()[c] + vb.data()[c];
            }
        }
        let t = Tensor::matrix(n, d, out);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).map(gelu_scalar);
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let d = v.cols();
        let mut out = v.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        let t = Tensor::matrix(v.rows(), d, out);
        self.push(t, Op::SoftmaxRows(x), &[x])
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let d = v.cols();
        let mut out = v.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = Tensor::matrix(v.rows(), d, out);
        self.push(t, Op::LogSoftmaxRows(x), &[x])
    }

    /// Multi-head scaled dot-product self-attention over a fused `n × 3d`
    /// query/key/value matrix. Returns the `n × d` concatenated head outputs.
    /// With `causal`, position `i` attends only to positions `<= i`.
    pub fn attention(&mut self, qkv: NodeId, heads: usize, causal: bool) -> Result<NodeId> {
        let v = self.value(qkv);
        let (n, d3) = (v.rows(), v.cols());
        if heads == 0 || d3 % (3 * heads) != 0 {
            return Err(Error::contract(format!(
                "attention: width {d3} not divisible into 3 x {heads} heads"
            )));
        }
        let d = d3 / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * n * n];
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            let q = head_view(n, d3, h * dh, dh);
            let k = head_view(n, d3, d + h * dh, dh);
            let val = head_view(n, d3, 2 * d + h * dh, dh);
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            gemm_view(
                scale,
                v.data(),
                q,
                v.data(),
                k.t(),
                0.0,
                p,
                Layout::dense(n, n),
            );
            for (i, row) in p.chunks_exact_mut(n).enumerate() {
                if causal {
                    for s in &mut row[i + 1..] {
                        *s = f64::NEG_INFINITY;
                    }
                }
                softmax_in_place(row);
            }
            let o = head_view(n, d, h * dh, dh);
            gemm_view(1.0, p, Layout::dense(n, n), v.data(), val, 0.0, &mut out, o);
        }
        let t = Tensor::matrix(n, d, out);
        Ok(self.push(t, Op::Attention { qkv, heads, probs }, &[qkv]))
    }

    /// Scales each row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let d = v.cols();
        let mut out = v.data().to_vec();
        let mut norms = Vec::with_capacity(v.rows());
        for row in out.chunks_exact_mut(d) {
            let norm = row
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(NORM_FLOOR);
            norms.push(norm);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let t = Tensor::matrix(v.rows(), d, out);
        self.push(t, Op::NormalizeRows { x, norms }, &[x])
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).map(f64::abs);
        self.push(t, Op::Abs(x), &[x])
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).map(|v| v * v);
        self.push(t, Op::Square(x), &[x])
    }

    pub fn powi(&mut self, x: NodeId, k: i32) -> NodeId {
        let t = self.value(x).map(|v| v.powi(k));
        self.push(t, Op::PowI(x, k), &[x])
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).map(f64::ln);
        self.push(t, Op::Ln(x), &[x])
    }

    pub fn clamp_min(&mut self, x: NodeId, floor: f64) -> NodeId {
        let t = self.value(x).map(|v| v.max(floor));
        self.push(t, Op::ClampMin(x, floor), &[x])
    }

    /// Shannon entropy `-Σ p ln p` (natural log, `0 ln 0 = 0`), summed over
    /// rows that each hold a distribution. See [`entropy_of`] for the form.
    pub fn entropy(&mut self, p: NodeId) -> NodeId {
        let v = self.value(p);
        let h = (0..v.rows()).map(|r| entropy_of(v.row_slice(r))).sum();
        self.push(Tensor::scalar(h), Op::Entropy(p), &[p])
    }

    // ---- reverse pass ------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Only gradient-participating
    /// leaves reachable from the loss appear in the result.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        let mut out = Gradients::default();
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                out.map.insert(NodeId(i), g);
            } else {
                self.propagate(i, &g, &mut grads);
            }
        }
        Ok(out)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, vb.data(), true, &mut da, false);
                    accumulate(grads, *a, Tensor::matrix(m, k, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), true, g.data(), false, &mut db, false);
                    accumulate(grads, *b, Tensor::matrix(k, n, db));
                }
            }
            Op::MatMulNt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, vb.data(), false, &mut da, false);
                    accumulate(grads, *a, Tensor::matrix(m, k, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), true, va.data(), false, &mut db, false);
                    accumulate(grads, *b, Tensor::matrix(n, k, db));
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (m, k, n) = (vx.rows(), vx.cols(), vw.cols());
                if self.wants(*x) {
                    let mut dx = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, vw.data(), true, &mut dx, false);
                    accumulate(grads, *x, Tensor::matrix(m, k, dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(k, m, n, vx.data(), true, g.data(), false, &mut dw, false);
                    accumulate(grads, *w, Tensor::matrix(k, n, dw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        accumulate(grads, *b, column_sums(g));
                    }
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    accumulate(grads, *a, zip(g, vb, |g, y| g * y));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, zip(g, va, |g, x| g * x));
                }
            }
            Op::AddRow(x, row) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.wants(*row) {
                    accumulate(grads, *row, column_sums(g));
                }
            }
            Op::Scale(x, c) => accumulate(grads, *x, g.map(|v| v * c)),
            Op::AddScalar(x) => accumulate(grads, *x, g.clone()),
            Op::Sum(x) => {
                let gv = g.item();
                accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::Mean(x) => {
                let vx = self.value(*x);
                let gv = g.item() / vx.numel() as f64;
                accumulate(grads, *x, Tensor::full(vx.shape(), gv));
            }
            Op::ColMean(x) => {
                let vx = self.value(*x);
                let (n, d) = (vx.rows(), vx.cols());
                let scaled: Vec<f64> = g.data().iter().map(|v| v / n as f64).collect();
                let mut data = Vec::with_capacity(n * d);
                for _ in 0..n {
                    data.extend_from_slice(&scaled);
                }
                accumulate(grads, *x, Tensor::matrix(n, d, data));
            }
            Op::ColMoment(x, k) => {
                let vx = self.value(*x);
                let (n, d) = (vx.rows(), vx.cols());
                let nf = n as f64;
                let mut mu = vec![0.0; d];
                for r in vx.data().chunks_exact(d) {
                    for (m, v) in mu.iter_mut().zip(r) {
                        *m += v / nf;
                    }
                }
                // d m_k / d x_j = (k/n) [ (x_j − μ)^(k−1) − m_(k−1) ], m_1 = 0.
                let k = *k as i32;
                let mut lower = vec![0.0; d];
                if k > 2 {
                    for r in vx.data().chunks_exact(d) {
                        for ((l, v), m) in lower.iter_mut().zip(r).zip(&mu) {
                            *l += (v - m).powi(k - 1) / nf;
                        }
                    }
                }
                let mut dx = Vec::with_capacity(n * d);
                for r in vx.data().chunks_exact(d) {
                    for c in 0..d {
                        let local = if k == 1 {
                            1.0 / nf
                        } else {
                            k as f64 / nf * ((r[c] - mu[c]).powi(k - 1) - lower[c])
                        };
                        dx.push(g.data()[c] * local);
                    }
                }
                accumulate(grads, *x, Tensor::matrix(n, d, dx));
            }
            Op::SelectRows(x, rows) => {
                let vx = self.value(*x);
                let d = vx.cols();
                let mut dx = Tensor::zeros(vx.shape());
                for (k, &r) in rows.iter().enumerate() {
                    let dst = &mut dx.data_mut()[r * d..(r + 1) * d];
                    for (o, v) in dst.iter_mut().zip(g.row_slice(k)) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::SliceRows(x, start) => {
                let vx = self.value(*x);
                let d = vx.cols();
                let mut dx = Tensor::zeros(vx.shape());
                dx.data_mut()[start * d..start * d + g.numel()].copy_from_slice(g.data());
                accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let d = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.wants(p) {
                        let chunk = g.data()[offset * d..(offset + rows) * d].to_vec();
                        accumulate(grads, p, Tensor::matrix(rows, d, chunk));
                    }
                    offset += rows;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let vg = self.value(*gamma);
                let (n, d) = (g.rows(), g.cols());
                if self.wants(*gamma) {
                    let mut dg = vec![0.0; d];
                    for r in 0..n {
                        for c in 0..d {
                            dg[c] += g.data()[r * d + c] * xhat[r * d + c];
                        }
                    }
                    accumulate(
                        grads,
                        *gamma,
                        Tensor::new(vg.shape().to_vec(), dg).expect("shape"),
                    );
                }
                if self.wants(*beta) {
                    let db = column_sums(g).into_data();
                    accumulate(
                        grads,
                        *beta,
                        Tensor::new(vg.shape().to_vec(), db).expect("shape"),
                    );
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * d];
                    for r in 0..n {
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..d {
                            let dh = gr[c] * vg.data()[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[c];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for c in 0..d {
                            let dh = gr[c] * vg.data()[c];
                            dx[r * d + c] = inv_std[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                    accumulate(grads, *x, Tensor::matrix(n, d, dx));
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                accumulate(grads, *x, zip(g, vx, |g, x| g * gelu_grad(x)));
            }
            Op::SoftmaxRows(x) => {
                let d = g.cols();
                let mut dx = vec![0.0; g.numel()];
                for ((o, gr), yr) in dx
                    .chunks_exact_mut(d)
                    .zip(g.data().chunks_exact(d))
                    .zip(y.data().chunks_exact(d))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for c in 0..d {
                        o[c] = yr[c] * (gr[c] - dot);
                    }
                }
                accumulate(grads, *x, Tensor::matrix(g.rows(), d, dx));
            }
            Op::LogSoftmaxRows(x) => {
                let d = g.cols();
                let mut dx = vec![0.0; g.numel()];
                for ((o, gr), yr) in dx
                    .chunks_exact_mut(d)
                    .zip(g.data().chunks_exact(d))
                    .zip(y.data().chunks_exact(d))
                {
                    let total: f64 = gr.iter().sum();
                    for c in 0..d {
                        o[c] = gr[c] - yr[c].exp() * total;
                    }
                }
                accumulate(grads, *x, Tensor::matrix(g.rows(), d, dx));
            }
            Op::Attention { qkv, heads, probs } => {
                let vq = self.value(*qkv);
                let (n, d3) = (vq.rows(), vq.cols());
                let d = d3 / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dqkv = vec![0.0; n * d3];
                let mut dp = vec![0.0; n * n];
                for h in 0..*heads {
                    let p = &probs[h * n * n..(h + 1) * n * n];
                    let q = head_view(n, d3, h * dh, dh);
                    let k = head_view(n, d3, d + h * dh, dh);
                    let val = head_view(n, d3, 2 * d + h * dh, dh);
                    let go = head_view(n, d, h * dh, dh);
                    let nn = Layout::dense(n, n);
                    // dV = Pᵀ dO
                    gemm_view(1.0, p, nn.t(), g.data(), go, 0.0, &mut dqkv, val);
                    // dP = dO Vᵀ
                    gemm_view(1.0, g.data(), go, vq.data(), val.t(), 0.0, &mut dp, nn);
                    for (dr, pr) in dp.chunks_exact_mut(n).zip(p.chunks_exact(n)) {
                        let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for (dv, pv) in dr.iter_mut().zip(pr) {
                            *dv = pv * (*dv - dot);
                        }
                    }
                    // dQ = scale dS K ; dK = scale dSᵀ Q
                    gemm_view(scale, &dp, nn, vq.data(), k, 0.0, &mut dqkv, q);
                    gemm_view(scale, &dp, nn.t(), vq.data(), q, 0.0, &mut dqkv, k);
                }
                accumulate(grads, *qkv, Tensor::matrix(n, d3, dqkv));
            }
            Op::NormalizeRows { x, norms } => {
                let d = g.cols();
                let mut dx = vec![0.0; g.numel()];
                for (r, ((o, gr), yr)) in dx
                    .chunks_exact_mut(d)
                    .zip(g.data().chunks_exact(d))
                    .zip(y.data().chunks_exact(d))
                    .enumerate()
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for c in 0..d {
                        o[c] = (gr[c] - yr[c] * dot) / norms[r];
                    }
                }
                accumulate(grads, *x, Tensor::matrix(g.rows(), d, dx));
            }
            Op::Abs(x) => {
                // Subgradient 0 at the kink.
                let vx = self.value(*x);
                accumulate(
                    grads,
                    *x,
                    zip(g, vx, |g, x| if x == 0.0 { 0.0 } else { g * x.signum() }),
                );
            }
            Op::Square(x) => {
                let vx = self.value(*x);
                accumulate(grads, *x, zip(g, vx, |g, x| 2.0 * g * x));
            }
            Op::PowI(x, k) => {
                let vx = self.value(*x);
                let k = *k;
                accumulate(grads, *x, zip(g, vx, |g, x| g * k as f64 * x.powi(k - 1)));
            }
            Op::Ln(x) => {
                let vx = self.value(*x);
                accumulate(grads, *x, zip(g, vx, |g, x| g / x));
            }
            Op::ClampMin(x, floor) => {
                let vx = self.value(*x);
                let floor = *floor;
                accumulate(
                    grads,
                    *x,
                    zip(g, vx, |g, x| if x > floor { g } else { 0.0 }),
                );
            }
            Op::Entropy(p) => {
                let vp = self.value(*p);
                let gv = g.item();
                let mut out = Tensor::zeros(vp.shape());
                let cols = vp.cols();
                for (r, dst) in out.data_mut().chunks_mut(cols).enumerate() {
                    entropy_grad(vp.row_slice(r), gv, dst);
                }
                accumulate(grads, *p, out);
            }
        }
    }
}

fn head_view(rows: usize, row_stride: usize, offset: usize, cols: usize) -> Layout {
    Layout {
        offset,
        rows,
        cols,
        row_stride,
        col_stride: 1,
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(b.shape().to_vec(), data).expect("zip shapes")
}

fn column_sums(g: &Tensor) -> Tensor {
    let d = g.cols();
    let mut out = vec![0.0; d];
    for r in g.data().chunks_exact(d) {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    Tensor::row(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Entropy of a distribution with the largest entry written as `1 - r`, `r`
/// the sum of the others. Near one-hot rows then keep full relative
/// precision instead of inheriting the rounding of `p_max ≈ 1`.
pub(crate) fn entropy_of(p: &[f64]) -> f64 {
    let m = argmax(p);
    let (rest, r) = entropy_rest(p, m);
    let top = 1.0 - r;
    if top > 0.0 {
        rest - top * (-r).ln_1p()
    } else {
        rest
    }
}

fn argmax(p: &[f64]) -> usize {
    (0..p.len()).fold(0, |m, k| if p[k] > p[m] { k } else { m })
}

/// `(-Σ_{k≠m} p_k ln p_k, Σ_{k≠m} p_k)`.
fn entropy_rest(p: &[f64], m: usize) -> (f64, f64) {
    p.iter()
        .enumerate()
        .filter(|&(k, _)| k != m)
        .fold((0.0, 0.0), |(h, r), (_, &v)| {
            (if v > 0.0 { h - v * v.ln() } else { h }, r + v)
        })
}

/// Exact gradient of [`entropy_of`]: `ln(1 - r) - ln p_k` off the largest
/// entry and zero on it. On the simplex this differs from `-(ln p + 1)` by a
/// constant, which a softmax upstream cancels.
fn entropy_grad(p: &[f64], scale: f64, out: &mut [f64]) {
    let m = argmax(p);
    let (_, r) = entropy_rest(p, m);
    let top = (-r).ln_1p();
    for (k, (&v, o)) in p.iter().zip(out.iter_mut()).enumerate() {
        *o = if k != m && v > 0.0 {
            scale * (top - v.ln())
        } else {
            0.0
        };
    }
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
