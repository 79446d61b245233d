//! Reverse-mode differentiation over a linear record of operations.
//!
//! A [`Tape`] owns every intermediate value produced during one forward pass.
//! Operations append nodes in execution order, so the node list is already a
//! topological order and [`Tape::backward`] is a single reverse sweep.

use super::tensor::{dot, gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f32 },
    AddRows { a: Var, b: Var },
    Reshape { a: Var },
    SplitHeads { a: Var, batch: usize, tokens: usize, heads: usize },
    MergeHeads { a: Var, batch: usize, tokens: usize, heads: usize },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Gelu { a: Var },
    IndexRows { a: Var, idx: Vec<usize> },
    ConcatRows { a: Var, b: Var },
    MeanGroups { a: Var, group: usize },
    MaskedMse { pred: Var, diff: Vec<f32>, rows: Vec<usize>, count: usize },
    CrossEntropy { logits: Var, probs: Vec<f32>, labels: Vec<usize> },
    Sum { a: Var },
    Mean { a: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    // f64 copy of scalar reductions, so finite differences are not limited
    // by rounding of the final loss to f32
    precise: Option<f64>,
}

/// Record of one forward pass. Discard it after calling [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss or does not require gradients.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    pub fn get_slice(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient, materialising zeros where none flowed.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let precise = (value.len() == 1).then(|| value.item() as f64);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            precise,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
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

    fn push(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            precise: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_scalar(&mut self, name: &str, precise: f64, op: Op, inputs: &[Var]) -> Result<Var> {
        let v = self.push(name, Tensor::scalar(precise as f32), op, inputs)?;
        self.nodes[v.0].precise = Some(precise);
        Ok(v)
    }

    /// Value of a one-element node, at f64 precision when the node is a
    /// reduction (or arithmetic on reductions).
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        n.precise.unwrap_or_else(|| n.value.item() as f64)
    }

    fn both_precise(&self, a: Var, b: Var) -> Option<(f64, f64)> {
        if self.value(a).len() != 1 {
            return None;
        }
        Some((self.nodes[a.0].precise?, self.nodes[b.0].precise?))
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// Batched product of `[batch,m,k]` with `[batch,k,n]`, or with
    /// `[batch,n,k]` transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for t in 0..batch {
            let ab = &da[t * m * k..(t + 1) * m * k];
            let bb = &db[t * k * n..(t + 1) * k * n];
            let cb = &mut out[t * m * n..(t + 1) * m * n];
            if trans_b {
                gemm_nt_acc(ab, bb, cb, m, k, n);
            } else {
                gemm_acc(ab, bb, cb, m, k, n);
            }
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        self.push(
            "bmm",
            value,
            Op::BatchMatMul { a, b, batch, m, k, n, trans_b },
            &[a, b],
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        if let Some((x, y)) = self.both_precise(a, b) {
            return self.push_scalar("add", x + y, Op::Add { a, b }, &[a, b]);
        }
        let value = self.zip_with(a, b, |x, y| x + y);
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        if let Some((x, y)) = self.both_precise(a, b) {
            return self.push_scalar("sub", x - y, Op::Sub { a, b }, &[a, b]);
        }
        let value = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", value, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        if let Some(x) = self.nodes[a.0].precise {
            return self.push_scalar("scale", x * s as f64, Op::Scale { a, s }, &[a]);
        }
        let value = self.value(a).map(|x| x * s);
        self.push("scale", value, Op::Scale { a, s }, &[a])
    }

    /// Adds `b` (viewed as `[r, d]`) to every block of `r` consecutive rows
    /// of `a` (viewed as `[R, d]`, `R % r == 0`). Covers both bias vectors and
    /// per-position embeddings shared across a batch.
    pub fn add_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let d = *sa.last().unwrap();
        let blen = self.value(b).len();
        if *sb.last().unwrap() != d || self.value(a).len() % blen != 0 {
            return Err(Error::shape("add_rows", sa, sb));
        }
        let bd = self.data(b);
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % blen])
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        self.push("add_rows", value, Op::AddRows { a, b }, &[a, b])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape { a }, &[a])
    }

    /// `[batch*tokens, heads*dh] -> [batch*heads, tokens, dh]`.
    pub fn split_heads(&mut self, a: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] != batch * tokens || s[1] % heads != 0 {
            return Err(Error::shape("split_heads", s, &[batch * tokens, heads]));
        }
        let d = s[1];
        let dh = d / heads;
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for t in 0..tokens {
                let row = &src[(b * tokens + t) * d..(b * tokens + t + 1) * d];
                for h in 0..heads {
                    let o = ((b * heads + h) * tokens + t) * dh;
                    out[o..o + dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
                }
            }
        }
        let value = Tensor::new(vec![batch * heads, tokens, dh], out)?;
        self.push("split_heads", value, Op::SplitHeads { a, batch, tokens, heads }, &[a])
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, a: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 3 || s[0] != batch * heads || s[1] != tokens {
            return Err(Error::shape("merge_heads", s, &[batch * heads, tokens]));
        }
        let dh = s[2];
        let d = dh * heads;
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for t in 0..tokens {
                for h in 0..heads {
                    let i = ((b * heads + h) * tokens + t) * dh;
                    let o = (b * tokens + t) * d + h * dh;
                    out[o..o + dh].copy_from_slice(&src[i..i + dh]);
                }
            }
        }
        let value = Tensor::new(vec![batch * tokens, d], out)?;
        self.push("merge_heads", value, Op::MergeHeads { a, batch, tokens, heads }, &[a])
    }

    /// Softmax along the last axis, stabilised by subtracting the row maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = x.last_dim();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            let inv = 1.0 / s;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.push("softmax_rows", value, Op::Softmax { a }, &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Invalid(format!("layer_norm eps must be positive, got {eps}")));
        }
        let xv = self.value(x);
        let d = xv.last_dim();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape("layer_norm", xv.shape(), self.shape(gamma)));
        }
        let (g, bta) = (self.data(gamma), self.data(beta));
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bta[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            &[x, gamma, beta],
        )
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(gelu_scalar);
        self.push("gelu", value, Op::Gelu { a }, &[a])
    }

    /// Selects rows of `a` (viewed as `[R, d]`) into a `[idx.len(), d]` result.
    /// Indices may repeat; the backward pass accumulates.
    pub fn index_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let x = self.value(a);
        let (rows, d) = (x.rows(), x.last_dim());
        if idx.is_empty() {
            return Err(Error::Invalid("index_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Invalid(format!("row index {bad} out of range for {rows} rows")));
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            out.extend_from_slice(x.row(i));
        }
        let value = Tensor::new(vec![idx.len(), d], out)?;
        self.push("index_rows", value, Op::IndexRows { a, idx }, &[a])
    }

    /// Stacks the rows of `a` on top of the rows of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (xa, xb) = (self.value(a), self.value(b));
        if xa.last_dim() != xb.last_dim() {
            return Err(Error::shape("concat_rows", xa.shape(), xb.shape()));
        }
        let d = xa.last_dim();
        let mut out = xa.data().to_vec();
        out.extend_from_slice(xb.data());
        let value = Tensor::new(vec![xa.rows() + xb.rows(), d], out)?;
        self.push("concat_rows", value, Op::ConcatRows { a, b }, &[a, b])
    }

    /// Averages consecutive groups of `group` rows: `[G*group, d] -> [G, d]`.
    pub fn mean_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        let x = self.value(a);
        let (rows, d) = (x.rows(), x.last_dim());
        if group == 0 || rows % group != 0 {
            return Err(Error::shape("mean_groups", x.shape(), &[group]));
        }
        let g = rows / group;
        let mut out = vec![0.0; g * d];
        for r in 0..rows {
            let o = &mut out[(r / group) * d..(r / group + 1) * d];
            for (ov, &v) in o.iter_mut().zip(x.row(r)) {
                *ov += v;
            }
        }
        let inv = 1.0 / group as f32;
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(vec![g, d], out)?;
        self.push("mean_groups", value, Op::MeanGroups { a, group }, &[a])
    }

    /// Mean squared error between `pred` and a constant `target` over the
    /// listed rows only (both viewed as `[R, d]`).
    pub fn masked_mse(&mut self, pred: Var, target: &Tensor, rows: Vec<usize>) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() || p.last_dim() != target.last_dim() {
            return Err(Error::shape("masked_mse", p.shape(), target.shape()));
        }
        if rows.is_empty() {
            return Err(Error::Invalid("masked loss over an empty row set".into()));
        }
        let d = p.last_dim();
        let nrows = p.rows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= nrows) {
            return Err(Error::Invalid(format!("row {bad} out of range for {nrows} rows")));
        }
        let mut diff = Vec::with_capacity(rows.len() * d);
        let mut acc = 0.0f64;
        for &r in &rows {
            for (a, b) in p.row(r).iter().zip(target.row(r)) {
                let e = a - b;
                diff.push(e);
                acc += (e as f64) * (e as f64);
            }
        }
        let count = rows.len() * d;
        self.push_scalar(
            "masked_mse",
            acc / count as f64,
            Op::MaskedMse { pred, diff, rows, count },
            &[pred],
        )
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let (b, c) = (x.rows(), x.last_dim());
        if x.rank() != 2 || labels.len() != b {
            return Err(Error::shape("cross_entropy", x.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Invalid(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = x.data().to_vec();
        let mut loss = 0.0f64;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
            loss -= (row[labels[r]].max(1e-30) as f64).ln();
        }
        self.push_scalar(
            "cross_entropy",
            loss / b as f64,
            Op::CrossEntropy { logits, probs, labels: labels.to_vec() },
            &[logits],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.data(a).iter().map(|&v| v as f64).sum();
        self.push_scalar("sum", s, Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.data(a).iter().map(|&v| v as f64).sum();
        let n = self.value(a).len() as f64;
        self.push_scalar("mean", s / n, Op::Mean { a }, &[a])
    }

    /// Reverse sweep from a scalar `loss`. Gradients are summed into every
    /// node that requires them, leaves included.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backward_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(ga) = self.slot(grads, *a) {
                    gemm_nt_acc(g, self.data(*b), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm_tn_acc(self.data(*a), g, gb, m, k, n);
                }
            }
            Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
                let (m, k, n) = (*m, *k, *n);
                let (da, db) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for t in 0..*batch {
                        let gc = &g[t * m * n..(t + 1) * m * n];
                        let bb = &db[t * k * n..(t + 1) * k * n];
                        let out = &mut ga[t * m * k..(t + 1) * m * k];
                        if *trans_b {
                            gemm_acc(gc, bb, out, m, n, k);
                        } else {
                            gemm_nt_acc(gc, bb, out, m, n, k);
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for t in 0..*batch {
                        let gc = &g[t * m * n..(t + 1) * m * n];
                        let ab = &da[t * m * k..(t + 1) * m * k];
                        let out = &mut gb[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            gemm_tn_acc(gc, ab, out, m, n, k);
                        } else {
                            gemm_tn_acc(ab, gc, out, m, k, n);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g);
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v);
                }
            }
            Op::Mul { a, b } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, v), y) in ga.iter_mut().zip(g).zip(self.data(*b)) {
                        *o += v * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, v), x) in gb.iter_mut().zip(g).zip(self.data(*a)) {
                        *o += v * x;
                    }
                }
            }
            Op::Scale { a, s } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, v)| *o += v * s);
                }
            }
            Op::AddRows { a, b } => {
                self.accumulate(grads, *a, g);
                if let Some(gb) = self.slot(grads, *b) {
                    let blen = gb.len();
                    for (j, v) in g.iter().enumerate() {
                        gb[j % blen] += v;
                    }
                }
            }
            Op::Reshape { a } => self.accumulate(grads, *a, g),
            Op::SplitHeads { a, batch, tokens, heads } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let d = self.value(*a).last_dim();
                    let dh = d / heads;
                    for b in 0..*batch {
                        for t in 0..*tokens {
                            for h in 0..*heads {
                                let o = ((b * heads + h) * tokens + t) * dh;
                                let r = (b * tokens + t) * d + h * dh;
                                for e in 0..dh {
                                    ga[r + e] += g[o + e];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { a, batch, tokens, heads } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let dh = self.value(*a).last_dim();
                    let d = dh * heads;
                    for b in 0..*batch {
                        for t in 0..*tokens {
                            for h in 0..*heads {
                                let i = ((b * heads + h) * tokens + t) * dh;
                                let o = (b * tokens + t) * d + h * dh;
                                for e in 0..dh {
                                    ga[i + e] += g[o + e];
                                }
                            }
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let y = node.value.data();
                    let n = node.value.last_dim();
                    for ((gy, yy), out) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let s = dot(gy, yy);
                        for j in 0..n {
                            out[j] += yy[j] * (gy[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = node.value.last_dim();
                let gam = self.data(*gamma);
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gy = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gy[j] * gam[j];
                        }
                        let m1 = dxhat.iter().sum::<f32>() / d as f32;
                        let m2 = dot(&dxhat, xh) / d as f32;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rs * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (gy, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gy[j] * xh[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for gy in g.chunks(d) {
                        gb.iter_mut().zip(gy).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::Gelu { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, v), &x) in ga.iter_mut().zip(g).zip(self.data(*a)) {
                        *o += v * gelu_grad(x);
                    }
                }
            }
            Op::IndexRows { a, idx } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let d = node.value.last_dim();
                    for (r, &src) in idx.iter().enumerate() {
                        let out = &mut ga[src * d..(src + 1) * d];
                        out.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::ConcatRows { a, b } => {
                let split = self.value(*a).len();
                self.accumulate(grads, *a, &g[..split]);
                self.accumulate(grads, *b, &g[split..]);
            }
            Op::MeanGroups { a, group } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let d = node.value.last_dim();
                    let inv = 1.0 / *group as f32;
                    for (r, out) in ga.chunks_mut(d).enumerate() {
                        let gr = &g[(r / group) * d..(r / group + 1) * d];
                        out.iter_mut().zip(gr).for_each(|(o, v)| *o += v * inv);
                    }
                }
            }
            Op::MaskedMse { pred, diff, rows, count } => {
                if let Some(gp) = self.slot(grads, *pred) {
                    let d = node_last_dim(self.value(*pred));
                    let c = 2.0 * g[0] / *count as f32;
                    for (k, &r) in rows.iter().enumerate() {
                        let out = &mut gp[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += c * diff[k * d + j];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, probs, labels } => {
                if let Some(gl) = self.slot(grads, *logits) {
                    let c = node_last_dim(self.value(*logits));
                    let scale = g[0] / labels.len() as f32;
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let t = if j == l { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - t);
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let s = g[0] / ga.len() as f32;
                    ga.iter_mut().for_each(|o| *o += s);
                }
            }
        }
    }

    /// Gradient buffer for `v`, allocated on first use; `None` when `v` does
    /// not participate in differentiation.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f32>>], v: Var) -> Option<&'g mut Vec<f32>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, g: &[f32]) {
        if let Some(out) = self.slot(grads, v) {
            out.iter_mut().zip(g).for_each(|(o, x)| *o += x);
        }
    }
}

fn node_last_dim(t: &Tensor) -> usize {
    t.last_dim()
}

pub(crate) fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
