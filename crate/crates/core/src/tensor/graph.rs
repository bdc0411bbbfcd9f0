use std::rc::Rc;

use super::kernels::{self, dot};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A recomputable sub-graph used by gradient checkpointing. It receives leaf
/// handles for its inputs (in order) and returns its single output.
pub type SegmentFn = Rc<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Transpose(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Embedding { table: Var, ids: Vec<u32> },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f32> },
    Gelu(Var),
    Softplus(Var),
    Softmax(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    GatherRows { x: Var, rows: Vec<usize> },
    CrossEntropy { logits: Var, probs: Vec<f32>, targets: Vec<u32>, mask: Vec<bool>, count: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, seqs: usize, offset: usize, probs: Vec<f32> },
    Rope { x: Var, heads: usize, cos: Vec<f32>, sin: Vec<f32> },
    Checkpoint { inputs: Vec<Var>, segment: SegmentFn },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::MatMulNt(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Gelu(a)
            | Op::Softplus(a)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Embedding { table, .. } => vec![*table],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Slice { x, .. } | Op::GatherRows { x, .. } | Op::Rope { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Checkpoint { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    /// f64 result of scalar reductions, kept so finite-difference checks are
    /// not limited by rounding the loss to f32.
    precise: Option<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

/// Dynamic autodiff tape. Nodes are appended in execution order, so parents
/// always precede their children.
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const RMS_EPS: f32 = 1e-5;

impl Graph {
    /// A graph with non-finite detection enabled.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), check_finite: true }
    }

    pub fn with_finite_checks(check_finite: bool) -> Self {
        Self { nodes: Vec::new(), check_finite }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, precise: None, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of `v` in f64; exact accumulator for reductions, otherwise
    /// the widened f32 first element.
    pub fn value_f64(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        n.precise.unwrap_or(n.value.data()[0] as f64)
    }

    fn push_scalar(&mut self, value: f64, op: Op, name: &'static str) -> Result<Var> {
        let v = self.push(Tensor::scalar(value as f32), op, name)?;
        self.nodes[v.0].precise = Some(value);
        Ok(v)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Parent handles of a node; every parent index is smaller than the node's.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, precise: None, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("{what} expects a 2-D tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor { shape: ta.shape().to_vec(), data }
    }

    fn map(&self, a: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let t = self.value(a);
        Tensor { shape: t.shape().to_vec(), data: t.data().iter().map(|&x| f(x)).collect() }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let out = self.map(a, |x| x * s);
        self.push(out, Op::Scale(a, s), "scale")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let data = kernels::transpose(self.value(a).data(), m, n);
        self.push(Tensor { shape: vec![n, m], data }, Op::Transpose(a), "transpose")
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension(format!("matmul inner extents {k} and {k2} differ")));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor { shape: vec![m, n], data }, Op::MatMul(a, b), "matmul")
    }

    /// `a[m,k] · b[n,k]ᵀ`, the layout of a linear layer with weight `[out, in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Dimension(format!("matmul_nt inner extents {k} and {k2} differ")));
        }
        let data = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor { shape: vec![m, n], data }, Op::MatMulNt(a, b), "matmul_nt")
    }

    /// Row lookup into `table[V, d]`; the backward pass scatter-adds.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::Dimension("embedding of an empty id list".into()));
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(Error::Index(format!("token id {id} out of range for vocab {v}")));
            }
            data.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let out = Tensor { shape: vec![ids.len(), d], data };
        self.push(out, Op::Embedding { table, ids: ids.to_vec() }, "embedding")
    }

    /// Row-wise `x / rms(x) * gain` with `gain[d]`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (n, d) = self.dims2(x, "rmsnorm")?;
        if self.value(gain).numel() != d {
            return Err(Error::Dimension(format!("rmsnorm gain must have {d} entries")));
        }
        let (xv, gv) = (self.value(x).data(), self.value(gain).data());
        let mut data = vec![0.0f32; n * d];
        let mut inv_rms = Vec::with_capacity(n);
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let ms = dot(row, row) / d as f32;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            for c in 0..d {
                data[r * d + c] = row[c] * inv * gv[c];
            }
        }
        self.push(Tensor { shape: vec![n, d], data }, Op::RmsNorm { x, gain, inv_rms }, "rmsnorm")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, kernels::gelu);
        self.push(out, Op::Gelu(a), "gelu")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, kernels::softplus);
        self.push(out, Op::Softplus(a), "softplus")
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = *t.shape().last().expect("non-empty shape");
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(n) {
            kernels::softmax_in_place(row);
        }
        self.push(out, Op::Softmax(a), "softmax")
    }

    /// Concatenation of 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::Dimension("concat needs ≥1 part and axis 0 or 1".into()));
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.dims2(p, "concat")).collect::<Result<_>>()?;
        let (r0, c0) = dims[0];
        let out = if axis == 0 {
            if dims.iter().any(|&(_, c)| c != c0) {
                return Err(Error::Dimension("concat along rows needs equal column counts".into()));
            }
            let rows = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor { shape: vec![rows, c0], data }
        } else {
            if dims.iter().any(|&(r, _)| r != r0) {
                return Err(Error::Dimension("concat along columns needs equal row counts".into()));
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for (&p, &(_, c)) in parts.iter().zip(&dims) {
                    data.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
                }
            }
            Tensor { shape: vec![r0, cols], data }
        };
        self.push(out, Op::Concat { parts: parts.to_vec(), axis }, "concat")
    }

    /// `len` consecutive rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice")?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || len == 0 || start + len > extent {
            return Err(Error::Dimension(format!(
                "slice [{start}, {}) out of bounds for axis {axis} of extent {extent}",
                start + len
            )));
        }
        let src = self.value(x).data();
        let out = if axis == 0 {
            Tensor { shape: vec![len, c], data: src[start * c..(start + len) * c].to_vec() }
        } else {
            let mut data = Vec::with_capacity(r * len);
            for row in 0..r {
                data.extend_from_slice(&src[row * c + start..row * c + start + len]);
            }
            Tensor { shape: vec![r, len], data }
        };
        self.push(out, Op::Slice { x, axis, start }, "slice")
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|&x| x as f64).sum();
        self.push_scalar(s, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().map(|&x| x as f64).sum::<f64>() / t.numel() as f64;
        self.push_scalar(s, Op::Mean(a), "mean")
    }

    /// Selects rows of a 2-D tensor; the backward pass scatter-adds.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x, "gather_rows")?;
        if rows.is_empty() {
            return Err(Error::Dimension("gather_rows with no rows".into()));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::Index(format!("row {i} out of range for {r} rows")));
            }
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let out = Tensor { shape: vec![rows.len(), c], data };
        self.push(out, Op::GatherRows { x, rows: rows.to_vec() }, "gather_rows")
    }

    /// Mean over masked rows of `-log softmax(logits)[row, target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], mask: &[bool]) -> Result<Var> {
        let (t, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::Dimension(format!(
                "cross_entropy: {t} rows but {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateBatch("every position is masked out".into()));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0f32; t * v];
        let mut total = 0.0f64;
        for r in 0..t {
            let target = targets[r] as usize;
            if target >= v {
                return Err(Error::Index(format!("target {target} out of range for {v} classes")));
            }
            if !mask[r] {
                continue;
            }
            let row = &lv[r * v..(r + 1) * v];
            total += kernels::log_sum_exp(row) - row[target] as f64;
            let p = &mut probs[r * v..(r + 1) * v];
            p.copy_from_slice(row);
            kernels::softmax_in_place(p);
        }
        let op = Op::CrossEntropy { logits, probs, targets: targets.to_vec(), mask: mask.to_vec(), count };
        self.push_scalar(total / count as f64, op, "cross_entropy")
    }

    /// Causal multi-head attention over `seqs` packed sequences.
    ///
    /// `q` is `[seqs·Tq, d]`, `k` and `v` are `[seqs·Tk, d]` with
    /// `Tk = Tq + offset`; query row `i` of a sequence sees keys `0..=i+offset`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seqs: usize, offset: usize) -> Result<Var> {
        let (nq, d) = self.dims2(q, "attention")?;
        let (nk, dk) = self.dims2(k, "attention")?;
        self.same_shape(k, v, "attention")?;
        if dk != d || heads == 0 || d % heads != 0 || seqs == 0 || nq % seqs != 0 || nk % seqs != 0 {
            return Err(Error::Dimension(format!(
                "attention: q [{nq},{d}], k [{nk},{dk}], {heads} heads, {seqs} sequences"
            )));
        }
        let (tq, tk) = (nq / seqs, nk / seqs);
        if tk != tq + offset {
            return Err(Error::Dimension(format!(
                "attention: {tk} keys per sequence but {tq} queries at offset {offset}"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0f32; nq * d];
        let mut probs = vec![0.0f32; seqs * heads * tq * tk];
        for s in 0..seqs {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..tq {
                    let qrow = &qv[(s * tq + i) * d + col..][..dh];
                    let p = &mut probs[((s * heads + h) * tq + i) * tk..][..tk];
                    let visible = i + offset + 1;
                    for j in 0..visible {
                        p[j] = dot(qrow, &kv[(s * tk + j) * d + col..][..dh]) * scale;
                    }
                    kernels::softmax_in_place(&mut p[..visible]);
                    let orow = &mut out[(s * tq + i) * d + col..][..dh];
                    for j in 0..visible {
                        kernels::axpy(p[j], &vv[(s * tk + j) * d + col..][..dh], orow);
                    }
                }
            }
        }
        let op = Op::Attention { q, k, v, heads, seqs, offset, probs };
        self.push(Tensor { shape: vec![nq, d], data: out }, op, "attention")
    }

    /// Rotates each head's dimension pairs `(2i, 2i+1)` of row `r` by the angle
    /// whose cosine and sine are `cos[r·half + i]`, `sin[r·half + i]`.
    pub fn rope(&mut self, x: Var, heads: usize, cos: &[f32], sin: &[f32]) -> Result<Var> {
        let (n, d) = self.dims2(x, "rope")?;
        if heads == 0 || d % heads != 0 || !(d / heads).is_multiple_of(2) {
            return Err(Error::Config(format!("rope needs an even head dim; d={d}, heads={heads}")));
        }
        let half = d / heads / 2;
        if cos.len() != n * half || sin.len() != n * half {
            return Err(Error::Dimension(format!("rope tables must hold {} angles", n * half)));
        }
        let mut out = self.value(x).clone();
        rotate(out.data_mut(), n, d, heads, cos, sin, 1.0);
        let op = Op::Rope { x, heads, cos: cos.to_vec(), sin: sin.to_vec() };
        self.push(out, op, "rope")
    }

    /// Runs `segment` on copies of `inputs` in a private graph, keeping only its
    /// output. The backward pass re-executes the segment to recover activations.
    pub fn checkpoint(&mut self, inputs: &[Var], segment: SegmentFn) -> Result<Var> {
        let (sub, _, out) = self.run_segment(inputs, &segment)?;
        let value = sub.value(out).clone();
        drop(sub);
        self.push(value, Op::Checkpoint { inputs: inputs.to_vec(), segment }, "checkpoint")
    }

    fn run_segment(&self, inputs: &[Var], segment: &SegmentFn) -> Result<(Graph, Vec<Var>, Var)> {
        let mut sub = Graph::with_finite_checks(self.check_finite);
        let leaves: Vec<Var> = inputs.iter().map(|&v| sub.leaf(self.value(v).clone(), self.requires_grad(v))).collect();
        let out = segment(&mut sub, &leaves)?;
        Ok((sub, leaves, out))
    }

    /// Reverse pass from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar, got shape {:?}", self.value(loss).shape())));
        }
        self.backward_seeded(loss, vec![1.0])
    }

    fn backward_seeded(&mut self, root: Var, seed: Vec<f32>) -> Result<()> {
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(seed);
        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.node_backward(i, &g)?;
            for (var, grad) in contributions {
                self.accumulate(var, grad);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<f32>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn node_backward(&self, i: usize, g: &[f32]) -> Result<Vec<(Var, Vec<f32>)>> {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    out.push((*a, g.to_vec()));
                }
                if wants(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    out.push((*a, g.to_vec()));
                }
                if wants(*b) {
                    out.push((*b, g.iter().map(|x| -x).collect()));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    out.push((*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect()));
                }
                if wants(*b) {
                    out.push((*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect()));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.iter().map(|x| x * s).collect())),
            Op::Transpose(a) => {
                let s = node.value.shape();
                out.push((*a, kernels::transpose(g, s[0], s[1])));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if wants(*a) {
                    out.push((*a, kernels::matmul_nt(g, val(*b), m, n, k)));
                }
                if wants(*b) {
                    out.push((*b, kernels::matmul_tn(val(*a), g, m, k, n)));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[0];
                if wants(*a) {
                    out.push((*a, kernels::matmul(g, val(*b), m, n, k)));
                }
                if wants(*b) {
                    out.push((*b, kernels::matmul_tn(g, val(*a), m, n, k)));
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).shape()[1];
                let mut dt = vec![0.0f32; self.value(*table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    for c in 0..d {
                        dt[id * d + c] += g[r * d + c];
                    }
                }
                out.push((*table, dt));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let d = self.value(*gain).numel();
                let (xv, gv) = (val(*x), val(*gain));
                if wants(*gain) {
                    let mut dg = vec![0.0f32; d];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for c in 0..d {
                            dg[c] += g[r * d + c] * xv[r * d + c] * inv;
                        }
                    }
                    out.push((*gain, dg));
                }
                if wants(*x) {
                    let mut dx = vec![0.0f32; xv.len()];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let (xr, gr) = (&xv[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let mut proj = 0.0f32;
                        for c in 0..d {
                            proj += gr[c] * gv[c] * xr[c];
                        }
                        let coef = inv * inv * inv * proj / d as f32;
                        for c in 0..d {
                            dx[r * d + c] = inv * gv[c] * gr[c] - coef * xr[c];
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Gelu(a) => out.push((*a, g.iter().zip(val(*a)).map(|(d, &x)| d * kernels::gelu_grad(x)).collect())),
            Op::Softplus(a) => out.push((*a, g.iter().zip(val(*a)).map(|(d, &x)| d * kernels::sigmoid(x)).collect())),
            Op::Softmax(a) => {
                let n = *node.value.shape().last().expect("shape");
                let y = node.value.data();
                let mut dx = vec![0.0f32; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let s = dot(gr, yr);
                    for c in 0..n {
                        dr[c] = yr[c] * (gr[c] - s);
                    }
                }
                out.push((*a, dx));
            }
            Op::Concat { parts, axis } => {
                let total_cols = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = (self.value(p).shape()[0], self.value(p).shape()[1]);
                    if wants(p) {
                        let piece = if *axis == 0 {
                            g[offset * c..(offset + r) * c].to_vec()
                        } else {
                            let mut v = Vec::with_capacity(r * c);
                            for row in 0..r {
                                v.extend_from_slice(&g[row * total_cols + offset..][..c]);
                            }
                            v
                        };
                        out.push((p, piece));
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::Slice { x, axis, start } => {
                let (r, c) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let mut dx = vec![0.0f32; r * c];
                if *axis == 0 {
                    dx[start * c..start * c + g.len()].copy_from_slice(g);
                } else {
                    let len = node.value.shape()[1];
                    for row in 0..r {
                        dx[row * c + start..][..len].copy_from_slice(&g[row * len..(row + 1) * len]);
                    }
                }
                out.push((*x, dx));
            }
            Op::Sum(a) => out.push((*a, vec![g[0]; self.value(*a).numel()])),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                out.push((*a, vec![g[0] / n as f32; n]));
            }
            Op::GatherRows { x, rows } => {
                let c = self.value(*x).shape()[1];
                let mut dx = vec![0.0f32; self.value(*x).numel()];
                for (r, &src) in rows.iter().enumerate() {
                    for j in 0..c {
                        dx[src * c + j] += g[r * c + j];
                    }
                }
                out.push((*x, dx));
            }
            Op::CrossEntropy { logits, probs, targets, mask, count } => {
                let v = self.value(*logits).shape()[1];
                let scale = g[0] / *count as f32;
                let mut dl = vec![0.0f32; probs.len()];
                for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    for c in 0..v {
                        dl[r * v + c] = probs[r * v + c] * scale;
                    }
                    dl[r * v + t as usize] -= scale;
                }
                out.push((*logits, dl));
            }
            Op::Attention { q, k, v, heads, seqs, offset, probs } => {
                let (dq, dk, dv) = attention_backward(
                    g,
                    val(*q),
                    val(*k),
                    val(*v),
                    self.value(*q).shape(),
                    self.value(*k).shape()[0],
                    (*heads, *seqs, *offset),
                    probs,
                );
                for (var, grad) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if wants(var) {
                        out.push((var, grad));
                    }
                }
            }
            Op::Rope { x, heads, cos, sin } => {
                let (n, d) = (node.value.shape()[0], node.value.shape()[1]);
                let mut dx = g.to_vec();
                rotate(&mut dx, n, d, *heads, cos, sin, -1.0);
                out.push((*x, dx));
            }
            Op::Checkpoint { inputs, segment } => {
                let (mut sub, leaves, root) = self.run_segment(inputs, segment)?;
                sub.backward_seeded(root, g.to_vec())?;
                for (&input, leaf) in inputs.iter().zip(leaves) {
                    if wants(input) {
                        if let Some(grad) = sub.take_grad(leaf) {
                            out.push((input, grad));
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn rotate(data: &mut [f32], n: usize, d: usize, heads: usize, cos: &[f32], sin: &[f32], dir: f32) {
    let half = d / heads / 2;
    for r in 0..n {
        for h in 0..heads {
            let base = r * d + h * 2 * half;
            for i in 0..half {
                let (c, s) = (cos[r * half + i], dir * sin[r * half + i]);
                let (x0, x1) = (data[base + 2 * i], data[base + 2 * i + 1]);
                data[base + 2 * i] = x0 * c - x1 * s;
                data[base + 2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    g: &[f32],
    qv: &[f32],
    kv: &[f32],
    vv: &[f32],
    qshape: &[usize],
    nk: usize,
    (heads, seqs, offset): (usize, usize, usize),
    probs: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (nq, d) = (qshape[0], qshape[1]);
    let (tq, tk) = (nq / seqs, nk / seqs);
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut dq = vec![0.0f32; nq * d];
    let mut dk = vec![0.0f32; nk * d];
    let mut dv = vec![0.0f32; nk * d];
    let mut dscore = vec![0.0f32; tk];
    for s in 0..seqs {
        for h in 0..heads {
            let col = h * dh;
            for i in 0..tq {
                let p = &probs[((s * heads + h) * tq + i) * tk..][..tk];
                let grow = &g[(s * tq + i) * d + col..][..dh];
                let visible = i + offset + 1;
                let mut weighted = 0.0f32;
                for j in 0..visible {
                    let dp = dot(grow, &vv[(s * tk + j) * d + col..][..dh]);
                    dscore[j] = dp;
                    weighted += p[j] * dp;
                }
                let qrow = &qv[(s * tq + i) * d + col..][..dh];
                for j in 0..visible {
                    let ds = p[j] * (dscore[j] - weighted) * scale;
                    let krow = (s * tk + j) * d + col;
                    kernels::axpy(ds, &kv[krow..][..dh], &mut dq[(s * tq + i) * d + col..][..dh]);
                    kernels::axpy(ds, qrow, &mut dk[krow..][..dh]);
                    kernels::axpy(p[j], grow, &mut dv[krow..][..dh]);
                }
            }
        }
    }
    (dq, dk, dv)
}
