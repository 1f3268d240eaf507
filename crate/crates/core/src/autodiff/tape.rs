use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, gemm};
use super::tensor::{numel, Tensor, TensorId};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which residual-stream rows an injection rewrites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InjectPositions {
    All,
    Last,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, inp: usize, out: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Gelu(Var),
    LayerNorm { x: Var, scale: Var, shift: Var, n: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax { x: Var, n: usize },
    CausalAttention { qkv: Var, batch: usize, seq: usize, heads: usize, d: usize, probs: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize>, dim: usize },
    SelectRows { x: Var, rows: Vec<usize>, n: usize },
    Inject { h: Var, z: Var, alpha: f64, rows: Vec<usize>, n: usize, norms: Vec<f64> },
    L2Normalize { x: Var, norm: f64 },
    Resample { x: Var, plan: Vec<(usize, f64)> },
    CrossEntropy { logits: Var, targets: Vec<usize>, n: usize, probs: Vec<f64> },
    SliceCols { x: Var, n: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<Var>, widths: Vec<usize> },
    StackRows { parts: Vec<Var> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// Ordered record of executed primitives.
///
/// Values are computed eagerly as ops are pushed. `backward` walks the record
/// in reverse and only visits nodes that depend on a trainable leaf, so
/// frozen sub-graphs cost nothing on the way back.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: HashMap<TensorId, Var>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    leaves: HashMap<TensorId, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn for_tensor(&self, t: &Tensor) -> Option<&[f64]> {
        self.leaves.get(&t.id()).and_then(|v| self.wrt(*v))
    }

    /// Adds this pass's gradient into `t.grad` when `t` is trainable.
    pub fn accumulate_into(&self, t: &mut Tensor) -> Result<()> {
        match self.for_tensor(t) {
            Some(g) if t.requires_grad() => {
                let g = g.to_vec();
                t.accumulate_grad(&g)
            }
            _ => Ok(()),
        }
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
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

    /// Drops every record, leaving an empty tape.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.leaves.clear();
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, inputs: &[Var], op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a tensor as a leaf. Binding the same tensor twice returns the
    /// same handle.
    pub fn param(&mut self, t: &Tensor) -> Var {
        if let Some(v) = self.leaves.get(&t.id()) {
            return *v;
        }
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.shared_data(),
            needs_grad: t.requires_grad(),
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.leaves.insert(t.id(), v);
        v
    }

    /// Records an untracked constant.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::dim("constant", &shape, &[data.len()]));
        }
        Ok(self.push(shape, data, &[], Op::Leaf))
    }

    /// Matrix product of `[m,k]` and `[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        Ok(self.push(vec![m, n], out, &[a, b], Op::MatMul { a, b, m, k, n }))
    }

    /// `x Wᵀ + b` with `W: [out, in]`; `x` is a vector `[in]` or rows `[m, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.is_empty() || sx.len() > 2 || *sx.last().unwrap() != sw[1] {
            return Err(Error::dim("linear", &sw, &sx));
        }
        let (out_dim, inp) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(Error::dim("linear bias", &[out_dim], self.shape(b)));
            }
        }
        let rows = if sx.len() == 2 { sx[0] } else { 1 };
        let mut out = vec![0.0; rows * out_dim];
        gemm(rows, inp, out_dim, self.value(x), false, self.value(w), true, &mut out, false);
        if let Some(b) = b {
            let bias = self.value(b).to_vec();
            for row in out.chunks_mut(out_dim) {
                row.iter_mut().zip(&bias).for_each(|(o, bb)| *o += bb);
            }
        }
        let shape = if sx.len() == 2 { vec![rows, out_dim] } else { vec![out_dim] };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(shape, out, &inputs, Op::Linear { x, w, b, rows, inp, out: out_dim }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, &[a], Op::Scale(a, c))
    }

    /// Arithmetic mean of same-shaped values.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        let (first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::InvalidInput("mean of an empty list".into()))?;
        let mut acc = *first;
        for p in rest {
            acc = self.add(acc, *p)?;
        }
        Ok(self.scale(acc, 1.0 / parts.len() as f64))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(Vec::new(), vec![s], &[a], Op::Sum(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        self.push(self.shape(a).to_vec(), out, &[a], Op::Gelu(a))
    }

    /// Normalizes over the last axis, then applies `scale` and `shift`.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().ok_or_else(|| Error::InvalidInput("layer_norm of a scalar".into()))?;
        if self.shape(scale) != [n] || self.shape(shift) != [n] {
            return Err(Error::dim("layer_norm", &sx, self.shape(scale)));
        }
        let (xhat, inv_std) = kernels::layer_norm_rows(self.value(x), n, eps);
        let (g, b) = (self.value(scale), self.value(shift));
        let out = xhat
            .chunks(n)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((v, g), b)| v * g + b))
            .collect();
        Ok(self.push(sx, out, &[x, scale, shift], Op::LayerNorm { x, scale, shift, n, xhat, inv_std }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().ok_or_else(|| Error::InvalidInput("softmax of a scalar".into()))?;
        if self.value(x).iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let out = kernels::softmax_rows(self.value(x), n);
        Ok(self.push(sx, out, &[x], Op::Softmax { x, n }))
    }

    /// Causal multi-head self-attention over packed projections.
    ///
    /// `qkv` is `[batch*seq, 3d]` holding queries, keys and values side by
    /// side; the result is `[batch*seq, d]` before the output projection.
    pub fn causal_attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(qkv).to_vec();
        if s.len() != 2 || s[0] != batch * seq || s[1] % 3 != 0 || (s[1] / 3) % heads != 0 {
            return Err(Error::dim("causal_attention", &s, &[batch * seq, heads]));
        }
        let d = s[1] / 3;
        let dh = d / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let src = self.value(qkv);
        let mut out = vec![0.0; batch * seq * d];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let row = |b: usize, t: usize| (b * seq + t) * 3 * d;
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                for i in 0..seq {
                    let q = &src[row(b, i) + h * dh..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let k = &src[row(b, j) + d + h * dh..][..dh];
                        let sc = kernels::dot(q, k) * inv;
                        p[i * seq + j] = sc;
                        max = max.max(sc);
                    }
                    let mut z = 0.0;
                    for j in 0..=i {
                        let e = (p[i * seq + j] - max).exp();
                        p[i * seq + j] = e;
                        z += e;
                    }
                    let o = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for j in 0..=i {
                        p[i * seq + j] /= z;
                        let w = p[i * seq + j];
                        let v = &src[row(b, j) + 2 * d + h * dh..][..dh];
                        o.iter_mut().zip(v).for_each(|(o, v)| *o += w * v);
                    }
                }
            }
        }
        Ok(self.push(
            vec![batch * seq, d],
            out,
            &[qkv],
            Op::CausalAttention { qkv, batch, seq, heads, d, probs },
        ))
    }

    /// Gathers rows of `table` (`[vocab, dim]`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::dim("embedding", &st, &[ids.len()]));
        }
        let (vocab, dim) = (st[0], st[1]);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index { index: id, len: vocab });
            }
            out.extend_from_slice(&self.value(table)[id * dim..(id + 1) * dim]);
        }
        Ok(self.push(vec![ids.len(), dim], out, &[table], Op::Embedding { table, ids: ids.to_vec(), dim }))
    }

    /// Picks rows of a `[m, n]` value; a single pick is returned as a vector.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::dim("select_rows", &sx, &[rows.len()]));
        }
        let n = sx[1];
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= sx[0] {
                return Err(Error::Index { index: r, len: sx[0] });
            }
            out.extend_from_slice(&self.value(x)[r * n..(r + 1) * n]);
        }
        let shape = if rows.len() == 1 { vec![n] } else { vec![rows.len(), n] };
        Ok(self.push(shape, out, &[x], Op::SelectRows { x, rows: rows.to_vec(), n }))
    }

    /// Magnitude-rescaled residual blend: each selected row `h` becomes
    /// `(1-alpha)·h + alpha·‖h‖₂·z`. Rows not listed pass through.
    pub fn inject(&mut self, h: Var, z: Var, alpha: f64, rows: &[usize]) -> Result<Var> {
        let sh = self.shape(h).to_vec();
        if sh.len() != 2 || self.shape(z) != [sh[1]] {
            return Err(Error::dim("inject", &sh, self.shape(z)));
        }
        let n = sh[1];
        let mut out = self.value(h).to_vec();
        let zv = self.value(z).to_vec();
        let mut norms = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= sh[0] {
                return Err(Error::Index { index: r, len: sh[0] });
            }
            let row = &mut out[r * n..(r + 1) * n];
            let norm = kernels::norm2(row);
            row.iter_mut()
                .zip(&zv)
                .for_each(|(v, z)| *v = (1.0 - alpha) * *v + alpha * norm * z);
            norms.push(norm);
        }
        Ok(self.push(sh, out, &[h, z], Op::Inject { h, z, alpha, rows: rows.to_vec(), n, norms }))
    }

    /// `x / ‖x‖₂` for a vector; rejects norms at or below 1e-12.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let norm = kernels::norm2(self.value(x));
        if !(norm > super::NORMALIZE_EPS) {
            return Err(Error::Degenerate(format!("cannot normalize a vector of norm {norm:e}")));
        }
        let out = self.value(x).iter().map(|v| v / norm).collect();
        Ok(self.push(self.shape(x).to_vec(), out, &[x], Op::L2Normalize { x, norm }))
    }

    /// Linear interpolation of a length-`m` vector onto `n` evenly spaced
    /// positions spanning the same endpoints.
    pub fn resample_linear(&mut self, x: Var, n: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 1 || sx[0] < 2 || n == 0 {
            return Err(Error::InvalidInput(format!(
                "resample needs a vector of length >= 2 and a positive target, got {sx:?} -> {n}"
            )));
        }
        let plan = kernels::resample_plan(sx[0], n);
        let xv = self.value(x);
        let out = plan.iter().map(|&(i, w)| xv[i] * (1.0 - w) + xv[i + 1] * w).collect();
        Ok(self.push(vec![n], out, &[x], Op::Resample { x, plan }))
    }

    /// Mean cross-entropy of logits against class targets, through a fused
    /// log-softmax. `logits` is a vector (one target) or `[rows, classes]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        let n = *sl.last().ok_or_else(|| Error::InvalidInput("cross_entropy of a scalar".into()))?;
        let rows = self.value(logits).len() / n;
        if rows != targets.len() || sl.len() > 2 {
            return Err(Error::dim("cross_entropy", &sl, &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Index { index: bad, len: n });
        }
        let lv = self.value(logits);
        if lv.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("cross_entropy logits contain NaN".into()));
        }
        let mut loss = 0.0;
        for (row, &t) in lv.chunks(n).zip(targets) {
            loss += kernels::log_sum_exp(row) - row[t];
        }
        loss /= rows as f64;
        let probs = kernels::softmax_rows(lv, n);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            &[logits],
            Op::CrossEntropy { logits, targets: targets.to_vec(), n, probs },
        ))
    }

    /// Columns `start..start+len` of a `[m, n]` value.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || start + len > sx[1] {
            return Err(Error::dim("slice_cols", &sx, &[start, len]));
        }
        let n = sx[1];
        let out = self.value(x).chunks(n).flat_map(|r| r[start..start + len].iter().copied()).collect();
        Ok(self.push(vec![sx[0], len], out, &[x], Op::SliceCols { x, n, start, len }))
    }

    /// Side-by-side concatenation of `[m, n_i]` values.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("concat of an empty list".into()))?;
        let rows = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::dim("concat_cols", self.shape(*first), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p)[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(vec![rows, total], out, parts, Op::ConcatCols { parts: parts.to_vec(), widths }))
    }

    /// Stacks equal-length vectors into a `[k, n]` matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("stack of an empty list".into()))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() != 1 {
            return Err(Error::dim("stack_rows", &s0, &[]));
        }
        let mut out = Vec::with_capacity(parts.len() * s0[0]);
        for p in parts {
            if self.shape(*p) != s0.as_slice() {
                return Err(Error::dim("stack_rows", &s0, self.shape(*p)));
            }
            out.extend_from_slice(self.value(*p));
        }
        Ok(self.push(vec![parts.len(), s0[0]], out, parts, Op::StackRows { parts: parts.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return Err(Error::dim("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape, out, &[x], Op::Reshape(x)))
    }

    /// Reverse-mode sweep from a scalar. Only nodes that depend on a
    /// trainable leaf receive adjoints.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidInput(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            leaves: self.leaves.clone(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out_val = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(*m, *n, *k, g, false, self.value(*b), true, &mut da, false);
                    add_into(&mut grads[a.0], &da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(*k, *m, *n, self.value(*a), true, g, false, &mut db, false);
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Linear { x, w, b, rows, inp, out } => {
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * inp];
                    gemm(*rows, *out, *inp, g, false, self.value(*w), false, &mut dx, false);
                    add_into(&mut grads[x.0], &dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; out * inp];
                    gemm(*out, *rows, *inp, g, true, self.value(*x), false, &mut dw, false);
                    add_into(&mut grads[w.0], &dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; *out];
                        for row in g.chunks(*out) {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                        }
                        add_into(&mut grads[b.0], &db);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        add_into(&mut grads[v.0], g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    add_into(&mut grads[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d: Vec<f64> = g.iter().zip(self.value(*b)).map(|(g, y)| g * y).collect();
                    add_into(&mut grads[a.0], &d);
                }
                if self.wants(*b) {
                    let d: Vec<f64> = g.iter().zip(self.value(*a)).map(|(g, x)| g * x).collect();
                    add_into(&mut grads[b.0], &d);
                }
            }
            Op::Scale(a, c) => {
                let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                add_into(&mut grads[a.0], &d);
            }
            Op::Sum(a) => {
                let d = vec![g[0]; self.value(*a).len()];
                add_into(&mut grads[a.0], &d);
            }
            Op::Gelu(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(g, &x)| g * kernels::gelu_grad(x))
                    .collect();
                add_into(&mut grads[a.0], &d);
            }
            Op::LayerNorm { x, scale, shift, n, xhat, inv_std } => {
                let gamma = self.value(*scale);
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, ((grow, xrow), dst)) in g
                        .chunks(*n)
                        .zip(xhat.chunks(*n))
                        .zip(dx.chunks_mut(*n))
                        .enumerate()
                    {
                        let dxhat: Vec<f64> = grow.iter().zip(gamma).map(|(g, s)| g * s).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / *n as f64;
                        let mean_dx = dxhat.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / *n as f64;
                        for ((d, dh), xh) in dst.iter_mut().zip(&dxhat).zip(xrow) {
                            *d = inv_std[r] * (dh - mean_d - xh * mean_dx);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
                if self.wants(*scale) {
                    let mut ds = vec![0.0; *n];
                    for (grow, xrow) in g.chunks(*n).zip(xhat.chunks(*n)) {
                        ds.iter_mut().zip(grow.iter().zip(xrow)).for_each(|(d, (g, x))| *d += g * x);
                    }
                    add_into(&mut grads[scale.0], &ds);
                }
                if self.wants(*shift) {
                    let mut db = vec![0.0; *n];
                    for grow in g.chunks(*n) {
                        db.iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                    }
                    add_into(&mut grads[shift.0], &db);
                }
            }
            Op::Softmax { x, n } => {
                let mut dx = vec![0.0; g.len()];
                for ((grow, yrow), dst) in g.chunks(*n).zip(out_val.chunks(*n)).zip(dx.chunks_mut(*n)) {
                    let s = kernels::dot(grow, yrow);
                    for ((d, g), y) in dst.iter_mut().zip(grow).zip(yrow) {
                        *d = y * (g - s);
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::CausalAttention { qkv, batch, seq, heads, d, probs } => {
                let (batch, seq, heads, d) = (*batch, *seq, *heads, *d);
                let dh = d / heads;
                let inv = 1.0 / (dh as f64).sqrt();
                let src = self.value(*qkv);
                let mut dsrc = vec![0.0; src.len()];
                let row = |b: usize, t: usize| (b * seq + t) * 3 * d;
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                        for i in 0..seq {
                            let go = &g[(b * seq + i) * d + h * dh..][..dh];
                            let mut s = 0.0;
                            for j in 0..=i {
                                let v = &src[row(b, j) + 2 * d + h * dh..][..dh];
                                dp[j] = kernels::dot(go, v);
                                s += dp[j] * p[i * seq + j];
                                let w = p[i * seq + j];
                                let dv = &mut dsrc[row(b, j) + 2 * d + h * dh..][..dh];
                                dv.iter_mut().zip(go).for_each(|(a, g)| *a += w * g);
                            }
                            for j in 0..=i {
                                let ds = p[i * seq + j] * (dp[j] - s) * inv;
                                if ds == 0.0 {
                                    continue;
                                }
                                let (qo, ko) = (row(b, i) + h * dh, row(b, j) + d + h * dh);
                                for t in 0..dh {
                                    dsrc[qo + t] += ds * src[ko + t];
                                    dsrc[ko + t] += ds * src[qo + t];
                                }
                            }
                        }
                    }
                }
                add_into(&mut grads[qkv.0], &dsrc);
            }
            Op::Embedding { table, ids, dim } => {
                let mut dt = vec![0.0; self.value(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id * dim..(id + 1) * dim];
                    dst.iter_mut().zip(&g[r * dim..(r + 1) * dim]).for_each(|(d, g)| *d += g);
                }
                add_into(&mut grads[table.0], &dt);
            }
            Op::SelectRows { x, rows, n } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (k, &r) in rows.iter().enumerate() {
                    let dst = &mut dx[r * n..(r + 1) * n];
                    dst.iter_mut().zip(&g[k * n..(k + 1) * n]).for_each(|(d, g)| *d += g);
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::Inject { h, z, alpha, rows, n, norms } => {
                let hv = self.value(*h);
                let zv = self.value(*z);
                if self.wants(*h) {
                    let mut dh = g.to_vec();
                    for (&r, &norm) in rows.iter().zip(norms) {
                        let grow = &g[r * n..(r + 1) * n];
                        let hrow = &hv[r * n..(r + 1) * n];
                        let zg = kernels::dot(zv, grow);
                        let dst = &mut dh[r * n..(r + 1) * n];
                        for ((d, gg), hh) in dst.iter_mut().zip(grow).zip(hrow) {
                            *d = (1.0 - alpha) * gg;
                            if norm > 0.0 {
                                *d += alpha * zg * hh / norm;
                            }
                        }
                    }
                    add_into(&mut grads[h.0], &dh);
                }
                if self.wants(*z) {
                    let mut dz = vec![0.0; *n];
                    for (&r, &norm) in rows.iter().zip(norms) {
                        let grow = &g[r * n..(r + 1) * n];
                        dz.iter_mut().zip(grow).for_each(|(d, g)| *d += alpha * norm * g);
                    }
                    add_into(&mut grads[z.0], &dz);
                }
            }
            Op::L2Normalize { x, norm } => {
                let s = kernels::dot(out_val, g);
                let dx: Vec<f64> = g.iter().zip(out_val.iter()).map(|(g, y)| (g - y * s) / norm).collect();
                add_into(&mut grads[x.0], &dx);
            }
            Op::Resample { x, plan } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (&(i, w), gg) in plan.iter().zip(g) {
                    dx[i] += (1.0 - w) * gg;
                    dx[i + 1] += w * gg;
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::CrossEntropy { logits, targets, n, probs } => {
                let rows = targets.len() as f64;
                let mut dl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * n + t] -= 1.0;
                }
                dl.iter_mut().for_each(|v| *v *= g[0] / rows);
                add_into(&mut grads[logits.0], &dl);
            }
            Op::SliceCols { x, n, start, len } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (dst, src) in dx.chunks_mut(*n).zip(g.chunks(*len)) {
                    dst[*start..start + len].copy_from_slice(src);
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::ConcatCols { parts, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (p, &w) in parts.iter().zip(widths) {
                    if self.wants(*p) {
                        let d: Vec<f64> = g.chunks(total).flat_map(|r| r[offset..offset + w].iter().copied()).collect();
                        add_into(&mut grads[p.0], &d);
                    }
                    offset += w;
                }
            }
            Op::StackRows { parts } => {
                let n = g.len() / parts.len();
                for (k, p) in parts.iter().enumerate() {
                    if self.wants(*p) {
                        add_into(&mut grads[p.0], &g[k * n..(k + 1) * n]);
                    }
                }
            }
            Op::Reshape(x) => add_into(&mut grads[x.0], g),
        }
    }
}
