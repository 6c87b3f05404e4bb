//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] owns every tensor produced during one forward pass. Each op
//! appends a node holding its output value and the information its backward
//! rule needs, so the node list is already in topological order. Calling
//! [`Graph::backward`] walks the list in reverse and accumulates gradients into
//! the leaves that were created with [`Graph::param`].
//!
//! Broadcasting is limited to [`Graph::add_row`] (bias add); every other op
//! requires exactly matching shapes.

use std::borrow::Cow;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, Scalar, Tensor};

/// Handle to a tensor recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    // Backward only needs the output, which is the node's own value. Masked
    // entries have output 0 and therefore receive no gradient.
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore_id: usize,
        probs: Vec<T>,
        count: usize,
    },
    Slice {
        x: Var,
        row0: usize,
        col0: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Sum(Var),
}

struct Node<'a, T: Clone> {
    value: Cow<'a, Tensor<T>>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// A computation record: tensors plus the ops that produced them. Leaves may
/// borrow their tensors (e.g. model parameters) for the graph's lifetime.
pub struct Graph<'a, T: Clone> {
    nodes: Vec<Node<'a, T>>,
    recording: bool,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// A graph that records ops for a later backward pass.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A graph for inference: no backward information is kept and dropout
    /// is the identity.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Cow<'a, Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.recording,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(value), true)
    }

    /// Adds a trainable leaf that borrows its tensor.
    pub fn param_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.leaf(Cow::Borrowed(value), true)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(value), false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.leaf(Cow::Borrowed(value), false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a trainable leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        inputs: &[Var],
        op: Op<T>,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            requires_grad,
            grad: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2().ok_or_else(|| Error::Dimension {
            op,
            lhs: self.shape(v).to_vec(),
            rhs: vec![],
        })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, &[a, b], Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", x)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        self.push("transpose", value, &[x], Op::Transpose(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("add", value, &[a, b], Op::Add(a, b))
    }

    /// Adds a bias vector to every row (the only broadcasting op).
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("add_row", value, &[x, bias], Op::AddRow(x, bias))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("mul", value, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("scale", value, &[x], Op::Scale(x, c))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("gelu", value, &[x], Op::Gelu(x))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension {
                op: "softmax",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let (outer, len, inner) = axis_layout(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut buf = vec![T::zero(); len];
        for o in 0..outer {
            for j in 0..inner {
                let base = o * len * inner + j;
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = src[base + i * inner];
                }
                softmax_in_place(&mut buf);
                for (i, &b) in buf.iter().enumerate() {
                    out[base + i * inner] = b;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push("softmax", value, &[x], Op::Softmax { x, axis })
    }

    /// Row-wise softmax of a matrix where only entries with `visible[i*cols+j]`
    /// take part. A row with no visible entry yields all zeros.
    pub fn masked_softmax(&mut self, x: Var, visible: &[bool]) -> Result<Var> {
        let (rows, cols) = self.dims2("masked_softmax", x)?;
        if visible.len() != rows * cols {
            return Err(Error::Dimension {
                op: "masked_softmax",
                lhs: vec![rows, cols],
                rhs: vec![visible.len()],
            });
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let vis = &visible[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(vis)
                .filter(|(_, &v)| v)
                .map(|(&x, _)| x)
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                continue;
            }
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mut total = T::zero();
            for ((d, &x), &v) in dst.iter_mut().zip(row).zip(vis) {
                if v {
                    *d = (x - max).exp();
                    total += *d;
                }
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        self.push("masked_softmax", value, &[x], Op::Softmax { x, axis: 1 })
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let n = *self.shape(x).last().unwrap_or(&0);
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / n;
        let inv_n = T::one() / T::from_f64(n as f64);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Gathers rows of `table` (shape `[V, d]`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2("embedding", table)?;
        if ids.is_empty() {
            return Err(Error::contract("embedding lookup needs at least one id"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::UnknownId {
                    id,
                    vocab_size: vocab,
                });
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        self.push(
            "embedding",
            value,
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`[T, V]`), skipping positions whose target is `ignore_id`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_id: usize,
    ) -> Result<Var> {
        let (rows, vocab) = self.dims2("cross_entropy", logits)?;
        if targets.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: vec![rows, vocab],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab && t != ignore_id) {
            return Err(Error::UnknownId {
                id: bad,
                vocab_size: vocab,
            });
        }
        let count = targets.iter().filter(|&&t| t != ignore_id).count();
        if count == 0 {
            return Err(Error::DegenerateBatch);
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore_id {
                continue;
            }
            let row = &src[r * vocab..(r + 1) * vocab];
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            p.copy_from_slice(row);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in p.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let log_z = max + sum.ln();
            total += log_z - row[t];
            for v in p.iter_mut() {
                *v /= sum;
            }
        }
        let loss = total / T::from_f64(count as f64);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_id,
                probs,
                count,
            },
        )
    }

    /// The `rows × cols` block of a matrix starting at `(row0, col0)`.
    pub fn slice(
        &mut self,
        x: Var,
        row0: usize,
        rows: usize,
        col0: usize,
        cols: usize,
    ) -> Result<Var> {
        let (m, n) = self.dims2("slice", x)?;
        if rows == 0 || cols == 0 || row0 + rows > m || col0 + cols > n {
            return Err(Error::Dimension {
                op: "slice",
                lhs: vec![m, n],
                rhs: vec![row0, rows, col0, cols],
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * cols);
        for r in row0..row0 + rows {
            out.extend_from_slice(&src[r * n + col0..r * n + col0 + cols]);
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        self.push("slice", value, &[x], Op::Slice { x, row0, col0 })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows needs at least one input"))?;
        let (_, n) = self.dims2("concat_rows", first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2("concat_rows", p)?;
            if c != n {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: vec![r, c],
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        if parts.len() == 1 {
            return Ok(first);
        }
        let value = Tensor::new(vec![rows, n], out)?;
        self.push("concat_rows", value, parts, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols needs at least one input"))?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let (m, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if r != m {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: vec![r, c],
                });
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push("concat_cols", value, parts, Op::ConcatCols(parts.to_vec()))
    }

    /// Inverted dropout. The identity when not recording or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !self.recording || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::contract("dropout probability must be below 1"));
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = zip_map(self.value(x).data(), &mask, |a, m| a * m);
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("dropout", value, &[x], Op::Dropout { x, mask })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(total), &[x], Op::Sum(x))
    }

    /// Reverse pass from a scalar `loss`. Gradients of trainable leaves are
    /// added to whatever earlier passes left there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.recording {
            return Err(Error::contract("backward on an inference graph"));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
        }

        for (node, a) in self.nodes.iter_mut().zip(adj) {
            if !node.requires_grad || !matches!(node.op, Op::Leaf) {
                continue;
            }
            if let Some(a) = a {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(a).for_each(|(x, y)| *x += y),
                    None => node.grad = Some(a),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().unwrap();
                let n = out.shape()[1];
                if let Some(da) = slot(nodes, adj, *a) {
                    matmul_nt_acc(g, nodes[b.0].value.data(), da, m, n, k);
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    matmul_tn_acc(nodes[a.0].value.data(), g, db, m, k, n);
                }
            }
            Op::Transpose(x) => {
                let (m, n) = nodes[x.0].value.dims2().unwrap();
                if let Some(dx) = slot(nodes, adj, *x) {
                    for r in 0..m {
                        for c in 0..n {
                            dx[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = slot(nodes, adj, *v) {
                        add_into(d, g);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(dx) = slot(nodes, adj, *x) {
                    add_into(dx, g);
                }
                let n = nodes[bias.0].value.len();
                if let Some(db) = slot(nodes, adj, *bias) {
                    for row in g.chunks_exact(n) {
                        add_into(db, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(da) = slot(nodes, adj, *a) {
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    for ((d, &gi), &x) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = slot(nodes, adj, *x) {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi * *c;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = nodes[x.0].value.data();
                if let Some(dx) = slot(nodes, adj, *x) {
                    for ((d, &gi), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gi * gelu_grad(v);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_layout(out.shape(), *axis);
                let y = out.data();
                if let Some(dx) = slot(nodes, adj, *x) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let base = o * len * inner + j;
                            let mut s = T::zero();
                            for t in 0..len {
                                s += y[base + t * inner] * g[base + t * inner];
                            }
                            for t in 0..len {
                                let idx = base + t * inner;
                                dx[idx] += y[idx] * (g[idx] - s);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = nodes[gain.0].value.len();
                let gv = nodes[gain.0].value.data();
                if let Some(dg) = slot(nodes, adj, *gain) {
                    for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(db) = slot(nodes, adj, *bias) {
                    for gr in g.chunks_exact(n) {
                        add_into(db, gr);
                    }
                }
                if let Some(dx) = slot(nodes, adj, *x) {
                    let inv_n = T::one() / T::from_f64(n as f64);
                    let mut dh = vec![T::zero(); n];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dh[j] = gr[j] * gv[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() * inv_n;
                        let mean_dh_h = dot(&dh, hr) * inv_n;
                        let dxr = &mut dx[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxr[j] += rs * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = out.shape()[1];
                if let Some(dt) = slot(nodes, adj, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_id,
                probs,
                count,
            } => {
                let vocab = nodes[logits.0].value.shape()[1];
                let scale = g[0] / T::from_f64(*count as f64);
                if let Some(dl) = slot(nodes, adj, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore_id {
                            continue;
                        }
                        let p = &probs[r * vocab..(r + 1) * vocab];
                        let d = &mut dl[r * vocab..(r + 1) * vocab];
                        for (dv, &pv) in d.iter_mut().zip(p) {
                            *dv += pv * scale;
                        }
                        d[t] -= scale;
                    }
                }
            }
            Op::Slice { x, row0, col0 } => {
                let n = nodes[x.0].value.shape()[1];
                let (rows, cols) = out.dims2().unwrap();
                if let Some(dx) = slot(nodes, adj, *x) {
                    for r in 0..rows {
                        let start = (row0 + r) * n + col0;
                        add_into(&mut dx[start..start + cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(dp) = slot(nodes, adj, *p) {
                        add_into(dp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = out.dims2().unwrap();
                let mut col = 0;
                for p in parts {
                    let w = nodes[p.0].value.shape()[1];
                    if let Some(dp) = slot(nodes, adj, *p) {
                        for r in 0..m {
                            add_into(
                                &mut dp[r * w..(r + 1) * w],
                                &g[r * n + col..r * n + col + w],
                            );
                        }
                    }
                    col += w;
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = slot(nodes, adj, *x) {
                    for ((d, &gi), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = slot(nodes, adj, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }
    }
}

/// Adjoint buffer of `v`, allocated on first use; `None` when `v` needs no
/// gradient.
fn slot<'s, T: Scalar>(
    nodes: &[Node<'_, T>],
    adj: &'s mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'s mut [T]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(
        adj[v.0]
            .get_or_insert_with(|| vec![T::zero(); len])
            .as_mut_slice(),
    )
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}
