//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] borrows a [`ParamStore`] for the duration of one forward and
//! backward pass. Nodes are appended in evaluation order, so the tape is
//! acyclic by construction and backward is a single reverse sweep.

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{ShapeError, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, T),
    RowScale(NodeId, Vec<T>),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize),
    Embed(NodeId, Vec<usize>),
    RepeatRows(NodeId, usize),
    Reshape(NodeId),
    WeightedSum(NodeId, NodeId),
    Interleave(Vec<NodeId>),
    Conv1d {
        input: NodeId,
        kernel: NodeId,
        cols: Tensor<T>,
    },
    Maxout(NodeId, Vec<bool>),
    SoftmaxCe {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Tensor<T>,
    },
    Sum(NodeId),
}

struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax; masked entries get exactly zero probability.
pub fn softmax_rows<T: Scalar>(
    x: &Tensor<T>,
    mask: Option<&[bool]>,
) -> Result<Tensor<T>, ShapeError> {
    let (rows, cols) = x.dims2();
    if let Some(m) = mask {
        if m.len() != x.len() {
            return Err(ShapeError::mismatch("softmax", x.shape(), &[m.len()]));
        }
    }
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        let row = x.row(r);
        let valid = |c: usize| mask.is_none_or(|m| m[r * cols + c]);
        let mut max = T::neg_infinity();
        for (c, &v) in row.iter().enumerate() {
            if valid(c) && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            return Err(ShapeError::invalid(
                "softmax",
                format!("row {r} has no unmasked entry"),
            ));
        }
        let mut total = T::zero();
        for (c, &v) in row.iter().enumerate() {
            if valid(c) {
                let e = (v - max).exp();
                out[r * cols + c] = e;
                total += e;
            }
        }
        for o in &mut out[r * cols..(r + 1) * cols] {
            *o /= total;
        }
    }
    Tensor::new(x.shape(), out)
}

/// Row-wise log-softmax, numerically safe for large logits.
pub fn log_softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (rows, cols) = x.dims2();
    let mut out = x.data().to_vec();
    for r in 0..rows {
        let row = &mut out[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(1024),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        let node = &self.nodes[id.0];
        match node.op {
            Op::Param(p) => self.params.get(p),
            _ => node
                .value
                .as_ref()
                .expect("non-parameter nodes carry values"),
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> NodeId {
        debug_assert!(value.is_finite() || !needs_grad || matches!(op, Op::Input));
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Input, value, false)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            needs_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ShapeError> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), value, ng))
    }

    fn zip(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, ShapeError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(ShapeError::mismatch(op, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ShapeError> {
        let value = self.zip("add", a, b, |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ShapeError> {
        let value = self.zip("sub", a, b, |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), value, ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ShapeError> {
        let value = self.zip("mul", a, b, |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, ng))
    }

    /// Adds a length-`n` bias vector to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, ShapeError> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let (_, cols) = vx.dims2();
        if vb.len() != cols {
            return Err(ShapeError::mismatch("add_bias", vx.shape(), vb.shape()));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (v, &b) in row.iter_mut().zip(vb.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(vx.shape(), data)?;
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(Op::AddBias(x, bias), value, ng))
    }

    /// `x @ w + b`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, ShapeError> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let value = self.value(x).map(|v| v * factor);
        let ng = self.needs(x);
        self.push(Op::Scale(x, factor), value, ng)
    }

    /// Multiplies row `r` of `x` by the constant `factors[r]`.
    pub fn row_scale(&mut self, x: NodeId, factors: Vec<T>) -> Result<NodeId, ShapeError> {
        let vx = self.value(x);
        let (rows, cols) = vx.dims2();
        if factors.len() != rows {
            return Err(ShapeError::mismatch(
                "row_scale",
                vx.shape(),
                &[factors.len()],
            ));
        }
        let mut data = vx.data().to_vec();
        for (row, &f) in data.chunks_mut(cols).zip(&factors) {
            for v in row {
                *v *= f;
            }
        }
        let value = Tensor::new(vx.shape(), data)?;
        let ng = self.needs(x);
        Ok(self.push(Op::RowScale(x, factors), value, ng))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(sigmoid);
        let ng = self.needs(x);
        self.push(Op::Sigmoid(x), value, ng)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(T::tanh);
        let ng = self.needs(x);
        self.push(Op::Tanh(x), value, ng)
    }

    /// Softmax along the last axis. Entries whose `mask` flag is false are
    /// treated as `-inf` energies and come out as exact zeros.
    pub fn softmax(&mut self, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId, ShapeError> {
        let value = softmax_rows(self.value(x), mask)?;
        let ng = self.needs(x);
        Ok(self.push(Op::Softmax(x), value, ng))
    }

    /// Concatenation of rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, ShapeError> {
        if parts.is_empty() {
            return Err(ShapeError::invalid("concat", "no inputs"));
        }
        let first = self.value(parts[0]).dims2();
        let ng = parts.iter().any(|&p| self.needs(p));
        match axis {
            0 => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let v = self.value(p);
                    if v.dims2().1 != first.1 {
                        return Err(ShapeError::mismatch(
                            "concat",
                            self.shape(parts[0]),
                            v.shape(),
                        ));
                    }
                    rows += v.dims2().0;
                    data.extend_from_slice(v.data());
                }
                let value = Tensor::matrix(rows, first.1, data)?;
                Ok(self.push(Op::ConcatRows(parts.to_vec()), value, ng))
            }
            1 => {
                let mut cols = 0;
                for &p in parts {
                    let v = self.value(p);
                    if v.dims2().0 != first.0 {
                        return Err(ShapeError::mismatch(
                            "concat",
                            self.shape(parts[0]),
                            v.shape(),
                        ));
                    }
                    cols += v.dims2().1;
                }
                let mut data = Vec::with_capacity(first.0 * cols);
                for r in 0..first.0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(r));
                    }
                }
                let value = Tensor::matrix(first.0, cols, data)?;
                Ok(self.push(Op::ConcatCols(parts.to_vec()), value, ng))
            }
            _ => Err(ShapeError::invalid(
                "concat",
                format!("axis {axis} unsupported"),
            )),
        }
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(
        &mut self,
        x: NodeId,
        start: usize,
        end: usize,
    ) -> Result<NodeId, ShapeError> {
        let vx = self.value(x);
        let (rows, cols) = vx.dims2();
        if start >= end || end > cols {
            return Err(ShapeError::invalid(
                "slice",
                format!("columns {start}..{end} of {:?}", vx.shape()),
            ));
        }
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&vx.row(r)[start..end]);
        }
        let value = Tensor::matrix(rows, end - start, data)?;
        let ng = self.needs(x);
        Ok(self.push(Op::SliceCols(x, start), value, ng))
    }

    /// Gathers rows of an embedding table.
    pub fn embed(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId, ShapeError> {
        let vt = self.value(table);
        let (rows, cols) = vt.dims2();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(ShapeError::invalid(
                    "embed",
                    format!("index {i} outside table of {rows} rows"),
                ));
            }
            data.extend_from_slice(vt.row(i));
        }
        let value = Tensor::matrix(indices.len(), cols, data)?;
        let ng = self.needs(table);
        Ok(self.push(Op::Embed(table, indices.to_vec()), value, ng))
    }

    /// `[B, n] -> [B * times, n]`, row `b * times + i` copying row `b`.
    pub fn repeat_rows(&mut self, x: NodeId, times: usize) -> NodeId {
        let vx = self.value(x);
        let (rows, cols) = vx.dims2();
        let mut data = Vec::with_capacity(rows * times * cols);
        for r in 0..rows {
            for _ in 0..times {
                data.extend_from_slice(vx.row(r));
            }
        }
        let value = Tensor::matrix(rows * times, cols, data).expect("consistent");
        let ng = self.needs(x);
        self.push(Op::RepeatRows(x, times), value, ng)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, ShapeError> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(Op::Reshape(x), value, ng))
    }

    /// Per-sample weighted sum: `weights` is `[B, L]`, `values` is
    /// `[B * L, D]` (sample-major); output row `b` is
    /// `sum_i weights[b, i] * values[b * L + i]`.
    pub fn weighted_sum(&mut self, weights: NodeId, values: NodeId) -> Result<NodeId, ShapeError> {
        let (vw, vv) = (self.value(weights), self.value(values));
        let (b, l) = vw.dims2();
        let (rows, d) = vv.dims2();
        if rows != b * l {
            return Err(ShapeError::mismatch("weighted_sum", vw.shape(), vv.shape()));
        }
        let mut out = vec![T::zero(); b * d];
        for s in 0..b {
            let acc = &mut out[s * d..(s + 1) * d];
            for i in 0..l {
                let w = vw.get2(s, i);
                if w == T::zero() {
                    continue;
                }
                for (o, &v) in acc.iter_mut().zip(vv.row(s * l + i)) {
                    *o += w * v;
                }
            }
        }
        let value = Tensor::matrix(b, d, out)?;
        let ng = self.needs(weights) || self.needs(values);
        Ok(self.push(Op::WeightedSum(weights, values), value, ng))
    }

    /// Stacks `T` time steps of `[B, D]` into sample-major `[B * T, D]`
    /// (row `b * T + t` is step `t` of sample `b`).
    pub fn interleave(&mut self, steps: &[NodeId]) -> Result<NodeId, ShapeError> {
        if steps.is_empty() {
            return Err(ShapeError::invalid("interleave", "no steps"));
        }
        let (b, d) = self.value(steps[0]).dims2();
        for &s in steps {
            if self.value(s).dims2() != (b, d) {
                return Err(ShapeError::mismatch(
                    "interleave",
                    self.shape(steps[0]),
                    self.shape(s),
                ));
            }
        }
        let t = steps.len();
        let mut data = Vec::with_capacity(b * t * d);
        for s in 0..b {
            for &step in steps {
                data.extend_from_slice(self.value(step).row(s));
            }
        }
        let value = Tensor::matrix(b * t, d, data)?;
        let ng = steps.iter().any(|&s| self.needs(s));
        Ok(self.push(Op::Interleave(steps.to_vec()), value, ng))
    }

    /// One-dimensional "same" convolution of each row of `input` (`[B, L]`)
    /// with `kernel` (`[F, k]`, `k` odd), no bias. Output is `[B * L, F]`,
    /// row `b * L + i` holding the `F` filter responses at position `i`.
    pub fn conv1d(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId, ShapeError> {
        let (vx, vk) = (self.value(input), self.value(kernel));
        let (b, l) = vx.dims2();
        let (f, k) = vk.dims2();
        if vk.shape().len() != 2 || k % 2 == 0 {
            return Err(ShapeError::invalid(
                "conv1d",
                format!("kernel {:?} must be [filters, odd width]", vk.shape()),
            ));
        }
        let pad = k / 2;
        let mut cols = vec![T::zero(); b * l * k];
        for s in 0..b {
            for i in 0..l {
                for j in 0..k {
                    let src = i + j;
                    if src >= pad && src - pad < l {
                        cols[(s * l + i) * k + j] = vx.get2(s, src - pad);
                    }
                }
            }
        }
        let cols = Tensor::matrix(b * l, k, cols)?;
        let mut out = vec![T::zero(); b * l * f];
        // cols [BL, k] x kernel^T [k, F]
        T::gemm(
            b * l,
            k,
            f,
            T::one(),
            cols.data(),
            k as isize,
            1,
            vk.data(),
            1,
            k as isize,
            T::zero(),
            &mut out,
            f as isize,
            1,
        );
        let value = Tensor::matrix(b * l, f, out)?;
        let ng = self.needs(input) || self.needs(kernel);
        Ok(self.push(
            Op::Conv1d {
                input,
                kernel,
                cols,
            },
            value,
            ng,
        ))
    }

    /// Max over adjacent pairs of columns: `[m, 2p] -> [m, p]`.
    pub fn maxout(&mut self, x: NodeId) -> Result<NodeId, ShapeError> {
        let vx = self.value(x);
        let (rows, cols) = vx.dims2();
        if cols % 2 != 0 {
            return Err(ShapeError::invalid("maxout", format!("odd width {cols}")));
        }
        let mut data = Vec::with_capacity(rows * cols / 2);
        let mut second = Vec::with_capacity(rows * cols / 2);
        for pair in vx.data().chunks(2) {
            let pick = pair[1] > pair[0];
            second.push(pick);
            data.push(if pick { pair[1] } else { pair[0] });
        }
        let value = Tensor::matrix(rows, cols / 2, data)?;
        let ng = self.needs(x);
        Ok(self.push(Op::Maxout(x, second), value, ng))
    }

    /// Weighted softmax cross-entropy over the rows of `logits` (`[B, K]`):
    /// `sum_b weights[b] * -log softmax(logits[b])[targets[b]]`.
    pub fn softmax_ce(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        weights: Vec<T>,
    ) -> Result<NodeId, ShapeError> {
        let vl = self.value(logits);
        let (b, k) = vl.dims2();
        if targets.len() != b || weights.len() != b {
            return Err(ShapeError::mismatch(
                "softmax_ce",
                vl.shape(),
                &[targets.len(), weights.len()],
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(ShapeError::invalid(
                "softmax_ce",
                format!("target {bad} outside {k} classes"),
            ));
        }
        let logp = log_softmax_rows(vl);
        let mut loss = T::zero();
        for (r, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
            if w != T::zero() {
                loss -= w * logp.get2(r, t);
            }
        }
        let probs = logp.map(T::exp);
        let ng = self.needs(logits);
        Ok(self.push(
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            Tensor::scalar(loss),
            ng,
        ))
    }

    /// Sum of every value, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(Op::Sum(x), value, ng)
    }

    /// Reverse sweep from a scalar node. Parameters the loss does not reach
    /// get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, ShapeError> {
        if self.value(loss).len() != 1 {
            return Err(ShapeError::invalid(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut out = Gradients::zeros_like(self.params);
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, NodeId(id), g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], to: NodeId, delta: Tensor<T>) {
        if !self.needs(to) {
            return;
        }
        match &mut grads[to.0] {
            Some(t) => t.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Accumulator for `to`, allocated as zeros on first touch.
    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], to: NodeId) -> &'g mut Tensor<T> {
        let shape = self.shape(to).to_vec();
        grads[to.0].get_or_insert_with(|| Tensor::zeros(&shape))
    }

    fn propagate(
        &self,
        op: &Op<T>,
        id: NodeId,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        out: &mut Gradients<T>,
    ) {
        match op {
            Op::Input => {}
            Op::Param(p) => out.get_mut(*p).add_assign(&g),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.needs(*a) {
                    // ga += g [m,n] x b^T [n,k]
                    let ga = self.slot(grads, *a);
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        n as isize,
                        1,
                        vb.data(),
                        1,
                        n as isize,
                        T::one(),
                        ga.data_mut(),
                        k as isize,
                        1,
                    );
                }
                if self.needs(*b) {
                    // gb += a^T [k,m] x g [m,n]
                    let gb = self.slot(grads, *b);
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        va.data(),
                        1,
                        k as isize,
                        g.data(),
                        n as isize,
                        1,
                        T::one(),
                        gb.data_mut(),
                        n as isize,
                        1,
                    );
                }
            }
            Op::Add(a, b) => {
                if self.needs(*b) {
                    self.acc(grads, *b, g.clone());
                }
                self.acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.needs(*b) {
                    self.acc(grads, *b, g.map(|v| -v));
                }
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    self.acc(grads, *a, Tensor::new(g.shape(), d).expect("same shape"));
                }
                if self.needs(*b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    self.acc(grads, *b, Tensor::new(g.shape(), d).expect("same shape"));
                }
            }
            Op::AddBias(x, bias) => {
                if self.needs(*bias) {
                    let (_, cols) = g.dims2();
                    let gb = self.slot(grads, *bias);
                    for row in g.data().chunks(cols) {
                        for (o, &v) in gb.data_mut().iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
                self.acc(grads, *x, g);
            }
            Op::Scale(x, f) => {
                let f = *f;
                self.acc(grads, *x, g.map(|v| v * f));
            }
            Op::RowScale(x, factors) => {
                let (_, cols) = g.dims2();
                let mut g = g;
                for (row, &f) in g.data_mut().chunks_mut(cols).zip(factors) {
                    for v in row {
                        *v *= f;
                    }
                }
                self.acc(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                let y = self.value(id);
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                    .collect();
                self.acc(grads, *x, Tensor::new(g.shape(), d).expect("same shape"));
            }
            Op::Tanh(x) => {
                let y = self.value(id);
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * (T::one() - yv * yv))
                    .collect();
                self.acc(grads, *x, Tensor::new(g.shape(), d).expect("same shape"));
            }
            Op::Softmax(x) => {
                let y = self.value(id);
                let (rows, cols) = y.dims2();
                let mut d = vec![T::zero(); y.len()];
                for r in 0..rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        d[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.acc(grads, *x, Tensor::new(y.shape(), d).expect("same shape"));
            }
            Op::ConcatCols(parts) => {
                let (rows, _) = g.dims2();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2().1;
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        self.acc(grads, p, Tensor::new(self.shape(p), d).expect("same shape"));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.needs(p) {
                        let d = g.data()[offset..offset + n].to_vec();
                        self.acc(grads, p, Tensor::new(self.shape(p), d).expect("same shape"));
                    }
                    offset += n;
                }
            }
            Op::SliceCols(x, start) => {
                let (rows, w) = g.dims2();
                let gx = self.slot(grads, *x);
                let (_, cols) = gx.dims2();
                for r in 0..rows {
                    for c in 0..w {
                        gx.data_mut()[r * cols + start + c] += g.data()[r * w + c];
                    }
                }
            }
            Op::Embed(table, indices) => {
                let gt = self.slot(grads, *table);
                let (_, cols) = gt.dims2();
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..cols {
                        gt.data_mut()[i * cols + c] += g.data()[r * cols + c];
                    }
                }
            }
            Op::RepeatRows(x, times) => {
                let (_, cols) = g.dims2();
                let gx = self.slot(grads, *x);
                for (r, chunk) in g.data().chunks(cols * times).enumerate() {
                    for row in chunk.chunks(cols) {
                        for (c, &v) in row.iter().enumerate() {
                            gx.data_mut()[r * cols + c] += v;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.acc(grads, *x, g.reshape(&shape).expect("same count"));
            }
            Op::WeightedSum(weights, values) => {
                let (vw, vv) = (self.value(*weights), self.value(*values));
                let (b, l) = vw.dims2();
                let d = vv.dims2().1;
                if self.needs(*weights) {
                    let mut gw = vec![T::zero(); b * l];
                    for s in 0..b {
                        for i in 0..l {
                            gw[s * l + i] = g
                                .row(s)
                                .iter()
                                .zip(vv.row(s * l + i))
                                .map(|(&x, &y)| x * y)
                                .sum();
                        }
                    }
                    self.acc(
                        grads,
                        *weights,
                        Tensor::new(vw.shape(), gw).expect("same shape"),
                    );
                }
                if self.needs(*values) {
                    let gv = self.slot(grads, *values);
                    for s in 0..b {
                        for i in 0..l {
                            let w = vw.get2(s, i);
                            let row = &mut gv.data_mut()[(s * l + i) * d..(s * l + i + 1) * d];
                            for (o, &gr) in row.iter_mut().zip(g.row(s)) {
                                *o += w * gr;
                            }
                        }
                    }
                }
            }
            Op::Interleave(steps) => {
                let t = steps.len();
                let (_, d) = g.dims2();
                let b = g.dims2().0 / t;
                for (ti, &step) in steps.iter().enumerate() {
                    if !self.needs(step) {
                        continue;
                    }
                    let mut part = Vec::with_capacity(b * d);
                    for s in 0..b {
                        part.extend_from_slice(g.row(s * t + ti));
                    }
                    self.acc(grads, step, Tensor::matrix(b, d, part).expect("consistent"));
                }
            }
            Op::Conv1d {
                input,
                kernel,
                cols,
            } => {
                let vk = self.value(*kernel);
                let (f, k) = vk.dims2();
                let (bl, _) = g.dims2();
                if self.needs(*kernel) {
                    // gk [F,k] += g^T [F,BL] x cols [BL,k]
                    let gk = self.slot(grads, *kernel);
                    T::gemm(
                        f,
                        bl,
                        k,
                        T::one(),
                        g.data(),
                        1,
                        f as isize,
                        cols.data(),
                        k as isize,
                        1,
                        T::one(),
                        gk.data_mut(),
                        k as isize,
                        1,
                    );
                }
                if self.needs(*input) {
                    // gcols [BL,k] = g [BL,F] x kernel [F,k], then scatter back
                    let mut gcols = vec![T::zero(); bl * k];
                    T::gemm(
                        bl,
                        f,
                        k,
                        T::one(),
                        g.data(),
                        f as isize,
                        1,
                        vk.data(),
                        k as isize,
                        1,
                        T::zero(),
                        &mut gcols,
                        k as isize,
                        1,
                    );
                    let (b, l) = self.value(*input).dims2();
                    let pad = k / 2;
                    let gx = self.slot(grads, *input);
                    for s in 0..b {
                        for i in 0..l {
                            for j in 0..k {
                                let src = i + j;
                                if src >= pad && src - pad < l {
                                    gx.data_mut()[s * l + src - pad] += gcols[(s * l + i) * k + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Maxout(x, second) => {
                let mut d = vec![T::zero(); g.len() * 2];
                for (i, (&gv, &pick)) in g.data().iter().zip(second).enumerate() {
                    d[2 * i + usize::from(pick)] = gv;
                }
                let shape = self.shape(*x).to_vec();
                self.acc(grads, *x, Tensor::new(&shape, d).expect("same shape"));
            }
            Op::SoftmaxCe {
                logits,
                targets,
                weights,
                probs,
            } => {
                let scale = g.data()[0];
                let (_, k) = probs.dims2();
                let mut d = probs.data().to_vec();
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let row = &mut d[r * k..(r + 1) * k];
                    row[t] -= T::one();
                    for v in row.iter_mut() {
                        *v *= w * scale;
                    }
                }
                self.acc(
                    grads,
                    *logits,
                    Tensor::new(probs.shape(), d).expect("same shape"),
                );
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                self.acc(grads, *x, Tensor::full(&shape, g.data()[0]));
            }
        }
    }
}
