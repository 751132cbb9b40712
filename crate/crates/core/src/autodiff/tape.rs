// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dynamic computation tape.
//!
//! Every operation appends a node holding its forward value and a description
//! of how it was produced. The tape is rebuilt for each forward pass, which
//! lets callers splice payloads into a model's residual stream per call.
//! Nodes are created in topological order, so backward is a single reverse
//! sweep.

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

const RMS_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    /// Copy of another node's value that gradients never cross.
    Detached(Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    RmsNorm {
        x: Var,
        gain: Var,
    },
    Silu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax(Var),
    CausalMask(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
        end: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
        end: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Detached(_) => "detach",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale { .. } => "scale",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Silu(_) => "silu",
            Op::Embedding { .. } => "embedding",
            Op::Softmax(_) => "softmax",
            Op::CausalMask(_) => "causal_mask",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Sum(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Detached(_) => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::RmsNorm { x, gain } => vec![*x, *gain],
            Op::Scale { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Silu(x)
            | Op::Softmax(x)
            | Op::CausalMask(x)
            | Op::Sum(x) => vec![*x],
            Op::Embedding { table, .. } => vec![*table],
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of the operations of one forward pass.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::shape(op, format!("expected a matrix, got {other:?}"))),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Operation kind and input ids of every node, in creation order.
    pub fn record(&self) -> Vec<(&'static str, Vec<usize>)> {
        self.nodes
            .iter()
            .map(|n| (n.op.kind(), n.op.inputs().iter().map(|v| v.0).collect()))
            .collect()
    }

    /// Leaf holding `value`; `requires_grad = false` marks a frozen tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Same value as `x`, but backward stops here.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.nodes.push(Node {
            value,
            op: Op::Detached(x),
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>) -> Result<Var> {
        let value = eval(&op, |v| &self.nodes[v.0].value)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul { a, b, trans_b: false })
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul { a, b, trans_b: true })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddBias { x, bias })
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        self.push(Op::Scale { x, factor })
    }

    /// Root-mean-square normalisation over the feature axis with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        self.push(Op::RmsNorm { x, gain })
    }

    /// SiLU, `x · σ(x)`: the sigmoid member of the GELU family.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Silu(x))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.push(Op::Embedding {
            table,
            ids: ids.to_vec(),
        })
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Softmax(x))
    }

    /// Sets entries above the causal diagonal to `-inf`. For an `r × c` score
    /// matrix, row `i` may attend to columns `0..=i + (c - r)`.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        self.push(Op::CausalMask(x))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceRows { x, start, end })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceCols { x, start, end })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    /// Weighted mean of `-log softmax(logits)[target]` over rows.
    ///
    /// `weights` are per-row, nonnegative, and must not all be zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        self.push(Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
        })
    }

    /// Recomputes every non-leaf node from the leaf values.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::Detached(src) => values[src.0].clone(),
                op => eval(op, |v| &values[v.0])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<GradientMap<T>> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", loss_node.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if !loss_node.requires_grad {
            return Ok(GradientMap { grads });
        }
        grads[loss.0] = Some(Tensor::filled(loss_node.value.shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(GradientMap { grads })
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(node.value.shape()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Detached(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = node.value.shape()[1];
                let one = T::one();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    // dA = dC · Bᵀ  (or dC · B when B was used transposed)
                    let b_strides = if *trans_b { (k, 1) } else { (1, n) };
                    T::gemm(m, n, k, one, gd, (n, 1), bv.data(), b_strides, one, ga, (k, 1));
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    if *trans_b {
                        // dB (n×k) = dCᵀ · A
                        T::gemm(n, m, k, one, gd, (1, n), av.data(), (k, 1), one, gb, (k, 1));
                    } else {
                        // dB (k×n) = Aᵀ · dC
                        T::gemm(k, m, n, one, av.data(), (1, k), gd, (n, 1), one, gb, (n, 1));
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(buf) = self.grad_buf(grads, v) {
                        axpy(buf, gd);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                if let Some(buf) = self.grad_buf(grads, *a) {
                    for ((o, &gi), &bi) in buf.iter_mut().zip(gd).zip(bv.data()) {
                        *o = *o + gi * bi;
                    }
                }
                if let Some(buf) = self.grad_buf(grads, *b) {
                    for ((o, &gi), &ai) in buf.iter_mut().zip(gd).zip(av.data()) {
                        *o = *o + gi * ai;
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    axpy(buf, gd);
                }
                let cols = node.value.cols();
                if let Some(buf) = self.grad_buf(grads, *bias) {
                    for row in gd.chunks(cols) {
                        axpy(buf, row);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for (o, &gi) in buf.iter_mut().zip(gd) {
                        *o = *o + gi * *factor;
                    }
                }
            }
            Op::RmsNorm { x, gain } => {
                let xv = self.value(*x).clone();
                let gv = self.value(*gain).clone();
                let cols = xv.cols();
                let inv = inv_rms(&xv);
                if let Some(buf) = self.grad_buf(grads, *gain) {
                    for (r, (xr, gr)) in xv.data().chunks(cols).zip(gd.chunks(cols)).enumerate() {
                        for j in 0..cols {
                            buf[j] = buf[j] + gr[j] * xr[j] * inv[r];
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(grads, *x) {
                    let c = T::from_usize(cols).unwrap();
                    for (r, ((xr, gr), out)) in xv
                        .data()
                        .chunks(cols)
                        .zip(gd.chunks(cols))
                        .zip(buf.chunks_mut(cols))
                        .enumerate()
                    {
                        let s = inv[r];
                        let dot: T = (0..cols).map(|j| gr[j] * gv.data()[j] * xr[j]).sum();
                        let coef = s * s * s * dot / c;
                        for j in 0..cols {
                            out[j] = out[j] + s * gv.data()[j] * gr[j] - coef * xr[j];
                        }
                    }
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x).clone();
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for ((o, &gi), &xi) in buf.iter_mut().zip(gd).zip(xv.data()) {
                        *o = *o + gi * silu_grad(xi);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let cols = node.value.cols();
                if let Some(buf) = self.grad_buf(grads, *table) {
                    for (row, &id) in gd.chunks(cols).zip(ids) {
                        axpy(&mut buf[id * cols..(id + 1) * cols], row);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let cols = y.cols();
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for ((yr, gr), out) in y.data().chunks(cols).zip(gd.chunks(cols)).zip(buf.chunks_mut(cols)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            out[j] = out[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::CausalMask(x) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for i in 0..r {
                        let limit = i + (c - r);
                        for j in 0..=limit {
                            buf[i * c + j] = buf[i * c + j] + gd[i * c + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if let Some(buf) = self.grad_buf(grads, p) {
                        axpy(buf, &gd[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if let Some(buf) = self.grad_buf(grads, p) {
                        for (out, gr) in buf.chunks_mut(pc).zip(gd.chunks(total)) {
                            axpy(out, &gr[col..col + pc]);
                        }
                    }
                    col += pc;
                }
            }
            Op::SliceRows { x, start, .. } => {
                let cols = node.value.cols();
                if let Some(buf) = self.grad_buf(grads, *x) {
                    axpy(&mut buf[start * cols..start * cols + gd.len()], gd);
                }
            }
            Op::SliceCols { x, start, end } => {
                let src_cols = self.value(*x).cols();
                let w = end - start;
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for (out, gr) in buf.chunks_mut(src_cols).zip(gd.chunks(w)) {
                        axpy(&mut out[*start..*end], gr);
                    }
                }
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for o in buf.iter_mut() {
                        *o = *o + g0;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            } => {
                let lv = self.value(*logits).clone();
                let cols = lv.cols();
                let total: T = weights.iter().copied().sum();
                let g0 = gd[0];
                if let Some(buf) = self.grad_buf(grads, *logits) {
                    for (r, (lr, out)) in lv.data().chunks(cols).zip(buf.chunks_mut(cols)).enumerate() {
                        let w = weights[r];
                        if w == T::zero() {
                            continue;
                        }
                        let probs = softmax_row(lr);
                        let scale = g0 * w / total;
                        for j in 0..cols {
                            let onehot = if j == targets[r] { T::one() } else { T::zero() };
                            out[j] = out[j] + scale * (probs[j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn axpy<T: Real>(out: &mut [T], g: &[T]) {
    for (o, &gi) in out.iter_mut().zip(g) {
        *o = *o + gi;
    }
}

fn inv_rms<T: Real>(x: &Tensor<T>) -> Vec<T> {
    let cols = x.cols();
    let c = T::from_usize(cols).unwrap();
    let eps = T::from_f64_lossy(RMS_EPS);
    x.data()
        .chunks(cols)
        .map(|row| {
            let ms: T = row.iter().map(|&v| v * v).sum::<T>() / c;
            T::one() / (ms + eps).sqrt()
        })
        .collect()
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Numerically stable softmax of one row; `-inf` entries map to zero.
pub(crate) fn softmax_row<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let z: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `log softmax(row)[target]`.
pub(crate) fn log_softmax_at<T: Real>(row: &[T], target: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let z: T = row.iter().map(|&v| (v - max).exp()).sum();
    row[target] - max - z.ln()
}

fn eval<'a, T: Real + 'a>(op: &Op<T>, get: impl Fn(Var) -> &'a Tensor<T>) -> Result<Tensor<T>> {
    match op {
        Op::Leaf | Op::Detached(_) => unreachable!("leaves carry their own values"),
        Op::MatMul { a, b, trans_b } => {
            let (av, bv) = (get(*a), get(*b));
            let (m, k) = dims2("matmul", av)?;
            let (br, bc) = dims2("matmul", bv)?;
            let (bk, n, b_strides) = if *trans_b { (bc, br, (1, bc)) } else { (br, bc, (bc, 1)) };
            if k != bk {
                return Err(Error::shape(
                    "matmul",
                    format!(
                        "lhs {:?} vs rhs {:?}{}",
                        av.shape(),
                        bv.shape(),
                        if *trans_b { " (transposed)" } else { "" }
                    ),
                ));
            }
            let mut out = vec![T::zero(); m * n];
            T::gemm(
                m,
                k,
                n,
                T::one(),
                av.data(),
                (k, 1),
                bv.data(),
                b_strides,
                T::zero(),
                &mut out,
                (n, 1),
            );
            Tensor::matrix(m, n, out)
        }
        Op::Add(a, b) | Op::Mul(a, b) => {
            let (av, bv) = (get(*a), get(*b));
            if av.shape() != bv.shape() {
                return Err(Error::shape(op.kind(), format!("{:?} vs {:?}", av.shape(), bv.shape())));
            }
            let is_add = matches!(op, Op::Add(..));
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| if is_add { x + y } else { x * y })
                .collect();
            Tensor::new(av.shape().to_vec(), data)
        }
        Op::AddBias { x, bias } => {
            let (xv, bv) = (get(*x), get(*bias));
            if bv.numel() != xv.cols() {
                return Err(Error::shape(
                    "add_bias",
                    format!("{:?} + bias {:?}", xv.shape(), bv.shape()),
                ));
            }
            let cols = xv.cols();
            let data = xv
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v + bv.data()[i % cols])
                .collect();
            Tensor::new(xv.shape().to_vec(), data)
        }
        Op::Scale { x, factor } => Ok(get(*x).map(|v| v * *factor)),
        Op::RmsNorm { x, gain } => {
            let (xv, gv) = (get(*x), get(*gain));
            let cols = xv.cols();
            if gv.numel() != cols {
                return Err(Error::shape(
                    "rms_norm",
                    format!("{:?} with gain {:?}", xv.shape(), gv.shape()),
                ));
            }
            let inv = inv_rms(xv);
            let data = xv
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v * inv[i / cols] * gv.data()[i % cols])
                .collect();
            Tensor::new(xv.shape().to_vec(), data)
        }
        Op::Silu(x) => Ok(get(*x).map(silu)),
        Op::Embedding { table, ids } => {
            let tv = get(*table);
            let (rows, cols) = dims2("embedding", tv)?;
            if ids.is_empty() {
                return Err(Error::shape("embedding", "empty id list"));
            }
            let mut data = Vec::with_capacity(ids.len() * cols);
            for (pos, &id) in ids.iter().enumerate() {
                if id >= rows {
                    return Err(Error::shape(
                        "embedding",
                        format!("id {id} at position {pos} exceeds table rows {rows}"),
                    ));
                }
                data.extend_from_slice(tv.row(id));
            }
            Tensor::matrix(ids.len(), cols, data)
        }
        Op::Softmax(x) => {
            let xv = get(*x);
            let cols = xv.cols();
            let data = xv.data().chunks(cols).flat_map(softmax_row).collect();
            Tensor::new(xv.shape().to_vec(), data)
        }
        Op::CausalMask(x) => {
            let xv = get(*x);
            let (r, c) = dims2("causal_mask", xv)?;
            if r > c {
                return Err(Error::shape(
                    "causal_mask",
                    format!("more query rows than keys: {r}x{c}"),
                ));
            }
            let mut data = xv.data().to_vec();
            for i in 0..r {
                for j in (i + (c - r) + 1)..c {
                    data[i * c + j] = T::neg_infinity();
                }
            }
            Tensor::matrix(r, c, data)
        }
        Op::ConcatRows(parts) => {
            let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| get(p)).collect();
            Tensor::concat_rows(&tensors)
        }
        Op::ConcatCols(parts) => {
            let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| get(p)).collect();
            let rows = tensors
                .first()
                .map(|t| t.rows())
                .ok_or_else(|| Error::shape("concat_cols", "no parts"))?;
            if tensors.iter().any(|t| t.rows() != rows) {
                return Err(Error::shape("concat_cols", "row counts differ"));
            }
            let total: usize = tensors.iter().map(|t| t.cols()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for t in &tensors {
                    data.extend_from_slice(t.row(r));
                }
            }
            Tensor::matrix(rows, total, data)
        }
        Op::SliceRows { x, start, end } => get(*x).slice_rows(*start, *end),
        Op::SliceCols { x, start, end } => {
            let xv = get(*x);
            let cols = xv.cols();
            if start >= end || *end > cols {
                return Err(Error::shape(
                    "slice_cols",
                    format!("cols {start}..{end} of {:?}", xv.shape()),
                ));
            }
            let data = xv
                .data()
                .chunks(cols)
                .flat_map(|row| row[*start..*end].iter().copied())
                .collect();
            Tensor::matrix(xv.rows(), end - start, data)
        }
        Op::Sum(x) => Ok(Tensor::scalar(get(*x).sum())),
        Op::CrossEntropy {
            logits,
            targets,
            weights,
        } => {
            let lv = get(*logits);
            let (rows, vocab) = dims2("cross_entropy", lv)?;
            if targets.len() != rows || weights.len() != rows {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("{rows} rows, {} targets, {} weights", targets.len(), weights.len()),
                ));
            }
            if let Some((pos, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= vocab) {
                return Err(Error::contract(format!(
                    "cross-entropy target {t} at position {pos} outside vocabulary of {vocab}"
                )));
            }
            if weights.iter().any(|&w| w < T::zero() || !w.is_finite()) {
                return Err(Error::contract("cross-entropy weights must be finite and nonnegative"));
            }
            let total: T = weights.iter().copied().sum();
            if total <= T::zero() {
                return Err(Error::contract("cross-entropy mask selects no position"));
            }
            let mut acc = T::zero();
            for r in 0..rows {
                if weights[r] > T::zero() {
                    acc = acc - weights[r] * log_softmax_at(lv.row(r), targets[r]);
                }
            }
            Ok(Tensor::scalar(acc / total))
        }
    }
}

/// Gradients of one backward pass, indexed by node.
pub struct GradientMap<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> GradientMap<T> {
    /// Gradient of `v`, absent for nodes outside the backward path.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of nodes holding a gradient.
    pub fn populated(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    /// Squared L2 norm of `v`'s gradient, zero when absent.
    pub fn sq_norm(&self, v: Var) -> f64 {
        self.get(v).map_or(0.0, Tensor::sq_norm)
    }
}
