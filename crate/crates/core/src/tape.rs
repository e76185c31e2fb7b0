//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to run its backward rule. Nodes are appended in evaluation order, so
//! the tape is topologically sorted by construction and [`Tape::backward`]
//! is a single reverse sweep.
//!
//! Parameter leaves can borrow their tensors (`Cow::Borrowed`) so that
//! inference does not copy the model for every forward pass.

use std::borrow::Cow;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    MulConst(Var, Rc<Vec<f64>>),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    SumRows(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    CosineDistance(Var, Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulBt(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) => {
                vec![*a, *b]
            }
            CosineDistance(a, b) => vec![*a, *b],
            AddConst(a)
            | MulConst(a, _)
            | Affine(a, _)
            | Relu(a)
            | Sigmoid(a)
            | Tanh(a)
            | Softmax(a)
            | Sum(a)
            | SumRows(a) => vec![*a],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Gather { table, .. } => vec![*table],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Single-writer; see [`Tape::backward`].
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `var`; all zeros when `var` is not reachable from the loss.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn is_reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

fn dim_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension(format!(
        "{op}: incompatible shapes {:?} and {:?}",
        a.shape(),
        b.shape()
    ))
}

fn acc(grads: &mut [Option<Vec<f64>>], shapes: &[usize], v: Var, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; shapes[v.0]]);
    f(slot);
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an owned leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_raw(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    /// Records a leaf that borrows its value; used for parameters.
    pub fn leaf_ref(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.push_raw(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    /// A constant (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite output from {op:?}");
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(Cow::Owned(value), op, requires_grad)
    }

    fn matrix_check(&self, op: &str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.rank() != 2 {
            return Err(Error::Dimension(format!(
                "{op}: expected a matrix, got shape {:?}",
                t.shape()
            )));
        }
        Ok((t.rows(), t.cols()))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_check("matmul", a)?;
        let (k2, n) = self.matrix_check("matmul", b)?;
        if k != k2 {
            return Err(dim_err("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_check("matmul_bt", a)?;
        let (n, k2) = self.matrix_check("matmul_bt", b)?;
        if k != k2 {
            return Err(dim_err("matmul_bt", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_bt_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b)))
    }

    fn zip(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.cols();
        if tb.len() != n {
            return Err(dim_err("add_row", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    /// Adds a constant tensor of the same shape (positions, mask biases).
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != c.shape() {
            return Err(dim_err("add_const", tx, c));
        }
        let data = tx.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddConst(x)))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Rc<Vec<f64>>) -> Result<Var> {
        let tx = self.value(x);
        if tx.len() != c.len() {
            return Err(Error::Dimension(format!(
                "mul_const: {} values vs mask of {}",
                tx.len(),
                c.len()
            )));
        }
        let data = tx.data().iter().zip(c.iter()).map(|(a, b)| a * b).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulConst(x, c)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.affine(x, factor, 0.0)
    }

    /// `factor * x + shift`.
    pub fn affine(&mut self, x: Var, factor: f64, shift: f64) -> Result<Var> {
        let out = self.value(x).map(|v| factor * v + shift);
        Ok(self.push(out, Op::Affine(x, factor)))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        Ok(self.push(out, Op::Relu(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        Ok(self.push(out, Op::Sigmoid(x)))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        Ok(self.push(out, Op::Tanh(x)))
    }

    /// Row-wise softmax with max subtraction. `-inf` entries get weight exactly 0.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows(self.value(x))?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// Per-row normalisation followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if d < 2 {
            return Err(Error::Dimension(format!(
                "layer_norm needs at least 2 features, got {d}"
            )));
        }
        if tg.len() != d || tb.len() != d {
            return Err(dim_err("layer_norm", tx, tg));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x)))
    }

    /// Column sums of an `[m×n]` matrix, as `[1×n]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.cols();
        let mut out = vec![0.0; n];
        for r in 0..tx.rows() {
            for (o, v) in out.iter_mut().zip(tx.row(r)) {
                *o += v;
            }
        }
        Ok(self.push(Tensor::new(vec![1, n], out)?, Op::SumRows(x)))
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = (t.rows(), t.cols());
        if ids.is_empty() {
            return Err(Error::Dimension("gather with no ids".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Vocabulary { id, vocab_size: v });
            }
            out.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Rows whose target is `None` are ignored.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        let (m, n) = (t.rows(), t.cols());
        if targets.len() != m {
            return Err(Error::Contract(format!(
                "{} logit rows for {} targets",
                m,
                targets.len()
            )));
        }
        let probs = softmax_rows(t)?.into_data();
        let mut nll = 0.0;
        for (r, tgt) in targets.iter().enumerate() {
            if let Some(id) = *tgt {
                if id >= n {
                    return Err(Error::Vocabulary { id, vocab_size: n });
                }
                nll -= log_softmax_at(t.row(r), id);
            }
        }
        Ok(self.push(
            Tensor::scalar(nll),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// `1 − a·b / (‖a‖‖b‖)` for two tensors of equal size.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(dim_err("cosine_distance", ta, tb));
        }
        let d = cosine_distance(ta.data(), tb.data())?;
        Ok(self.push(Tensor::scalar(d), Op::CosineDistance(a, b)))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let sizes: Vec<usize> = self.nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads, &sizes);
            grads[i] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        node: &Node<'a>,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        sizes: &[usize],
    ) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.wants(*a) {
                    acc(grads, sizes, *a, |ga| {
                        kernels::matmul_bt_acc(g, tb.data(), ga, m, n, k)
                    });
                }
                if self.wants(*b) {
                    acc(grads, sizes, *b, |gb| {
                        kernels::matmul_at_acc(ta.data(), g, gb, m, k, n)
                    });
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.wants(*a) {
                    acc(grads, sizes, *a, |ga| {
                        kernels::matmul_acc(g, tb.data(), ga, m, n, k)
                    });
                }
                if self.wants(*b) {
                    acc(grads, sizes, *b, |gb| {
                        kernels::matmul_at_acc(g, ta.data(), gb, m, n, k)
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        acc(grads, sizes, v, |gv| {
                            gv.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                        });
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(grads, sizes, *a, |gv| {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                    });
                }
                if self.wants(*b) {
                    acc(grads, sizes, *b, |gv| {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x -= y)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    acc(grads, sizes, *a, |gv| {
                        for ((x, y), w) in gv.iter_mut().zip(g).zip(tb.data()) {
                            *x += y * w;
                        }
                    });
                }
                if self.wants(*b) {
                    acc(grads, sizes, *b, |gv| {
                        for ((x, y), w) in gv.iter_mut().zip(g).zip(ta.data()) {
                            *x += y * w;
                        }
                    });
                }
            }
            Op::AddRow(x, bias) => {
                if self.wants(*x) {
                    acc(grads, sizes, *x, |gv| {
                        gv.iter_mut().zip(g).for_each(|(a, b)| *a += b)
                    });
                }
                if self.wants(*bias) {
                    let n = out.cols();
                    acc(grads, sizes, *bias, |gb| {
                        for row in g.chunks(n) {
                            gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                    });
                }
            }
            Op::AddConst(x) => {
                acc(grads, sizes, *x, |gv| {
                    gv.iter_mut().zip(g).for_each(|(a, b)| *a += b)
                });
            }
            Op::MulConst(x, c) => {
                acc(grads, sizes, *x, |gv| {
                    for ((a, b), m) in gv.iter_mut().zip(g).zip(c.iter()) {
                        *a += b * m;
                    }
                });
            }
            Op::Affine(x, factor) => {
                acc(grads, sizes, *x, |gv| {
                    gv.iter_mut().zip(g).for_each(|(a, b)| *a += factor * b)
                });
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                acc(grads, sizes, *x, |gv| {
                    for ((a, b), v) in gv.iter_mut().zip(g).zip(tx.data()) {
                        if *v > 0.0 {
                            *a += b;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                acc(grads, sizes, *x, |gv| {
                    for ((a, b), s) in gv.iter_mut().zip(g).zip(out.data()) {
                        *a += b * s * (1.0 - s);
                    }
                });
            }
            Op::Tanh(x) => {
                acc(grads, sizes, *x, |gv| {
                    for ((a, b), t) in gv.iter_mut().zip(g).zip(out.data()) {
                        *a += b * (1.0 - t * t);
                    }
                });
            }
            Op::Softmax(x) => {
                let n = out.cols();
                acc(grads, sizes, *x, |gv| {
                    for ((gx, gy), y) in gv.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n))
                    {
                        let dot: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[j] += y[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = out.cols();
                let tg = self.value(*gain);
                if self.wants(*gain) {
                    acc(grads, sizes, *gain, |gg| {
                        for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                gg[j] += gr[j] * hr[j];
                            }
                        }
                    });
                }
                if self.wants(*bias) {
                    acc(grads, sizes, *bias, |gb| {
                        for gr in g.chunks(d) {
                            gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                        }
                    });
                }
                if self.wants(*x) {
                    acc(grads, sizes, *x, |gx| {
                        let mut dh = vec![0.0; d];
                        for (r, ((gxr, gr), hr)) in gx
                            .chunks_mut(d)
                            .zip(g.chunks(d))
                            .zip(xhat.chunks(d))
                            .enumerate()
                        {
                            for j in 0..d {
                                dh[j] = gr[j] * tg.data()[j];
                            }
                            let sum_dh: f64 = dh.iter().sum();
                            let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                            let scale = rstd[r] / d as f64;
                            for j in 0..d {
                                gxr[j] += scale * (d as f64 * dh[j] - sum_dh - hr[j] * sum_dh_h);
                            }
                        }
                    });
                }
            }
            Op::Sum(x) => {
                acc(grads, sizes, *x, |gv| {
                    gv.iter_mut().for_each(|a| *a += g[0])
                });
            }
            Op::SumRows(x) => {
                let n = out.cols();
                acc(grads, sizes, *x, |gv| {
                    for row in gv.chunks_mut(n) {
                        row.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = out.cols();
                acc(grads, sizes, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = self.value(*logits).cols();
                acc(grads, sizes, *logits, |gl| {
                    for (r, tgt) in targets.iter().enumerate() {
                        if let Some(id) = *tgt {
                            let p = &probs[r * n..(r + 1) * n];
                            let row = &mut gl[r * n..(r + 1) * n];
                            for j in 0..n {
                                row[j] += g[0] * p[j];
                            }
                            row[id] -= g[0];
                        }
                    }
                });
            }
            Op::CosineDistance(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (da, db) = cosine_distance_grads(ta.data(), tb.data());
                if self.wants(*a) {
                    acc(grads, sizes, *a, |gv| {
                        gv.iter_mut().zip(&da).for_each(|(x, y)| *x += g[0] * y)
                    });
                }
                if self.wants(*b) {
                    acc(grads, sizes, *b, |gv| {
                        gv.iter_mut().zip(&db).for_each(|(x, y)| *x += g[0] * y)
                    });
                }
            }
        }
    }
}

/// Value-level row-wise softmax, shared with the tape and with inference code.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let n = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::Contract(
                "softmax over a row with no finite entry".into(),
            ));
        }
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn log_softmax_at(row: &[f64], id: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[id] - lse
}

/// Natural-log softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// `1 − a·b / (‖a‖‖b‖)`; zero-norm inputs are a contract error.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Contract(
            "cosine distance of a zero-norm vector".into(),
        ));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}

fn cosine_distance_grads(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let inv = 1.0 / (na * nb);
    let da = a
        .iter()
        .zip(b)
        .map(|(x, y)| -(y * inv - dot * x / (na * na * na * nb)))
        .collect();
    let db = a
        .iter()
        .zip(b)
        .map(|(x, y)| -(x * inv - dot * y / (nb * nb * nb * na)))
        .collect();
    (da, db)
}
