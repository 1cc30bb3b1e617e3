use std::collections::HashMap;

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Real, Tensor};
use super::TensorError;
use crate::params::ParamStore;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// A gradient rule whose sign is flipped on backward. Used to confirm that the
/// finite-difference check actually detects broken rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientFault {
    MatMul,
    Relu,
    Softmax,
    LayerNorm,
    Multiply,
}

impl std::str::FromStr for GradientFault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "matmul" => Ok(GradientFault::MatMul),
            "relu" => Ok(GradientFault::Relu),
            "softmax" => Ok(GradientFault::Softmax),
            "layer_norm" | "layernorm" => Ok(GradientFault::LayerNorm),
            "multiply" | "mul" => Ok(GradientFault::Multiply),
            _ => Err(format!("unknown gradient rule `{s}`; expected matmul, relu, softmax, layer_norm or multiply")),
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Binary(BinaryOp, Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Relu(Var),
    SoftmaxRows(Var),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    MaxElementwise {
        inputs: Vec<Var>,
        argmax: Vec<u32>,
    },
    SelectRow(Var, usize),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    CosineRows {
        a: Var,
        b: Var,
    },
    SumAll(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Tape of executed operations. Nodes are appended in execution order, so the
/// node list is always topologically sorted.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    bound: HashMap<String, Var>,
    track_params: bool,
    fault: Option<GradientFault>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A graph on which bound parameters require gradients.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
            track_params: true,
            fault: None,
        }
    }

    /// A graph that binds parameters as constants; nothing is recorded for backward.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
            track_params: false,
            fault: None,
        }
    }

    pub fn with_fault(mut self, fault: Option<GradientFault>) -> Self {
        self.fault = fault;
        self
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Adds a leaf. Its gradient is collected on backward iff `requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor<T>, requires_grad: bool) -> Var {
        t.requires_grad = requires_grad;
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// Binds a named parameter as a leaf, once per graph.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var, TensorError> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| TensorError::Argument(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.leaf(t, self.track_params);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound so far, with their nodes.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn param_grad(&self, name: &str) -> Option<&[T]> {
        self.bound.get(name).and_then(|&v| self.grad(v))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records `op` if any input requires a gradient, otherwise stores a constant.
    fn record(&mut self, mut value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        value.requires_grad = rg;
        if rg {
            self.push(value, op)
        } else {
            self.push(value, Op::Leaf)
        }
    }

    fn rank2(&self, v: Var, what: &str) -> Result<(usize, usize), TensorError> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::Dimension(format!(
                "{what} expects a rank-2 tensor, got {s:?}"
            ))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.rank2(a, "matmul")?;
        let (k2, n) = self.rank2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::Dimension(format!(
                "matmul of {:?} by {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.record(t, &[a, b], Op::MatMul(a, b)))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.rank2(a, "matmul_nt")?;
        let (n, k2) = self.rank2(b, "matmul_nt")?;
        if k != k2 {
            return Err(TensorError::Dimension(format!(
                "matmul_nt of {:?} by transpose of {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.record(t, &[a, b], Op::MatMulNT(a, b)))
    }

    pub fn elementwise(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Dimension(format!(
                "{op:?} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let out: Vec<T> = match op {
            BinaryOp::Add => x.iter().zip(y).map(|(&p, &q)| p + q).collect(),
            BinaryOp::Sub => x.iter().zip(y).map(|(&p, &q)| p - q).collect(),
            BinaryOp::Mul => x.iter().zip(y).map(|(&p, &q)| p * q).collect(),
        };
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.record(t, &[a, b], Op::Binary(op, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(BinaryOp::Mul, a, b)
    }

    /// Adds a bias of length `cols` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let cols = self.value(x).cols();
        if self.value(bias).numel() != cols {
            return Err(TensorError::Dimension(format!(
                "bias {:?} does not fit rows of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias).data();
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &w)| v + w))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.record(t, &[x, bias], Op::AddBias(x, bias)))
    }

    /// `x W + b`
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var, TensorError> {
        let out = self.value(x).data().iter().map(|&v| v * c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.record(t, &[x], Op::Scale(x, c)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.record(t, &[x], Op::Relu(x)))
    }

    /// Row-wise softmax over the last dimension, shifted by the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let xt = self.value(x);
        let cols = xt.cols();
        let mut out = Vec::with_capacity(xt.numel());
        for row in xt.data().chunks(cols) {
            out.extend(softmax_slice(row));
        }
        let t = Tensor::new(xt.shape().to_vec(), out)?;
        Ok(self.record(t, &[x], Op::SoftmaxRows(x)))
    }

    /// Concatenation along the last dimension.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = *xs
            .first()
            .ok_or_else(|| TensorError::Argument("concat_last of an empty list".into()))?;
        if xs.len() == 1 {
            return Ok(first);
        }
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        let outer: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != lead.len() + 1 || &s[..s.len() - 1] != lead {
                return Err(TensorError::Dimension(format!(
                    "concat_last of {:?} and {:?}",
                    self.shape(first),
                    s
                )));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for r in 0..outer {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let t = Tensor::new(shape, out)?;
        Ok(self.record(t, xs, Op::ConcatLast(xs.to_vec())))
    }

    /// Stacks rank-2 tensors along the first dimension.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = *xs
            .first()
            .ok_or_else(|| TensorError::Argument("concat_rows of an empty list".into()))?;
        let (_, cols) = self.rank2(first, "concat_rows")?;
        let mut rows = 0;
        for &v in xs {
            let (r, c) = self.rank2(v, "concat_rows")?;
            if c != cols {
                return Err(TensorError::Dimension(format!(
                    "concat_rows of {:?} and {:?}",
                    self.shape(first),
                    self.shape(v)
                )));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &v in xs {
            out.extend_from_slice(self.value(v).data());
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        Ok(self.record(t, xs, Op::ConcatRows(xs.to_vec())))
    }

    /// Coordinatewise maximum over a list of same-shape tensors. The gradient of each
    /// coordinate flows to the first input attaining the maximum.
    pub fn max_elementwise(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = *xs
            .first()
            .ok_or_else(|| TensorError::Argument("max_elementwise of an empty list".into()))?;
        let shape = self.shape(first).to_vec();
        for &v in xs {
            if self.shape(v) != shape.as_slice() {
                return Err(TensorError::Dimension(format!(
                    "max_elementwise of {:?} and {:?}",
                    shape,
                    self.shape(v)
                )));
            }
        }
        let mut out = self.value(first).data().to_vec();
        let mut argmax = vec![0u32; out.len()];
        for (idx, &v) in xs.iter().enumerate().skip(1) {
            for (j, &val) in self.value(v).data().iter().enumerate() {
                if val > out[j] {
                    out[j] = val;
                    argmax[j] = idx as u32;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.record(
            t,
            xs,
            Op::MaxElementwise {
                inputs: xs.to_vec(),
                argmax,
            },
        ))
    }

    /// Row `r` of a rank-2 tensor as a `[1, cols]` tensor.
    pub fn select_row(&mut self, x: Var, r: usize) -> Result<Var, TensorError> {
        let (rows, _) = self.rank2(x, "select_row")?;
        if r >= rows {
            return Err(TensorError::Argument(format!(
                "row {r} of a {rows}-row tensor"
            )));
        }
        let t = Tensor::row_vector(self.value(x).row(r).to_vec())?;
        Ok(self.record(t, &[x], Op::SelectRow(x, r)))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (rows, cols) = self.rank2(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(TensorError::Argument("gather_rows with no ids".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Argument(format!(
                    "row id {id} out of range {rows}"
                )));
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let t = Tensor::new(vec![ids.len(), cols], out)?;
        Ok(self.record(
            t,
            &[table],
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Row-wise layer normalization `gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<Var, TensorError> {
        let cols = self.value(x).cols();
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(TensorError::Dimension(format!(
                "layer_norm of {:?} with gamma {:?} and beta {:?}",
                self.shape(x),
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let n = T::of(cols as f64);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = self.value(x).numel() / cols;
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for row in self.value(x).data().chunks(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.record(
            t,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Row-wise cosine similarity of two same-shape rank-2 tensors, giving `[rows, 1]`.
    /// Rows where either side has zero norm produce 0 with zero gradient; the second
    /// return value reports whether that happened.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<(Var, bool), TensorError> {
        let (rows, cols) = self.rank2(a, "cosine_rows")?;
        if self.shape(b) != [rows, cols] {
            return Err(TensorError::Dimension(format!(
                "cosine of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = Vec::with_capacity(rows);
        let mut degenerate = false;
        for r in 0..rows {
            let (x, y) = (self.value(a).row(r), self.value(b).row(r));
            let (dot, nx, ny) = cosine_parts(x, y);
            if nx == T::zero() || ny == T::zero() {
                degenerate = true;
                out.push(T::zero());
            } else {
                out.push(dot / (nx * ny));
            }
        }
        let t = Tensor::new(vec![rows, 1], out)?;
        Ok((self.record(t, &[a, b], Op::CosineRows { a, b }), degenerate))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().copied().sum();
        Ok(self.record(Tensor::scalar(s), &[x], Op::SumAll(x)))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
    ) -> Result<Var, TensorError> {
        let (rows, classes) = self.rank2(logits, "softmax_cross_entropy")?;
        if labels.len() != rows {
            return Err(TensorError::Dimension(format!(
                "{} labels for {rows} rows of logits",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::Input(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = Vec::with_capacity(rows * classes);
        let mut total = T::zero();
        for (row, &label) in self.value(logits).data().chunks(classes).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[label];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = total / T::of(rows as f64);
        if !loss.is_finite() {
            return Err(TensorError::Numeric(format!(
                "non-finite cross-entropy {loss}"
            )));
        }
        Ok(self.record(
            Tensor::scalar(loss),
            &[logits],
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar. Gradients accumulate over every use of a node and
    /// are stored on each node that requires them; nodes the loss does not depend on
    /// keep `None`.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Argument(format!(
                "backward from a non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        if !self.nodes[loss.0].value.requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if self.fault.is_some() && self.fault == fault_kind(&node.op) {
                let flipped: Vec<T> = gout.iter().map(|&v| -v).collect();
                self.propagate(node, &flipped, &mut grads);
            } else {
                self.propagate(node, &gout, &mut grads);
            }
            grads[idx] = Some(gout);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad {
                node.value.grad = g;
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].value.requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                if wants(*a) {
                    gemm_nt(gout, val(*b).data(), slot(grads, *a, m * k), m, n, k);
                }
                if wants(*b) {
                    gemm_tn(val(*a).data(), gout, slot(grads, *b, k * n), m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).rows();
                if wants(*a) {
                    gemm_nn(gout, val(*b).data(), slot(grads, *a, m * k), m, n, k);
                }
                if wants(*b) {
                    gemm_tn(gout, val(*a).data(), slot(grads, *b, n * k), m, n, k);
                }
            }
            Op::Binary(op, a, b) => {
                let n = gout.len();
                match op {
                    BinaryOp::Add | BinaryOp::Sub => {
                        if wants(*a) {
                            axpy(slot(grads, *a, n), gout, T::one());
                        }
                        if wants(*b) {
                            let s = if *op == BinaryOp::Add {
                                T::one()
                            } else {
                                -T::one()
                            };
                            axpy(slot(grads, *b, n), gout, s);
                        }
                    }
                    BinaryOp::Mul => {
                        if wants(*a) {
                            let g = slot(grads, *a, n);
                            for ((gi, &go), &y) in g.iter_mut().zip(gout).zip(val(*b).data()) {
                                *gi += go * y;
                            }
                        }
                        if wants(*b) {
                            let g = slot(grads, *b, n);
                            for ((gi, &go), &x) in g.iter_mut().zip(gout).zip(val(*a).data()) {
                                *gi += go * x;
                            }
                        }
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if wants(*x) {
                    axpy(slot(grads, *x, gout.len()), gout, T::one());
                }
                if wants(*bias) {
                    let cols = val(*bias).numel();
                    let g = slot(grads, *bias, cols);
                    for row in gout.chunks(cols) {
                        axpy(g, row, T::one());
                    }
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    axpy(slot(grads, *x, gout.len()), gout, *c);
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let g = slot(grads, *x, gout.len());
                    for ((gi, &go), &xi) in g.iter_mut().zip(gout).zip(val(*x).data()) {
                        if xi > T::zero() {
                            *gi += go;
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if wants(*x) {
                    let y = node.value.data();
                    let cols = node.value.cols();
                    let g = slot(grads, *x, gout.len());
                    for ((gr, gor), yr) in g
                        .chunks_mut(cols)
                        .zip(gout.chunks(cols))
                        .zip(y.chunks(cols))
                    {
                        let dot: T = gor.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((gi, &go), &yi) in gr.iter_mut().zip(gor).zip(yr) {
                            *gi += yi * (go - dot);
                        }
                    }
                }
            }
            Op::ConcatLast(xs) => {
                let total = node.value.cols();
                let outer = node.value.numel() / total;
                let mut offset = 0;
                for &v in xs {
                    let w = val(v).cols();
                    if wants(v) {
                        let g = slot(grads, v, outer * w);
                        for r in 0..outer {
                            axpy(
                                &mut g[r * w..(r + 1) * w],
                                &gout[r * total + offset..r * total + offset + w],
                                T::one(),
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &v in xs {
                    let n = val(v).numel();
                    if wants(v) {
                        axpy(slot(grads, v, n), &gout[offset..offset + n], T::one());
                    }
                    offset += n;
                }
            }
            Op::MaxElementwise { inputs, argmax } => {
                for (j, (&go, &src)) in gout.iter().zip(argmax).enumerate() {
                    let v = inputs[src as usize];
                    if wants(v) {
                        slot(grads, v, gout.len())[j] += go;
                    }
                }
            }
            Op::SelectRow(x, r) => {
                if wants(*x) {
                    let cols = val(*x).cols();
                    let g = slot(grads, *x, val(*x).numel());
                    axpy(&mut g[r * cols..(r + 1) * cols], gout, T::one());
                }
            }
            Op::Gather { table, ids } => {
                if wants(*table) {
                    let cols = val(*table).cols();
                    let g = slot(grads, *table, val(*table).numel());
                    for (i, &id) in ids.iter().enumerate() {
                        axpy(
                            &mut g[id * cols..(id + 1) * cols],
                            &gout[i * cols..(i + 1) * cols],
                            T::one(),
                        );
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = val(*gamma).numel();
                if wants(*gamma) {
                    let g = slot(grads, *gamma, cols);
                    for (gor, hr) in gout.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((gi, &go), &h) in g.iter_mut().zip(gor).zip(hr) {
                            *gi += go * h;
                        }
                    }
                }
                if wants(*beta) {
                    let g = slot(grads, *beta, cols);
                    for gor in gout.chunks(cols) {
                        axpy(g, gor, T::one());
                    }
                }
                if wants(*x) {
                    let gamma_v = val(*gamma).data();
                    let n = T::of(cols as f64);
                    let g = slot(grads, *x, gout.len());
                    for (r, ((gr, gor), hr)) in g
                        .chunks_mut(cols)
                        .zip(gout.chunks(cols))
                        .zip(xhat.chunks(cols))
                        .enumerate()
                    {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for ((&go, &gm), &h) in gor.iter().zip(gamma_v).zip(hr) {
                            let d = go * gm;
                            mean_d += d;
                            mean_dh += d * h;
                        }
                        mean_d = mean_d / n;
                        mean_dh = mean_dh / n;
                        for (((gi, &go), &gm), &h) in gr.iter_mut().zip(gor).zip(gamma_v).zip(hr) {
                            *gi += inv_std[r] * (go * gm - mean_d - h * mean_dh);
                        }
                    }
                }
            }
            Op::CosineRows { a, b } => {
                let cols = val(*a).cols();
                let rows = val(*a).rows();
                #[allow(clippy::needless_range_loop)]
                for r in 0..rows {
                    let (x, y) = (val(*a).row(r), val(*b).row(r));
                    let (dot, nx, ny) = cosine_parts(x, y);
                    if nx == T::zero() || ny == T::zero() {
                        continue;
                    }
                    let c = dot / (nx * ny);
                    let go = gout[r];
                    if wants(*a) {
                        let g = &mut slot(grads, *a, rows * cols)[r * cols..(r + 1) * cols];
                        for ((gi, &xi), &yi) in g.iter_mut().zip(x).zip(y) {
                            *gi += go * (yi / (nx * ny) - c * xi / (nx * nx));
                        }
                    }
                    if wants(*b) {
                        let g = &mut slot(grads, *b, rows * cols)[r * cols..(r + 1) * cols];
                        for ((gi, &xi), &yi) in g.iter_mut().zip(x).zip(y) {
                            *gi += go * (xi / (nx * ny) - c * yi / (ny * ny));
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if wants(*x) {
                    let g = slot(grads, *x, val(*x).numel());
                    for gi in g.iter_mut() {
                        *gi += gout[0];
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if wants(*logits) {
                    let classes = val(*logits).cols();
                    let scale = gout[0] / T::of(labels.len() as f64);
                    let g = slot(grads, *logits, probs.len());
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let target = if c == label { T::one() } else { T::zero() };
                            g[r * classes + c] += scale * (probs[r * classes + c] - target);
                        }
                    }
                }
            }
        }
    }
}

fn fault_kind<T>(op: &Op<T>) -> Option<GradientFault> {
    match op {
        Op::MatMul(..) | Op::MatMulNT(..) => Some(GradientFault::MatMul),
        Op::Relu(_) => Some(GradientFault::Relu),
        Op::SoftmaxRows(_) => Some(GradientFault::Softmax),
        Op::LayerNorm { .. } => Some(GradientFault::LayerNorm),
        Op::Binary(BinaryOp::Mul, ..) => Some(GradientFault::Multiply),
        _ => None,
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

fn axpy<T: Real>(y: &mut [T], x: &[T], a: T) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn cosine_parts<T: Real>(x: &[T], y: &[T]) -> (T, T, T) {
    let mut dot = T::zero();
    let mut xx = T::zero();
    let mut yy = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        dot += a * b;
        xx += a * a;
        yy += b * b;
    }
    (dot, xx.sqrt(), yy.sqrt())
}

pub(crate) fn softmax_slice<T: Real>(row: &[T]) -> impl Iterator<Item = T> + '_ {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    row.iter().map(move |&v| (v - max).exp() / sum)
}
