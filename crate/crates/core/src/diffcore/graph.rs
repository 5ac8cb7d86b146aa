//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Leaves
//! are either trainable (`param`) or constant (`constant`); only nodes that
//! depend on a trainable leaf keep their backward information, so gradient
//! buffers for frozen tensors are never allocated.

use std::sync::Arc;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, S),
    Exp(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<S> },
    L2NormalizeRows { x: Var, norms: Vec<S> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceBlock { x: Var, row0: usize, col0: usize },
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Pick { x: Var, picks: Vec<(usize, S)> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<S> },
    MeanSquared(Var, Var),
    Cosine(Var, Var),
    Reparam { mu: Var, log_sigma: Var, eps: Tensor<S> },
    ScaleGrad(Var, S),
}

#[derive(Debug)]
struct Node<S> {
    value: Arc<Tensor<S>>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients produced by one call to [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the differentiated output with respect to `var`, or `None`
    /// when `var` does not depend on any trainable leaf.
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

fn dims2<S: Scalar>(t: &Tensor<S>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value: Arc::new(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Trainable leaf sharing storage with the caller.
    pub fn param_shared(&mut self, value: Arc<Tensor<S>>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor<S>>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Constant copy of `x`'s current value, cut from the tape.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = Arc::clone(&self.nodes[x.0].value);
        self.constant_shared(value)
    }

    pub fn value(&self, x: Var) -> &Tensor<S> {
        &self.nodes[x.0].value
    }

    pub fn shared_value(&self, x: Var) -> Arc<Tensor<S>> {
        Arc::clone(&self.nodes[x.0].value)
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].needs_grad
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    // ---- linear algebra ----

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (dims2(av), dims2(bv));
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] · [{k2}x{n}]")));
        }
        let mut out = vec![S::zero(); m * n];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aik = ad[i * k + p];
                if aik == S::zero() {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += aik * b;
                }
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `[m×k] · [n×k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, k), (n, k2)) = (dims2(av), dims2(bv));
        if k != k2 {
            return Err(shape_err("matmul_t", format!("[{m}x{k}] · [{n}x{k2}]ᵀ")));
        }
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let arow = av.row(i);
            for j in 0..n {
                out[i * n + j] = dot(arow, bv.row(j));
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMulT(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = dims2(xv);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv.data()[i * n + j];
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new([n, m], out)?, Op::Transpose(x), ng))
    }

    // ---- elementwise ----

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op<S>, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.zip_with(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    fn row_broadcast(&mut self, name: &str, x: Var, r: Var, mul: bool) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(r));
        let (m, n) = dims2(xv);
        if rv.len() != n {
            return Err(shape_err(name, format!("row of {} against [{m}x{n}]", rv.len())));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, &b) in row.iter_mut().zip(rv.data()) {
                if mul {
                    *v *= b;
                } else {
                    *v += b;
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.ng(&[x, r]);
        let op = if mul { Op::MulRow(x, r) } else { Op::AddRow(x, r) };
        Ok(self.push(t, op, ng))
    }

    /// Adds a length-`n` vector to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, row, false)
    }

    /// Multiplies every row of an `[m×n]` matrix by a length-`n` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, row, true)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = S::of(factor);
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * f).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(t, Op::Scale(x, f), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.exp()).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(t, Op::Exp(x), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu_fwd(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(t, Op::Gelu(x), ng)
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// `factor` in the backward pass (−1 gives a gradient-reversal layer).
    pub fn scale_grad(&mut self, x: Var, factor: f64) -> Var {
        let value = self.shared_value(x);
        let ng = self.ng(&[x]);
        let op = if ng { Op::ScaleGrad(x, S::of(factor)) } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad: ng });
        Var(self.nodes.len() - 1)
    }

    // ---- row-wise normalizations ----

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (_, n) = dims2(xv);
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(t, Op::SoftmaxRows(x), ng)
    }

    /// Row-wise log-softmax. Entries equal to `-inf` are treated as masked out.
    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (_, n) = dims2(xv);
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(t, Op::LogSoftmaxRows(x), ng)
    }

    /// Zero-mean unit-variance rows, without affine parameters.
    pub fn layer_norm_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (_, n) = dims2(xv);
        let nf = S::of(n as f64);
        let mut data = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for row in data.chunks_exact_mut(n) {
            let mean = row.iter().copied().sum::<S>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
            let inv = S::one() / (var + S::of(LAYER_NORM_EPS)).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(t, Op::LayerNormRows { x, inv_std }, ng)
    }

    /// Scales each row to unit Euclidean norm. Zero rows are an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (_, n) = dims2(xv);
        let mut data = xv.data().to_vec();
        let mut norms = Vec::with_capacity(xv.rows());
        for (r, row) in data.chunks_exact_mut(n).enumerate() {
            let norm = dot(row, row).sqrt();
            if norm <= S::zero() || !norm.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "row {r} has zero or non-finite norm; representation is degenerate"
                )));
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::L2NormalizeRows { x, norms }, ng))
    }

    // ---- structural ----

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", "no inputs".into()));
        }
        let n = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != n {
                return Err(shape_err("concat_rows", format!("width {} vs {n}", v.cols())));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::new([rows, n], data)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no inputs".into()));
        }
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        if let Some(p) = parts.iter().find(|&&p| self.value(p).rows() != m) {
            return Err(shape_err(
                "concat_cols",
                format!("height {} vs {m}", self.value(*p).rows()),
            ));
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::new([m, n], data)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Sub-matrix `rows × cols` starting at `(row0, col0)`.
    pub fn slice_block(
        &mut self,
        x: Var,
        row0: usize,
        col0: usize,
        rows: usize,
        cols: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = dims2(xv);
        if row0 + rows > m || col0 + cols > n {
            return Err(shape_err(
                "slice_block",
                format!("[{row0}+{rows}, {col0}+{cols}] outside [{m}x{n}]"),
            ));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in row0..row0 + rows {
            data.extend_from_slice(&xv.row(r)[col0..col0 + cols]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new([rows, cols], data)?, Op::SliceBlock { x, row0, col0 }, ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.value(x).cols();
        self.slice_block(x, start, 0, len, n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = (*self.value(x)).clone().reshape(shape.to_vec())?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<S>() / S::of(xv.len() as f64);
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Weighted sum of selected flat elements: `Σ w·x[i]`.
    pub fn pick(&mut self, x: Var, picks: &[(usize, f64)]) -> Result<Var> {
        let xv = self.value(x);
        let mut s = S::zero();
        let mut stored = Vec::with_capacity(picks.len());
        for &(i, w) in picks {
            let v = *xv.data().get(i).ok_or_else(|| {
                shape_err("pick", format!("index {i} outside {} elements", xv.len()))
            })?;
            let w = S::of(w);
            s += w * v;
            stored.push((i, w));
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Pick { x, picks: stored }, ng))
    }

    // ---- losses ----

    /// Mean over rows of `−log softmax(logits_r)[label_r]`, using the
    /// log-sum-exp form. A 1-D `logits` is a single row.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (m, c) = dims2(lv);
        if labels.len() != m {
            return Err(shape_err("cross_entropy", format!("{} labels for {m} rows", labels.len())));
        }
        if !lv.all_finite() {
            return Err(Error::NonFinite("cross_entropy logits".into()));
        }
        let mut probs = lv.data().to_vec();
        let mut total = S::zero();
        for (r, (row, &label)) in probs.chunks_exact_mut(c).zip(labels).enumerate() {
            if label >= c {
                return Err(Error::InvalidArgument(format!(
                    "label {label} of row {r} out of range for {c} classes"
                )));
            }
            let lse = log_sum_exp(row);
            total += lse - row[label];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = total / S::of(m as f64);
        let ng = self.ng(&[logits]);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss), op, ng))
    }

    /// Mean of `(a − b)²` over all elements.
    pub fn mean_squared(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mean_squared", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let s = av.sq_dist(bv) / S::of(av.len() as f64);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::MeanSquared(a, b), ng))
    }

    /// `a·b / (‖a‖‖b‖)`; a zero-norm argument is an error.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(shape_err(
                "cosine_similarity",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let (na, nb) = (dot(av, av).sqrt(), dot(bv, bv).sqrt());
        if na <= S::zero() || nb <= S::zero() {
            return Err(Error::InvalidArgument(
                "cosine similarity of a zero-norm vector; representation is degenerate".into(),
            ));
        }
        let c = dot(av, bv) / (na * nb);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::scalar(c), Op::Cosine(a, b), ng))
    }

    /// `mu + exp(log_sigma) ⊙ eps`. `eps` is a plain tensor, so no gradient
    /// can ever be produced for it.
    pub fn gaussian_reparam_sample(&mut self, mu: Var, log_sigma: Var, eps: Tensor<S>) -> Result<Var> {
        self.same_shape("gaussian_reparam_sample", mu, log_sigma)?;
        let (mv, lv) = (self.value(mu), self.value(log_sigma));
        if eps.shape() != mv.shape() {
            return Err(shape_err(
                "gaussian_reparam_sample",
                format!("eps {:?} vs mu {:?}", eps.shape(), mv.shape()),
            ));
        }
        let data = mv
            .data()
            .iter()
            .zip(lv.data())
            .zip(eps.data())
            .map(|((&m, &l), &e)| m + l.exp() * e)
            .collect();
        let t = Tensor::new(mv.shape().to_vec(), data)?;
        let ng = self.ng(&[mu, log_sigma]);
        Ok(self.push(t, Op::Reparam { mu, log_sigma, eps }, ng))
    }

    // ---- backward ----

    /// Gradients of a scalar `output` with respect to every node that depends
    /// on a trainable leaf.
    pub fn backward(&self, output: Var) -> Result<Gradients<S>> {
        let v = self.value(output);
        if v.len() != 1 {
            return Err(shape_err("backward", format!("output {:?} is not scalar", v.shape())));
        }
        self.backward_with(output, Tensor::new(v.shape().to_vec(), vec![S::one()])?)
    }

    /// Vector-Jacobian product seeded with `seed` at `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor<S>) -> Result<Gradients<S>> {
        if seed.shape() != self.value(output).shape() {
            return Err(shape_err("backward_with", "seed shape differs from output".into()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.backprop_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor<S>>], var: Var) -> Option<&'g mut [S]> {
        if !self.nodes[var.0].needs_grad {
            return None;
        }
        let slot = &mut grads[var.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[var.0].value.shape().to_vec()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn backprop_node(&self, node: &Node<S>, gout: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let g = gout.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ((m, k), (_, n)) = (dims2(av), dims2(bv));
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            da[i * k + p] += dot(grow, bv.row(p));
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av.data()[i * k + p];
                            if aip == S::zero() {
                                continue;
                            }
                            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += aip * gv;
                            }
                        }
                    }
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ((m, k), (n, _)) = (dims2(av), dims2(bv));
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..m {
                        let drow = &mut da[i * k..(i + 1) * k];
                        for j in 0..n {
                            axpy(drow, g[i * n + j], bv.row(j));
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for i in 0..m {
                        let arow = av.row(i);
                        for j in 0..n {
                            axpy(&mut db[j * k..(j + 1) * k], g[i * n + j], arow);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.acc(grads, *a) {
                    axpy(da, S::one(), g);
                }
                if let Some(db) = self.acc(grads, *b) {
                    axpy(db, S::one(), g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.acc(grads, *a) {
                    axpy(da, S::one(), g);
                }
                if let Some(db) = self.acc(grads, *b) {
                    axpy(db, -S::one(), g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, &gv), &bb) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * bb;
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for ((d, &gv), &aa) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * aa;
                    }
                }
            }
            Op::AddRow(x, r) => {
                let n = self.value(*r).len();
                if let Some(dx) = self.acc(grads, *x) {
                    axpy(dx, S::one(), g);
                }
                if let Some(dr) = self.acc(grads, *r) {
                    for grow in g.chunks_exact(n) {
                        axpy(dr, S::one(), grow);
                    }
                }
            }
            Op::MulRow(x, r) => {
                let (xv, rv) = (self.value(*x).data(), self.value(*r).data());
                let n = rv.len();
                if let Some(dx) = self.acc(grads, *x) {
                    for (drow, grow) in dx.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                        for ((d, &gv), &rr) in drow.iter_mut().zip(grow).zip(rv) {
                            *d += gv * rr;
                        }
                    }
                }
                if let Some(dr) = self.acc(grads, *r) {
                    for (xrow, grow) in xv.chunks_exact(n).zip(g.chunks_exact(n)) {
                        for ((d, &gv), &xx) in dr.iter_mut().zip(grow).zip(xrow) {
                            *d += gv * xx;
                        }
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(dx) = self.acc(grads, *x) {
                    axpy(dx, *f, g);
                }
            }
            Op::ScaleGrad(x, f) => {
                if let Some(dx) = self.acc(grads, *x) {
                    axpy(dx, *f, g);
                }
            }
            Op::Exp(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * yv;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, &gv), &xx) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gv * gelu_grad(xx);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let n = node.value.cols();
                if let Some(dx) = self.acc(grads, *x) {
                    for ((drow, grow), yrow) in
                        dx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n))
                    {
                        let s = dot(grow, yrow);
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - s);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(x) => {
                let n = node.value.cols();
                if let Some(dx) = self.acc(grads, *x) {
                    for ((drow, grow), yrow) in
                        dx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n))
                    {
                        let gsum: S = grow.iter().copied().sum();
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += gv - yv.exp() * gsum;
                        }
                    }
                }
            }
            Op::LayerNormRows { x, inv_std } => {
                let n = node.value.cols();
                let nf = S::of(n as f64);
                if let Some(dx) = self.acc(grads, *x) {
                    for (((drow, grow), yrow), &inv) in dx
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(y.chunks_exact(n))
                        .zip(inv_std)
                    {
                        let gsum: S = grow.iter().copied().sum();
                        let gy = dot(grow, yrow);
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += inv / nf * (nf * gv - gsum - yv * gy);
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let n = node.value.cols();
                if let Some(dx) = self.acc(grads, *x) {
                    for (((drow, grow), yrow), &norm) in dx
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(y.chunks_exact(n))
                        .zip(norms)
                    {
                        let gy = dot(grow, yrow);
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += (gv - yv * gy) / norm;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(dp) = self.acc(grads, p) {
                        axpy(dp, S::one(), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(dp) = self.acc(grads, p) {
                        for (r, drow) in dp.chunks_exact_mut(w).enumerate() {
                            axpy(drow, S::one(), &g[r * n + col..r * n + col + w]);
                        }
                    }
                    col += w;
                }
            }
            Op::SliceBlock { x, row0, col0 } => {
                let (rows, cols) = dims2(&node.value);
                let n = self.value(*x).cols();
                if let Some(dx) = self.acc(grads, *x) {
                    for r in 0..rows {
                        let start = (row0 + r) * n + col0;
                        axpy(&mut dx[start..start + cols], S::one(), &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::Transpose(x) => {
                let (m, n) = dims2(self.value(*x));
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    axpy(dx, S::one(), g);
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                let n = S::of(self.value(*x).len() as f64);
                if let Some(dx) = self.acc(grads, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0] / n;
                    }
                }
            }
            Op::Pick { x, picks } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for &(i, w) in picks {
                        dx[i] += w * g[0];
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.value(*logits).cols();
                let scale = g[0] / S::of(labels.len() as f64);
                if let Some(dx) = self.acc(grads, *logits) {
                    for (r, (drow, prow)) in
                        dx.chunks_exact_mut(c).zip(probs.chunks_exact(c)).enumerate()
                    {
                        for (d, &p) in drow.iter_mut().zip(prow) {
                            *d += scale * p;
                        }
                        drow[labels[r]] -= scale;
                    }
                }
            }
            Op::MeanSquared(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let f = S::of(2.0) * g[0] / S::of(av.len() as f64);
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, &x), &z) in da.iter_mut().zip(av).zip(bv) {
                        *d += f * (x - z);
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for ((d, &x), &z) in db.iter_mut().zip(av).zip(bv) {
                        *d -= f * (x - z);
                    }
                }
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (na, nb) = (dot(av, av).sqrt(), dot(bv, bv).sqrt());
                let c = y[0];
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, &x), &z) in da.iter_mut().zip(av).zip(bv) {
                        *d += g[0] * (z / (na * nb) - c * x / (na * na));
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for ((d, &x), &z) in db.iter_mut().zip(av).zip(bv) {
                        *d += g[0] * (x / (na * nb) - c * z / (nb * nb));
                    }
                }
            }
            Op::Reparam { mu, log_sigma, eps } => {
                let lv = self.value(*log_sigma).data();
                if let Some(dm) = self.acc(grads, *mu) {
                    axpy(dm, S::one(), g);
                }
                if let Some(dl) = self.acc(grads, *log_sigma) {
                    for (((d, &gv), &l), &e) in dl.iter_mut().zip(g).zip(lv).zip(eps.data()) {
                        *d += gv * l.exp() * e;
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut s = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy<S: Scalar>(y: &mut [S], a: S, x: &[S]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

pub(crate) fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() {
        return max;
    }
    let s: S = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut s = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let inner = S::of(GELU_C) * (x + S::of(GELU_A) * x * x * x);
    half * x * (S::one() + inner.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let inner = S::of(GELU_C) * (x + S::of(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = S::of(GELU_C) * (S::one() + S::of(3.0 * GELU_A) * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * dinner
}
