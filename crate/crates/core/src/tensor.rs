//! Dense double-precision tensors and a tape-based reverse-mode
//! differentiation graph.
//!
//! [`Tensor`] is a plain value container (shape, values, optional
//! accumulated gradient). Differentiable computation happens on a
//! [`Graph`]: tensors enter as leaves, every operation appends a node that
//! remembers its inputs, and [`Graph::backward`] walks the nodes once in
//! reverse insertion order. Nodes whose inputs never require a gradient are
//! skipped during the backward sweep, so evaluating a network with frozen
//! parameters only pays for the input gradient.
//!
//! ```
//! use mebm::tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(&Tensor::from_slice(&[3.0]).with_requires_grad(true));
//! let sq = g.mul(x, x).unwrap();
//! let root = g.sum(sq);
//! g.backward(root).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[6.0]);
//! ```

use crate::error::{Error, Result};

/// Dense row-major array of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::shape("tensor", &shape, &[values.len()]));
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// One-dimensional tensor copied from a slice.
    pub fn from_slice(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len()],
            values: values.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Two-dimensional tensor from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::shape("from_rows", &[cols], &[row.len()]));
            }
            values.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], values)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the accumulated gradient, creating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.values.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[delta.len()]));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    /// Number of rows of a matrix (the leading extent).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Row width of a matrix (product of the trailing extents).
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.values[i * c..(i + 1) * c]
    }

    /// Gathers the listed rows of a matrix into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let c = self.cols();
        let mut values = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![indices.len(), c],
            values,
            requires_grad: false,
            grad: None,
        }
    }

    /// Single value of a scalar or one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.values.len() == 1).then(|| self.values[0])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    LeakyRelu { x: Var, slope: f64 },
    LogSumExp { x: Var, softmax: Vec<f64> },
    SoftmaxXent { logits: Var, labels: Vec<usize>, softmax: Vec<f64> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of operations; the computation graph for one
/// forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// Drops every recorded node and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor as a leaf, inheriting its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.values.clone(), t.requires_grad, Op::Leaf)
    }

    /// Records a copy of `t` as a leaf with an explicit `requires_grad` flag.
    pub fn leaf_with(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(t.shape.clone(), t.values.clone(), requires_grad, Op::Leaf)
    }

    /// Records a leaf with an explicit `requires_grad` flag, taking ownership
    /// of the values.
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t.shape, t.values, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            values: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Gradient of the last `backward` root with respect to `v`, if `v`
    /// was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Affine map `x·W + b` for `x: [B, D_in]`, `W: [D_in, D_out]`,
    /// `b: [D_out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape("affine", &xs, &ws));
        }
        if bs != [ws[1]] {
            return Err(Error::shape("affine", &ws, &bs));
        }
        let (rows, d_in, d_out) = (xs[0], xs[1], ws[1]);
        let bias = self.value(b);
        let mut out = Vec::with_capacity(rows * d_out);
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        gemm(rows, d_in, d_out, self.value(x), false, self.value(w), false, &mut out, 1.0);
        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        Ok(self.push(vec![rows, d_out], out, rg, Op::Affine { x, w, b }))
    }

    /// Elementwise `max(x, slope·x)`; the kink takes the positive branch.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::InvalidArgument(format!(
                "leaky_relu slope must lie in [0, 1), got {slope}"
            )));
        }
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(shape, out, rg, Op::LeakyRelu { x, slope }))
    }

    /// Row-wise log-sum-exp of `[B, C]` logits, giving `[B]`.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[1] == 0 {
            return Err(Error::shape("logsumexp", &shape, &[]));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let mut out = Vec::with_capacity(rows);
        let mut softmax = vec![0.0; rows * cols];
        for (i, row) in self.value(x).chunks_exact(cols).enumerate() {
            let (lse, probs) = stable_softmax(row);
            out.push(lse);
            softmax[i * cols..(i + 1) * cols].copy_from_slice(&probs);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(vec![rows], out, rg, Op::LogSumExp { x, softmax }))
    }

    /// Batch-mean softmax cross-entropy of `[B, C]` logits against integer
    /// labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[1] == 0 {
            return Err(Error::shape("softmax_cross_entropy", &shape, &[labels.len()]));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= cols) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {cols} classes"
            )));
        }
        let mut total = 0.0;
        let mut softmax = vec![0.0; rows * cols];
        for (i, row) in self.value(logits).chunks_exact(cols).enumerate() {
            let (lse, probs) = stable_softmax(row);
            total += lse - row[labels[i]];
            softmax[i * cols..(i + 1) * cols].copy_from_slice(&probs);
        }
        let mean = if rows == 0 { 0.0 } else { total / rows as f64 };
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Vec::new(),
            vec![mean],
            rg,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                softmax,
            },
        ))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, rg, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|v| v * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        self.push(shape, out, rg, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|v| v * v).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        self.push(shape, out, rg, Op::Square(a))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.requires_grad(a);
        self.push(Vec::new(), vec![s], rg, Op::Sum(a))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let rg = self.requires_grad(a);
        self.push(Vec::new(), vec![m], rg, Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), &shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.requires_grad(a);
        Ok(self.push(shape, out, rg, Op::Reshape(a)))
    }

    /// Reverse sweep from a scalar root. Afterwards [`Graph::grad`] returns
    /// `∂root/∂v` for every node `v` that requires a gradient and feeds the
    /// root. Gradients of a previous sweep are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_len = self.nodes[root.0].value.len();
        if root_len != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(upstream) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream);
            self.grads[idx] = Some(upstream);
        }
        Ok(())
    }

    fn grad_slot(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.shape.iter().product();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&mut self, idx: usize, up: &[f64]) {
        // Temporarily detach the op so inputs can be borrowed while
        // gradients are written.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (rows, d_in) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let d_out = self.nodes[w.0].shape[1];
                if self.nodes[x.0].requires_grad {
                    let wv = std::mem::take(&mut self.nodes[w.0].value);
                    let dx = self.grad_slot(*x).expect("requires grad");
                    gemm(rows, d_out, d_in, up, false, &wv, true, dx, 1.0);
                    self.nodes[w.0].value = wv;
                }
                if self.nodes[w.0].requires_grad {
                    let xv = std::mem::take(&mut self.nodes[x.0].value);
                    let dw = self.grad_slot(*w).expect("requires grad");
                    gemm(d_in, rows, d_out, &xv, true, up, false, dw, 1.0);
                    self.nodes[x.0].value = xv;
                }
                if let Some(db) = self.grad_slot(*b) {
                    for row in up.chunks_exact(d_out) {
                        for (g, u) in db.iter_mut().zip(row) {
                            *g += u;
                        }
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = std::mem::take(&mut self.nodes[x.0].value);
                if let Some(dx) = self.grad_slot(*x) {
                    for ((g, u), v) in dx.iter_mut().zip(up).zip(&xv) {
                        *g += if *v >= 0.0 { *u } else { slope * u };
                    }
                }
                self.nodes[x.0].value = xv;
            }
            Op::LogSumExp { x, softmax } => {
                let cols = self.nodes[x.0].shape[1];
                if let Some(dx) = self.grad_slot(*x) {
                    for (i, (g, p)) in dx.chunks_exact_mut(cols).zip(softmax.chunks_exact(cols)).enumerate() {
                        for (gj, pj) in g.iter_mut().zip(p) {
                            *gj += up[i] * pj;
                        }
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                labels,
                softmax,
            } => {
                let cols = self.nodes[logits.0].shape[1];
                let scale = up[0] / labels.len().max(1) as f64;
                if let Some(dx) = self.grad_slot(*logits) {
                    for (i, (g, p)) in dx.chunks_exact_mut(cols).zip(softmax.chunks_exact(cols)).enumerate() {
                        for (j, (gj, pj)) in g.iter_mut().zip(p).enumerate() {
                            let target = if j == labels[i] { 1.0 } else { 0.0 };
                            *gj += scale * (pj - target);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.grad_slot(v) {
                        add_assign(d, up);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.grad_slot(*a) {
                    add_assign(d, up);
                }
                if let Some(d) = self.grad_slot(*b) {
                    for (g, u) in d.iter_mut().zip(up) {
                        *g -= u;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                if let Some(d) = self.grad_slot(*a) {
                    for ((g, u), y) in d.iter_mut().zip(up).zip(&bv) {
                        *g += u * y;
                    }
                }
                if let Some(d) = self.grad_slot(*b) {
                    for ((g, u), x) in d.iter_mut().zip(up).zip(&av) {
                        *g += u * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = self.grad_slot(*a) {
                    for (g, u) in d.iter_mut().zip(up) {
                        *g += c * u;
                    }
                }
            }
            Op::Square(a) => {
                let av = std::mem::take(&mut self.nodes[a.0].value);
                if let Some(d) = self.grad_slot(*a) {
                    for ((g, u), x) in d.iter_mut().zip(up).zip(&av) {
                        *g += 2.0 * x * u;
                    }
                }
                self.nodes[a.0].value = av;
            }
            Op::Sum(a) => {
                if let Some(d) = self.grad_slot(*a) {
                    for g in d.iter_mut() {
                        *g += up[0];
                    }
                }
            }
            Op::Mean(a) => {
                if let Some(d) = self.grad_slot(*a) {
                    let s = up[0] / d.len().max(1) as f64;
                    for g in d.iter_mut() {
                        *g += s;
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(d) = self.grad_slot(*a) {
                    add_assign(d, up);
                }
            }
        }
        self.nodes[idx].op = op;
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Log-sum-exp of a row and its softmax, with max subtraction.
pub(crate) fn stable_softmax(row: &[f64]) -> (f64, Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let lse = max + total.ln();
    (lse, exps.into_iter().map(|e| e / total).collect())
}

/// `c = beta·c + op(a)·op(b)` for row-major operands, where `op(a)` is
/// `m×k` and `op(b)` is `k×n`. A transposed operand is stored in its
/// untransposed row-major layout.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths bound every index reachable through the
    // given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn affine_examples() {
        let cases: [(&[&[f64]], &[&[f64]], &[f64], &[f64]); 3] = [
            (&[&[1.0, 2.0]], &[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0], &[1.0, 2.0]),
            (&[&[1.0, 2.0]], &[&[0.0, 0.0], &[0.0, 0.0]], &[3.0, 4.0], &[3.0, 4.0]),
            (&[&[1.0, 2.0]], &[&[1.0, 2.0], &[3.0, 4.0]], &[1.0, 1.0], &[8.0, 11.0]),
        ];
        for (x, w, b, want) in cases {
            let mut g = Graph::new();
            let x = g.leaf(&t2(x));
            let w = g.leaf(&t2(w));
            let b = g.leaf(&Tensor::from_slice(b));
            let out = g.affine(x, w, b).unwrap();
            assert_eq!(g.shape(out), &[1, 2]);
            assert_eq!(g.value(out), want);
        }
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(vec![2, 3]));
        let w = g.leaf(&Tensor::zeros(vec![4, 5]));
        let b = g.leaf(&Tensor::zeros(vec![5]));
        let err = g.affine(x, w, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn leaky_relu_examples() {
        let cases: [(&[f64], f64, &[f64]); 3] = [
            (&[-1.0, 0.0, 2.0], 0.1, &[-0.1, 0.0, 2.0]),
            (&[5.0], 0.0, &[5.0]),
            (&[-3.0, 4.0], 0.2, &[-0.6000000000000001, 4.0]),
        ];
        for (x, slope, want) in cases {
            let mut g = Graph::new();
            let x = g.leaf(&Tensor::from_slice(x));
            let y = g.leaky_relu(x, slope).unwrap();
            for (a, b) in g.value(y).iter().zip(want) {
                assert_relative_eq!(a, b, epsilon = 1e-15);
            }
        }
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::from_slice(&[1.0]));
        assert!(g.leaky_relu(x, 1.0).is_err());
    }

    #[test]
    fn leaky_relu_kink_takes_positive_branch() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::from_slice(&[0.0]).with_requires_grad(true));
        let y = g.leaky_relu(x, 0.2).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn logsumexp_examples() {
        let mut g = Graph::new();
        let a = g.leaf(&t2(&[&[0.0, 0.0]]));
        let b = g.leaf(&t2(&[&[1000.0, 1000.0]]));
        let c = g.leaf(&t2(&[&[1.0, 2.0, 3.0]]));
        let la = g.logsumexp(a).unwrap();
        let lb = g.logsumexp(b).unwrap();
        let lc = g.logsumexp(c).unwrap();
        assert_relative_eq!(g.value(la)[0], 2f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(g.value(lb)[0], 1000.0 + 2f64.ln(), epsilon = 1e-12);
        // 3 + ln(1 + e^-1 + e^-2)
        assert_relative_eq!(g.value(lc)[0], 3.40760596444438, epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let cases: [(&[&[f64]], usize, f64, f64); 3] = [
            (&[&[0.0, 0.0]], 0, 2f64.ln(), 1e-15),
            (&[&[10.0, -10.0]], 0, 0.0, 1e-8),
            (&[&[1.0, 2.0, 3.0]], 2, 0.40760596444438, 1e-12),
        ];
        for (logits, label, want, tol) in cases {
            let mut g = Graph::new();
            let l = g.leaf(&t2(logits));
            let loss = g.softmax_cross_entropy(l, &[label]).unwrap();
            assert_relative_eq!(g.value(loss)[0], want, epsilon = tol);
        }
        let mut g = Graph::new();
        let l = g.leaf(&t2(&[&[0.0, 0.0]]));
        assert!(g.softmax_cross_entropy(l, &[2]).is_err());
    }

    #[test]
    fn backward_on_quadratic() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::from_slice(&[3.0]).with_requires_grad(true));
        let xx = g.mul(x, x).unwrap();
        let root = g.sum(xx);
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_on_constant_writes_nothing() {
        let mut g = Graph::new();
        let c = g.leaf(&Tensor::scalar(4.0));
        g.backward(c).unwrap();
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::from_slice(&[1.0, 2.0]).with_requires_grad(true));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::from_slice(&[1.5, -2.0]).with_requires_grad(true));
        let sq = g.square(x);
        let f = g.sum(sq);
        let ff = g.add(f, f).unwrap();
        g.backward(f).unwrap();
        let single = g.grad(x).unwrap().to_vec();
        g.backward(ff).unwrap();
        let double = g.grad(x).unwrap();
        for (s, d) in single.iter().zip(double) {
            assert_eq!(2.0 * s, *d);
        }
    }

    #[test]
    fn tensor_rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        let mut t = Tensor::zeros(vec![2]);
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
    }
}
