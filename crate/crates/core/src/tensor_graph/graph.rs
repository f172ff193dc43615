use serde::{Deserialize, Serialize};

use super::matrix::{gemm_nt_acc, gemm_tn_acc, Matrix};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Fixed ELU scale for negative inputs.
pub const ELU_ALPHA: f64 = 1.0;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Hadamard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    Elu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(T::zero()),
            Activation::Elu => {
                if x >= T::zero() {
                    x
                } else {
                    T::of(ELU_ALPHA) * x.exp_m1()
                }
            }
        }
    }

    /// Derivative expressed through the forward output `y`.
    fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Elu => {
                if y >= T::zero() {
                    T::one()
                } else {
                    y + T::of(ELU_ALPHA)
                }
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Batch normalization parameters and running statistics for one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// Weight of the current batch when updating running statistics.
    pub momentum: T,
    pub epsilon: T,
    pub gamma: Matrix<T>,
    pub beta: Matrix<T>,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(width: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); width],
            running_var: vec![T::one(); width],
            momentum: T::of(0.1),
            epsilon: T::of(1e-5),
            gamma: Matrix::filled(1, width, T::one()),
            beta: Matrix::zeros(1, width),
        }
    }

    pub fn width(&self) -> usize {
        self.running_mean.len()
    }

    /// Registers gamma and beta as trainable leaves.
    pub fn bind(&self, g: &mut Graph<T>) -> (Var, Var) {
        (g.param(self.gamma.clone()), g.param(self.beta.clone()))
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Elementwise {
        kind: ElementwiseKind,
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Activation {
        kind: Activation,
        input: Var,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        input: Var,
        indices: Vec<usize>,
    },
    Sum(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    BceWithLogits {
        logits: Var,
        targets: Matrix<T>,
        weights: Matrix<T>,
    },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of dense matrix operations supporting one reverse pass.
///
/// Nodes are appended in creation order, so the tape order is already a
/// topological order and backward simply walks it in reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Matrix<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf (inputs, constants).
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass; `None` before backward or for
    /// nodes that do not lead to a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Clears gradients so backward may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Matrix<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push(value, op, requires_grad))
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_requires(&[a, b]);
        self.push_checked("matmul", value, Op::MatMul(a, b), rg)
    }

    /// Entrywise binary op. `b` may be a `1×n` row broadcast over the rows of `a`.
    pub fn elementwise(&mut self, a: Var, b: Var, kind: ElementwiseKind) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let broadcast = if sa == sb {
            false
        } else if sb.0 == 1 && sb.1 == sa.1 {
            true
        } else {
            return Err(Error::Shape {
                op: "elementwise",
                lhs: sa,
                rhs: sb,
            });
        };
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = av.clone();
        let cols = sa.1;
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let y = if broadcast {
                bv.data()[i % cols]
            } else {
                bv.data()[i]
            };
            *o = match kind {
                ElementwiseKind::Add => *o + y,
                ElementwiseKind::Sub => *o - y,
                ElementwiseKind::Hadamard => *o * y,
            };
        }
        let rg = self.any_requires(&[a, b]);
        self.push_checked(
            "elementwise",
            out,
            Op::Elementwise {
                kind,
                a,
                b,
                broadcast,
            },
            rg,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElementwiseKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElementwiseKind::Sub)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElementwiseKind::Hadamard)
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        let value = self.value(a).map(|x| kind.apply(x));
        let rg = self.any_requires(&[a]);
        self.push_checked("activation", value, Op::Activation { kind, input: a }, rg)
    }

    /// `x · w + b` (bias row broadcast).
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Shape {
            op: "concat_cols",
            lhs: (0, 0),
            rhs: (0, 0),
        })?;
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first),
                    rhs: s,
                });
            }
            cols += s.1;
        }
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        let rg = self.any_requires(parts);
        self.push_checked("concat_cols", out, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Row gather: `out[i] = input[indices[i]]`. Embedding lookups and row
    /// repetition are both expressed with this op.
    pub fn gather_rows(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(input);
        let (rows, cols) = src.shape();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: (rows, cols),
                rhs: (bad, 0),
            });
        }
        let mut out = Matrix::zeros(indices.len(), cols);
        for (o, &i) in indices.iter().enumerate() {
            out.row_mut(o).copy_from_slice(src.row(i));
        }
        let rg = self.any_requires(&[input]);
        self.push_checked(
            "gather_rows",
            out,
            Op::GatherRows {
                input,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    /// Sum of all entries as a `1×1` node.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.any_requires(&[a]);
        self.push_checked("sum", value, Op::Sum(a), rg)
    }

    /// Batch normalization using the statistics of the current batch; running
    /// statistics in `state` are updated with its momentum.
    pub fn batchnorm_train(
        &mut self,
        a: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
    ) -> Result<Var> {
        let x = self.value(a);
        let (n, d) = x.shape();
        self.check_bn_shapes(a, gamma, beta, state)?;
        if n < 2 {
            return Err(Error::DegenerateBatch(format!(
                "batchnorm in train mode needs at least 2 rows, got {n}"
            )));
        }
        let nf = T::of(n as f64);
        let mut mean = vec![T::zero(); d];
        for r in 0..n {
            for (m, &v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nf);
        let mut var = vec![T::zero(); d];
        for r in 0..n {
            for ((s, &v), &m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= nf);
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + state.epsilon).sqrt())
            .collect();
        let out = self.bn_forward(a, gamma, beta, &mean, &inv_std);
        let (value, xhat) = out;

        let m = state.momentum;
        for j in 0..d {
            state.running_mean[j] = (T::one() - m) * state.running_mean[j] + m * mean[j];
            state.running_var[j] = (T::one() - m) * state.running_var[j] + m * var[j];
        }

        let rg = self.any_requires(&[a, gamma, beta]);
        self.push_checked(
            "batchnorm",
            value,
            Op::BatchNorm {
                input: a,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            rg,
        )
    }

    /// Batch normalization with the stored running statistics.
    pub fn batchnorm_infer(
        &mut self,
        a: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState<T>,
    ) -> Result<Var> {
        self.check_bn_shapes(a, gamma, beta, state)?;
        let inv_std: Vec<T> = state
            .running_var
            .iter()
            .map(|&v| T::one() / (v + state.epsilon).sqrt())
            .collect();
        let (value, xhat) = self.bn_forward(a, gamma, beta, &state.running_mean, &inv_std);
        let rg = self.any_requires(&[a, gamma, beta]);
        self.push_checked(
            "batchnorm",
            value,
            Op::BatchNorm {
                input: a,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            rg,
        )
    }

    fn check_bn_shapes(
        &self,
        a: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState<T>,
    ) -> Result<()> {
        let d = self.shape(a).1;
        for v in [gamma, beta] {
            if self.shape(v) != (1, d) {
                return Err(Error::Shape {
                    op: "batchnorm",
                    lhs: self.shape(a),
                    rhs: self.shape(v),
                });
            }
        }
        if state.width() != d {
            return Err(Error::Shape {
                op: "batchnorm",
                lhs: self.shape(a),
                rhs: (1, state.width()),
            });
        }
        Ok(())
    }

    fn bn_forward(
        &self,
        a: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
    ) -> (Matrix<T>, Matrix<T>) {
        let x = self.value(a);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = x.clone();
        let mut out = x.clone();
        for r in 0..x.rows() {
            let xr = xhat.row_mut(r);
            for j in 0..xr.len() {
                xr[j] = (xr[j] - mean[j]) * inv_std[j];
            }
            let or = out.row_mut(r);
            for j in 0..or.len() {
                or[j] = gv[j] * xr[j] + bv[j];
            }
        }
        (out, xhat)
    }

    /// Weighted binary cross-entropy on logits, summed to a `1×1` node:
    /// `Σ w·(−y·ln σ(z) − (1−y)·ln(1−σ(z)))`.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        targets: Matrix<T>,
        weights: Matrix<T>,
    ) -> Result<Var> {
        let z = self.value(logits);
        for m in [&targets, &weights] {
            if m.shape() != z.shape() {
                return Err(Error::Shape {
                    op: "bce_with_logits",
                    lhs: z.shape(),
                    rhs: m.shape(),
                });
            }
        }
        let mut total = T::zero();
        for ((&zi, &yi), &wi) in z.data().iter().zip(targets.data()).zip(weights.data()) {
            if wi != T::zero() {
                let l = zi.max(T::zero()) - zi * yi + (-zi.abs()).exp().ln_1p();
                total += wi * l;
            }
        }
        let rg = self.any_requires(&[logits]);
        self.push_checked(
            "bce_with_logits",
            Matrix::scalar(total),
            Op::BceWithLogits {
                logits,
                targets,
                weights,
            },
            rg,
        )
    }

    /// Reverse pass from a `1×1` node. Every trainable node reachable from
    /// `loss` receives `d loss / d node`, summed over all paths.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.shape(loss),
                rhs: (1, 1),
            });
        }
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Matrix::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Matrix<T>> {
        grad_slot(&mut self.grads, &self.nodes, v)
    }

    fn propagate(&mut self, i: usize, g: &Matrix<T>) {
        // Temporarily move the op out so parents' grads can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                if let Some(acc) = grad_slot(&mut self.grads, &self.nodes, a) {
                    gemm_nt_acc(g, &self.nodes[b.0].value, acc);
                }
                if let Some(acc) = grad_slot(&mut self.grads, &self.nodes, b) {
                    gemm_tn_acc(&self.nodes[a.0].value, g, acc);
                }
            }
            Op::Elementwise {
                kind,
                a,
                b,
                broadcast,
            } => self.elementwise_backward(*kind, *a, *b, *broadcast, g),
            Op::Activation { kind, input } => {
                let y = &self.nodes[i].value;
                let local: Vec<T> = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&yv, &gv)| gv * kind.derivative_from_output(yv))
                    .collect();
                if let Some(acc) = self.acc(*input) {
                    for (a, l) in acc.data_mut().iter_mut().zip(local) {
                        *a += l;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    if let Some(acc) = self.acc(p) {
                        for r in 0..g.rows() {
                            for (a, &gv) in
                                acc.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + w])
                            {
                                *a += gv;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows { input, indices } => {
                if let Some(acc) = self.acc(*input) {
                    for (o, &src) in indices.iter().enumerate() {
                        for (a, &gv) in acc.row_mut(src).iter_mut().zip(g.row(o)) {
                            *a += gv;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let s = g.get(0, 0);
                if let Some(acc) = self.acc(*a) {
                    acc.data_mut().iter_mut().for_each(|x| *x += s);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => self.batchnorm_backward(*input, *gamma, *beta, xhat, inv_std, *batch_stats, g),
            Op::BceWithLogits {
                logits,
                targets,
                weights,
            } => {
                let s = g.get(0, 0);
                let z = &self.nodes[logits.0].value;
                if let Some(acc) = grad_slot(&mut self.grads, &self.nodes, *logits) {
                    for (((a, &zi), &yi), &wi) in acc
                        .data_mut()
                        .iter_mut()
                        .zip(z.data())
                        .zip(targets.data())
                        .zip(weights.data())
                    {
                        *a += s * wi * (sigmoid(zi) - yi);
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }

    fn elementwise_backward(
        &mut self,
        kind: ElementwiseKind,
        a: Var,
        b: Var,
        broadcast: bool,
        g: &Matrix<T>,
    ) {
        let cols = g.cols();
        let b_at = |bv: &Matrix<T>, idx: usize| {
            if broadcast {
                bv.data()[idx % cols]
            } else {
                bv.data()[idx]
            }
        };
        if let Some(acc) = grad_slot(&mut self.grads, &self.nodes, a) {
            let bv = &self.nodes[b.0].value;
            for (idx, (x, &gv)) in acc.data_mut().iter_mut().zip(g.data()).enumerate() {
                *x += match kind {
                    ElementwiseKind::Add | ElementwiseKind::Sub => gv,
                    ElementwiseKind::Hadamard => gv * b_at(bv, idx),
                };
            }
        }
        if let Some(acc) = grad_slot(&mut self.grads, &self.nodes, b) {
            let av = &self.nodes[a.0].value;
            for (idx, &gv) in g.data().iter().enumerate() {
                let contrib = match kind {
                    ElementwiseKind::Add => gv,
                    ElementwiseKind::Sub => -gv,
                    ElementwiseKind::Hadamard => gv * av.data()[idx],
                };
                let slot = if broadcast { idx % cols } else { idx };
                acc.data_mut()[slot] += contrib;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn batchnorm_backward(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: &Matrix<T>,
        inv_std: &[T],
        batch_stats: bool,
        g: &Matrix<T>,
    ) {
        let (n, d) = g.shape();
        let mut dgamma = vec![T::zero(); d];
        let mut dbeta = vec![T::zero(); d];
        for r in 0..n {
            for j in 0..d {
                dgamma[j] += g.get(r, j) * xhat.get(r, j);
                dbeta[j] += g.get(r, j);
            }
        }
        if self.nodes[input.0].requires_grad {
            let gv = self.nodes[gamma.0].value.data().to_vec();
            let nf = T::of(n as f64);
            let acc = self.acc(input).unwrap();
            for r in 0..n {
                for j in 0..d {
                    let dxhat = g.get(r, j) * gv[j];
                    let dx = if batch_stats {
                        // dgamma/gamma and dbeta/gamma are Σ dxhat·xhat and Σ dxhat.
                        let sum_dxhat = dbeta[j] * gv[j];
                        let sum_dxhat_xhat = dgamma[j] * gv[j];
                        inv_std[j] / nf * (nf * dxhat - sum_dxhat - xhat.get(r, j) * sum_dxhat_xhat)
                    } else {
                        dxhat * inv_std[j]
                    };
                    acc.data_mut()[r * d + j] += dx;
                }
            }
        }
        if let Some(acc) = self.acc(gamma) {
            for (a, v) in acc.data_mut().iter_mut().zip(&dgamma) {
                *a += *v;
            }
        }
        if let Some(acc) = self.acc(beta) {
            for (a, v) in acc.data_mut().iter_mut().zip(&dbeta) {
                *a += *v;
            }
        }
    }
}

fn grad_slot<'a, T: Scalar>(
    grads: &'a mut [Option<Matrix<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'a mut Matrix<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let (r, c) = node.value.shape();
    Some(grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c)))
}
