//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its output and whatever forward
//! state the backward pass needs. [`Tape::backward`] sweeps the nodes in
//! reverse exactly once and accumulates gradients into the leaves that were
//! registered with [`Tape::param`].

mod conv;
pub mod gradcheck;
mod norm;
mod pool;

pub use conv::ConvGeom;
pub use norm::{BatchStats, Normalize, BN_EPS};

use crate::error::{dim_err, Error, Result};
use crate::par;
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    AddRow { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, c: S },
    Sum { x: Var },
    Reshape { x: Var },
    Relu { x: Var },
    Tanh { x: Var },
    Conv2d(conv::ConvSaved<S>),
    MaxPool { x: Var, argmax: Vec<usize> },
    BatchNorm(norm::BnSaved<S>),
    /// Mean over the batch of `-sum_j target_j * log softmax(logits)_j`.
    SoftmaxCe { logits: Var, target: Vec<S>, probs: Vec<S> },
    /// Mean over the batch of the positive-weighted logistic loss.
    SigmoidBce { logits: Var, positive: Vec<bool>, rho: S },
    /// Mean over the batch of `sum_l (|2 z_l - 1| - 1)^2`.
    QuantPenalty { z: Var },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Ordered record of executed operations.
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

const GEMM_ROW_CHUNK: usize = 32;

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        let needs_grad = value.requires_grad();
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Records a trainable input whose gradient is accumulated by [`Tape::backward`].
    pub fn param(&mut self, mut value: Tensor<S>) -> Var {
        value.set_requires_grad(true);
        value.zero_grad();
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, `None` if nothing reached it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].value.grad()
    }

    pub fn grad_or_zeros(&self, v: Var) -> Vec<S> {
        self.grad(v)
            .map(<[S]>::to_vec)
            .unwrap_or_else(|| vec![S::zero(); self.value(v).len()])
    }

    pub(crate) fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn mat_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.value(v).shape() {
            &[r, c] => Ok((r, c)),
            s => dim_err(format!("{what} must be a matrix, got shape {s:?}")),
        }
    }

    /// `a [m x k] * b [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a [m x k] * b^T` for `b [n x k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul lhs")?;
        let (br, bc) = self.mat_dims(b, "matmul rhs")?;
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            let bs = self.value(b).shape();
            return dim_err(format!(
                "matmul of {:?} by {}{bs:?}: inner dimensions {k} and {k2} differ",
                self.value(a).shape(),
                if trans_b { "transposed " } else { "" }
            ));
        }
        let mut out = vec![S::zero(); m * n];
        {
            let av = self.value(a).data();
            let mut bm = MatRef::new(self.value(b).data(), br, bc);
            if trans_b {
                bm = bm.t();
            }
            gemm_rows(av, k, bm, &mut out, n);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new([m, n], out)?,
            Op::MatMul { a, b, trans_b },
            needs,
        ))
    }

    /// Adds a length-`n` bias to every row of `x [m x n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.mat_dims(x, "add_row input")?;
        if self.value(bias).len() != n {
            return dim_err(format!(
                "bias of shape {:?} does not match rows of {:?}",
                self.value(bias).shape(),
                self.value(x).shape()
            ));
        }
        let bv = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        out.zero_grad();
        out.set_requires_grad(false);
        out.data_mut()
            .chunks_mut(n)
            .for_each(|row| row.iter_mut().zip(&bv).for_each(|(o, &b)| *o += b));
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddRow { x, bias }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return dim_err(format!(
                "add of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&e| e * c).collect(),
        )
        .expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::Scale { x, c }, needs)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let mut out = self.value(x).clone().reshape(shape)?;
        out.zero_grad();
        out.set_requires_grad(false);
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape { x }, needs))
    }

    /// Collapses everything after the batch dimension.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let (r, w) = (self.value(x).rows(), self.value(x).row_len());
        self.reshape(x, [r, w])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, |e| if e > S::zero() { e } else { S::zero() }, |x| Op::Relu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map_unary(x, S::tanh, |x| Op::Tanh { x })
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(S) -> S, op: impl FnOnce(Var) -> Op<S>) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect())
            .expect("same shape");
        let needs = self.needs(x);
        self.push(out, op(x), needs)
    }

    /// Cross-correlation of `input [B x C x H x W]` with `kernels [K x C x k x k]` plus `bias [K]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (out, saved) = conv::forward(
            self.value(input),
            self.value(kernels),
            self.value(bias),
            stride,
            padding,
        )?;
        let needs = self.needs(input) || self.needs(kernels) || self.needs(bias);
        Ok(self.push(
            out,
            Op::Conv2d(conv::ConvSaved {
                input,
                kernels,
                bias,
                geom: saved.0,
                cols: saved.1,
            }),
            needs,
        ))
    }

    /// Non-overlapping 2x2 max pooling over the two trailing dimensions.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = pool::forward(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, needs))
    }

    /// Batch normalization over features of `[N x F]` or channels of `[B x C x H x W]`.
    ///
    /// In [`Normalize::Batch`] mode the batch statistics are returned so the
    /// caller can fold them into its running estimates; the tape itself never
    /// mutates model state.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Normalize<'_, S>,
    ) -> Result<(Var, Option<BatchStats<S>>)> {
        let (out, saved, stats) = norm::forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            mode,
        )?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            out,
            Op::BatchNorm(norm::BnSaved {
                x,
                gamma,
                beta,
                ..saved
            }),
            needs,
        );
        Ok((v, stats))
    }

    /// Back-propagates from the scalar `loss`, accumulating into parameter leaves.
    ///
    /// Calling it twice without rebuilding the tape adds the gradients twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut send = |v: Var, contrib: Vec<S>| accumulate(grads, v, contrib);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.mat_dims(*a, "lhs")?;
                let (br, bc) = self.mat_dims(*b, "rhs")?;
                let n = if *trans_b { br } else { bc };
                let gm = MatRef::new(g, m, n);
                if self.needs(*a) {
                    // dA = dC * op(B)^T
                    let mut bm = MatRef::new(self.value(*b).data(), br, bc);
                    if !*trans_b {
                        bm = bm.t();
                    }
                    let mut da = vec![S::zero(); m * k];
                    gemm_rows(g, n, bm, &mut da, k);
                    send(*a, da);
                }
                if self.needs(*b) {
                    let am = MatRef::new(self.value(*a).data(), m, k);
                    let mut db = vec![S::zero(); br * bc];
                    if *trans_b {
                        // B is n x k: dB = dC^T * A
                        gemm(S::one(), gm.t(), am, S::zero(), &mut db);
                    } else {
                        gemm(S::one(), am.t(), gm, S::zero(), &mut db);
                    }
                    send(*b, db);
                }
            }
            Op::AddRow { x, bias } => {
                let n = self.value(*bias).len();
                if self.needs(*bias) {
                    let mut db = vec![S::zero(); n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &e)| *d += e);
                    }
                    send(*bias, db);
                }
                if self.needs(*x) {
                    send(*x, g.to_vec());
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    send(*a, g.to_vec());
                }
                if self.needs(*b) {
                    send(*b, g.to_vec());
                }
            }
            Op::Scale { x, c } => send(*x, g.iter().map(|&e| e * *c).collect()),
            Op::Sum { x } => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::Reshape { x } => send(*x, g.to_vec()),
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                send(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&e, &v)| if v > S::zero() { e } else { S::zero() })
                        .collect(),
                );
            }
            Op::Tanh { x } => {
                let y = node.value.data();
                send(
                    *x,
                    g.iter()
                        .zip(y)
                        .map(|(&e, &t)| e * (S::one() - t * t))
                        .collect(),
                );
            }
            Op::Conv2d(saved) => {
                let (dx, dk, db) = conv::backward(
                    saved,
                    self.value(saved.kernels),
                    g,
                    self.needs(saved.input),
                );
                if let Some(dx) = dx {
                    send(saved.input, dx);
                }
                if self.needs(saved.kernels) {
                    send(saved.kernels, dk);
                }
                if self.needs(saved.bias) {
                    send(saved.bias, db);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![S::zero(); self.value(*x).len()];
                for (&src, &e) in argmax.iter().zip(g) {
                    dx[src] += e;
                }
                send(*x, dx);
            }
            Op::BatchNorm(saved) => {
                let (dx, dgamma, dbeta) = norm::backward(saved, self.value(saved.gamma), g);
                if self.needs(saved.x) {
                    send(saved.x, dx);
                }
                if self.needs(saved.gamma) {
                    send(saved.gamma, dgamma);
                }
                if self.needs(saved.beta) {
                    send(saved.beta, dbeta);
                }
            }
            Op::SoftmaxCe {
                logits,
                target,
                probs,
            } => {
                let batch = self.value(*logits).rows();
                let scale = g[0] / S::lit(batch as f64);
                send(
                    *logits,
                    probs
                        .iter()
                        .zip(target)
                        .map(|(&p, &t)| (p - t) * scale)
                        .collect(),
                );
            }
            Op::SigmoidBce {
                logits,
                positive,
                rho,
            } => {
                let lv = self.value(*logits);
                let scale = g[0] / S::lit(lv.rows() as f64);
                send(
                    *logits,
                    lv.data()
                        .iter()
                        .zip(positive)
                        .map(|(&s, &pos)| {
                            let sig = sigmoid(s);
                            let d = if pos { *rho * (sig - S::one()) } else { sig };
                            d * scale
                        })
                        .collect(),
                );
            }
            Op::QuantPenalty { z } => {
                let zv = self.value(*z);
                let scale = g[0] / S::lit(zv.rows() as f64);
                let two = S::lit(2.0);
                send(
                    *z,
                    zv.data()
                        .iter()
                        .map(|&e| {
                            let u = two * e - S::one();
                            let sign = if u > S::zero() {
                                S::one()
                            } else if u < S::zero() {
                                -S::one()
                            } else {
                                S::zero()
                            };
                            two * (u.abs() - S::one()) * sign * two * scale
                        })
                        .collect(),
                );
            }
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, contrib: Vec<S>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a += c),
        slot @ None => *slot = Some(contrib),
    }
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid<S: Scalar>(s: S) -> S {
    if s >= S::zero() {
        S::one() / (S::one() + (-s).exp())
    } else {
        let e = s.exp();
        e / (S::one() + e)
    }
}

/// `c [m x n] = a [m x k] * b`, split into fixed row blocks so the parallel
/// and sequential builds run identical kernels.
fn gemm_rows<S: Scalar>(a: &[S], k: usize, b: MatRef<'_, S>, c: &mut [S], n: usize) {
    if n == 0 {
        return;
    }
    par::for_each_chunk(c, GEMM_ROW_CHUNK * n, |blk, c_blk| {
        let rows = c_blk.len() / n;
        let start = blk * GEMM_ROW_CHUNK * k;
        let a_blk = MatRef::new(&a[start..start + rows * k], rows, k);
        gemm(S::one(), a_blk, b, S::zero(), c_blk);
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(r: usize, c: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::new([r, c], v.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::<f64>::new();
        let i = tape.leaf(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros([2, 3]));
        let b = tape.leaf(Tensor::zeros([2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.param(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        let z = tape.scale(c, 0.0);
        let l = tape.sum(z);
        tape.backward(l).unwrap();
        assert!(tape.grad(a).unwrap().iter().all(|&g| g == 0.0));
        assert!(tape.grad(b).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn sum_of_weights_has_unit_gradient() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(Tensor::from_fn([3, 4], |i| i as f32 * 0.1));
        let l = tape.sum(w);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0; 12]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(Tensor::from_fn([3], |i| i as f32));
        let l = tape.sum(w);
        tape.backward(l).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0; 3]);
    }

    #[test]
    fn detached_parameter_gets_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(Tensor::full([2], 1.0));
        let u = tape.param(Tensor::full([2], 1.0));
        let l = tape.sum(w);
        tape.backward(l).unwrap();
        assert!(tape.grad(u).is_none());
        assert_eq!(tape.grad_or_zeros(u), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(Tensor::full([2], 1.0));
        assert!(matches!(tape.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn relu_forward_and_dead_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full([4], -0.5));
        let y = tape.relu(x);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tanh_is_odd() {
        let mut tape = Tape::<f64>::new();
        let pts = [-2.5, -0.3, 0.0, 0.7, 3.0];
        let x = tape.leaf(Tensor::new([5], pts.to_vec()).unwrap());
        let nx = tape.leaf(Tensor::new([5], pts.iter().map(|v| -v).collect()).unwrap());
        let y = tape.tanh(x);
        let ny = tape.tanh(nx);
        for (a, b) in tape.value(y).data().iter().zip(tape.value(ny).data()) {
            assert_eq!(*a, -*b);
        }
        assert_eq!(tape.value(y).data()[2], 0.0);
    }

    #[test]
    fn row_blocked_gemm_matches_single_call() {
        let m = 77;
        let k = 13;
        let n = 9;
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 37 % 101) as f32) * 0.013 - 0.6).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 53 % 97) as f32) * 0.021 - 1.0).collect();
        let mut blocked = vec![0.0f32; m * n];
        gemm_rows(&a, k, MatRef::new(&b, k, n), &mut blocked, n);
        let mut single = vec![0.0f32; m * n];
        gemm(1.0, MatRef::new(&a, m, k), MatRef::new(&b, k, n), 0.0, &mut single);
        assert_eq!(blocked, single);
    }
}
