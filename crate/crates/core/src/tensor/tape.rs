//! Wengert tape: reverse-mode AD via operation recording.
//!
//! Every operation appends one node holding its output value and the parent
//! indices needed for the backward sweep. A tape and its vars form a
//! single-threaded unit of work; values are immutable once recorded.

use std::cell::{Cell, RefCell};

use super::linalg::{cholesky, cholesky_solve};
use super::{strides_of, Tensor};
use crate::error::TensorError;

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node on a tape. Only meaningful for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Sigmoid,
    Exp,
    Ln,
    Sqrt,
    Square,
    Sign,
    Abs,
    Neg,
}

#[derive(Debug, Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf { grad: bool },
    Unary(UnaryOp, Var),
    /// a * x + b, elementwise; only the slope matters for the backward pass.
    Affine { x: Var, a: f64 },
    Bin(BinOp, Var, Var),
    Matmul(Var, Var),
    /// a [M,K] applied to every batch slice of b [B,K,N] -> [B,M,N].
    MatmulLeftBatched(Var, Var),
    /// out[p,q] = sum_{i,k} a[i,p,k] b[i,q,k] for a [B,P,K], b [B,Q,K].
    PairContract(Var, Var),
    Transpose(Var),
    Conv1d { x: Var, kernel: Var, axis: usize },
    ReduceSum { x: Var, axis: usize },
    SumAll(Var),
    BroadcastTo(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    /// C = M^{-1} B for SPD M; saved = Cholesky factor of M.
    SolveSpd { m: Var, b: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    saved: Option<Vec<f64>>,
}

/// The gradient tape. `checked` mode (default on) rejects any op that
/// produces a NaN/Inf and division by exact zero.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    checked: Cell<bool>,
}

/// The four reduction statistics over one axis: mean |x|, sqrt(mean x^2),
/// mean, and population standard deviation.
pub struct Stats {
    pub l1_mean: Var,
    pub rms: Var,
    pub mean: Var,
    pub std: Var,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), checked: Cell::new(true) }
    }

    pub fn set_checked(&self, on: bool) {
        self.checked.set(on);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { grad: true }, None)
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { grad: false }, None)
    }

    pub fn scalar_const(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.idx].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.idx].value.shape().to_vec()
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes.borrow()[v.idx].value.numel()
    }

    fn push(&self, value: Tensor, op: Op, saved: Option<Vec<f64>>) -> Var {
        let needs_grad = {
            let nodes = self.nodes.borrow();
            match &op {
                Op::Leaf { grad } => *grad,
                Op::Unary(o, x) => *o != UnaryOp::Sign && nodes[x.idx].needs_grad,
                Op::Affine { x, .. } => nodes[x.idx].needs_grad,
                Op::Bin(_, a, b)
                | Op::Matmul(a, b)
                | Op::MatmulLeftBatched(a, b)
                | Op::PairContract(a, b)
                | Op::SolveSpd { m: a, b } => {
                    nodes[a.idx].needs_grad || nodes[b.idx].needs_grad
                }
                Op::Conv1d { x, kernel, .. } => {
                    nodes[x.idx].needs_grad || nodes[kernel.idx].needs_grad
                }
                Op::Transpose(x)
                | Op::ReduceSum { x, .. }
                | Op::SumAll(x)
                | Op::BroadcastTo(x)
                | Op::Reshape(x) => nodes[x.idx].needs_grad,
                Op::Concat { parts, .. } => parts.iter().any(|p| nodes[p.idx].needs_grad),
            }
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad, saved });
        Var { idx: nodes.len() - 1 }
    }

    fn check(&self, op: &'static str, t: Tensor) -> Result<Tensor> {
        if self.checked.get() && !t.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        Ok(t)
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn unary(&self, op: UnaryOp, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.idx].value;
            xv.map(|v| apply_unary(op, v))
        };
        let value = self.check(unary_name(op), value)?;
        Ok(self.push(value, Op::Unary(op, x), None))
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }
    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, x)
    }
    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, x)
    }
    pub fn ln(&self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Ln, x)
    }
    pub fn sqrt(&self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, x)
    }
    pub fn square(&self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, x)
    }
    pub fn sign(&self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sign, x)
    }
    pub fn abs(&self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Abs, x)
    }
    pub fn neg(&self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, x)
    }

    /// a * x + b elementwise.
    pub fn affine(&self, x: Var, a: f64, b: f64) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[x.idx].value.map(|v| a * v + b)
        };
        let value = self.check("affine", value)?;
        Ok(self.push(value, Op::Affine { x, a }, None))
    }

    pub fn scale(&self, x: Var, a: f64) -> Result<Var> {
        self.affine(x, a, 0.0)
    }

    pub fn add_scalar(&self, x: Var, b: f64) -> Result<Var> {
        self.affine(x, 1.0, b)
    }

    fn binary(&self, op: BinOp, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.idx].value;
            let bv = &nodes[b.idx].value;
            broadcast_binary(op, av, bv, self.checked.get())?
        };
        let value = self.check(bin_name(op), value)?;
        Ok(self.push(value, Op::Bin(op, a, b), None))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b)
    }
    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }
    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.idx].value;
            let bv = &nodes[b.idx].value;
            matmul_value(av, bv)?
        };
        let value = self.check("matmul", value)?;
        Ok(self.push(value, Op::Matmul(a, b), None))
    }

    /// Apply a [M,K] matrix to every batch slice of a rank-3 tensor
    /// b [B,K,N], giving [B,M,N].
    pub fn matmul_left_batched(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            matmul_left_batched_value(&nodes[a.idx].value, &nodes[b.idx].value)?
        };
        let value = self.check("matmul_left_batched", value)?;
        Ok(self.push(value, Op::MatmulLeftBatched(a, b), None))
    }

    /// Contract two rank-3 tensors over batch (axis 0) and feature (axis 2):
    /// out[p,q] = sum_{i,k} a[i,p,k] b[i,q,k] for a [B,P,K], b [B,Q,K].
    pub fn pair_contract(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            pair_contract_value(&nodes[a.idx].value, &nodes[b.idx].value)?
        };
        let value = self.check("pair_contract", value)?;
        Ok(self.push(value, Op::PairContract(a, b), None))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            transpose_value(&nodes[x.idx].value)?
        };
        Ok(self.push(value, Op::Transpose(x), None))
    }

    /// Solve M C = B for SPD M ([n,n]) and B ([n,k]).
    pub fn solve_spd(&self, m: Var, b: Var) -> Result<Var> {
        let (value, factor) = {
            let nodes = self.nodes.borrow();
            let mv = &nodes[m.idx].value;
            let bv = &nodes[b.idx].value;
            if mv.rank() != 2 || mv.shape()[0] != mv.shape()[1] {
                return Err(TensorError::ShapeMismatch {
                    op: "solve_spd",
                    detail: format!("M must be square, got {:?}", mv.shape()),
                });
            }
            let n = mv.shape()[0];
            if bv.rank() != 2 || bv.shape()[0] != n {
                return Err(TensorError::ShapeMismatch {
                    op: "solve_spd",
                    detail: format!("B shape {:?} incompatible with n={}", bv.shape(), n),
                });
            }
            let k = bv.shape()[1];
            // factor the symmetric part; Cholesky reads the lower triangle only
            let md = mv.data();
            let mut msym = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    msym[i * n + j] = 0.5 * (md[i * n + j] + md[j * n + i]);
                }
            }
            let factor = cholesky(&msym, n)?;
            let x = cholesky_solve(&factor, n, bv.data(), k);
            (Tensor::new(vec![n, k], x)?, factor)
        };
        let value = self.check("solve_spd", value)?;
        Ok(self.push(value, Op::SolveSpd { m, b }, Some(factor)))
    }

    /// 1D convolution over axis 0 or 1 of a rank-3 tensor, stride 1,
    /// zero-padded "same", odd kernel [K, C_in, C_out].
    pub fn conv1d_axis(&self, x: Var, axis: usize, kernel: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            conv1d_value(&nodes[x.idx].value, axis, &nodes[kernel.idx].value)?
        };
        let value = self.check("conv1d_axis", value)?;
        Ok(self.push(value, Op::Conv1d { x, kernel, axis }, None))
    }

    // ── shape manipulation ──────────────────────────────────────────────

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[x.idx].value.reshaped(shape)?
        };
        Ok(self.push(value, Op::Reshape(x), None))
    }

    /// Broadcast to `shape`: same rank, each input extent equal or 1.
    pub fn broadcast_to(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            broadcast_to_value(&nodes[x.idx].value, shape)?
        };
        Ok(self.push(value, Op::BroadcastTo(x), None))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat of zero tensors".into()));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.idx].value).collect();
            concat_value(&vals, axis)?
        };
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, None))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn reduce_sum(&self, x: Var, axis: usize, keep: bool) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            reduce_sum_value(&nodes[x.idx].value, axis, keep)?
        };
        Ok(self.push(value, Op::ReduceSum { x, axis }, None))
    }

    pub fn reduce_mean(&self, x: Var, axis: usize, keep: bool) -> Result<Var> {
        let n = self.shape(x)[axis];
        if n == 0 {
            return Err(TensorError::EmptyReduction);
        }
        let s = self.reduce_sum(x, axis, keep)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_all(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            Tensor::scalar(nodes[x.idx].value.data().iter().sum())
        };
        let value = self.check("sum_all", value)?;
        Ok(self.push(value, Op::SumAll(x), None))
    }

    pub fn mean_all(&self, x: Var) -> Result<Var> {
        let n = self.numel(x);
        if n == 0 {
            return Err(TensorError::EmptyReduction);
        }
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over several axes, keeping reduced axes as extent 1.
    pub fn reduce_mean_axes_keep(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let mut v = x;
        for &ax in axes {
            v = self.reduce_mean(v, ax, true)?;
        }
        Ok(v)
    }

    /// Batch normalization over `axes`, statistics from this tensor only.
    /// `scale` and `offset` must have x's rank with extent 1 on `axes`.
    pub fn batch_norm(
        &self,
        x: Var,
        axes: &[usize],
        scale: Var,
        offset: Var,
        eps: f64,
    ) -> Result<Var> {
        if axes.is_empty() {
            return Err(TensorError::Invalid("batch_norm: empty axis set".into()));
        }
        let shape = self.shape(x);
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        if count == 0 {
            return Err(TensorError::EmptyReduction);
        }
        let mean = self.reduce_mean_axes_keep(x, axes)?;
        let centered = self.sub(x, mean)?;
        let sq = self.square(centered)?;
        let var = self.reduce_mean_axes_keep(sq, axes)?;
        let var_eps = self.add_scalar(var, eps)?;
        let denom = self.sqrt(var_eps)?;
        let normed = self.div(centered, denom)?;
        let scaled = self.mul(normed, scale)?;
        self.add(scaled, offset)
    }

    /// The four per-column statistics over `axis`, reduced axis removed.
    pub fn reduce_stats(&self, x: Var, axis: usize) -> Result<Stats> {
        let shape = self.shape(x);
        if shape[axis] == 0 {
            return Err(TensorError::EmptyReduction);
        }
        let absx = self.abs(x)?;
        let l1_mean = self.reduce_mean(absx, axis, false)?;
        let sq = self.square(x)?;
        let msq = self.reduce_mean(sq, axis, false)?;
        let rms = self.sqrt(msq)?;
        let mean_keep = self.reduce_mean(x, axis, true)?;
        let centered = self.sub(x, mean_keep)?;
        let csq = self.square(centered)?;
        let var = self.reduce_mean(csq, axis, false)?;
        let std = self.sqrt(var)?;
        let mean = self.reduce_mean(x, axis, false)?;
        Ok(Stats { l1_mean, rms, mean, std })
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; returns one gradient per leaf
    /// (zeros for leaves the loss does not reach).
    pub fn backward(&self, loss: Var, leaves: &[Var]) -> Result<Vec<Tensor>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.idx].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: nodes[loss.idx].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(vec![1.0]);

        for idx in (0..=loss.idx).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf { .. }) {
                grads[idx] = Some(g); // keep for collection below
                continue;
            }
            let mut acc = |v: Var, contrib: Vec<f64>| {
                if !nodes[v.idx].needs_grad {
                    return;
                }
                match &mut grads[v.idx] {
                    Some(existing) => {
                        for (e, c) in existing.iter_mut().zip(contrib) {
                            *e += c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf { .. } => unreachable!("handled above"),
                Op::Unary(op, x) => {
                    let xv = &nodes[x.idx].value;
                    let yv = &node.value;
                    let contrib = unary_backward(*op, xv.data(), yv.data(), &g);
                    acc(*x, contrib);
                }
                Op::Affine { x, a } => {
                    acc(*x, g.iter().map(|v| v * a).collect());
                }
                Op::Bin(op, a, b) => {
                    let av = &nodes[a.idx].value;
                    let bv = &nodes[b.idx].value;
                    let (ga, gb) =
                        binary_backward(*op, av, bv, node.value.shape(), &g);
                    acc(*a, reduce_grad_to(&ga, node.value.shape(), av.shape()));
                    acc(*b, reduce_grad_to(&gb, node.value.shape(), bv.shape()));
                }
                Op::Matmul(a, b) => {
                    let av = &nodes[a.idx].value;
                    let bv = &nodes[b.idx].value;
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    // dA = G B^T
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for kk in 0..k {
                            let brow = &bv.data()[kk * n..(kk + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            ga[i * k + kk] =
                                grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    // dB = A^T G
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let av_ik = av.data()[i * k + kk];
                            if av_ik != 0.0 {
                                let brow = &mut gb[kk * n..(kk + 1) * n];
                                for j in 0..n {
                                    brow[j] += av_ik * grow[j];
                                }
                            }
                        }
                    }
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::MatmulLeftBatched(a, b) => {
                    let av = &nodes[a.idx].value;
                    let bv = &nodes[b.idx].value;
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let (bsz, n) = (bv.shape()[0], bv.shape()[2]);
                    // dA[p,kk] = sum_{i,j} G[i,p,j] B[i,kk,j]
                    let mut ga = vec![0.0; m * k];
                    // dB[i,kk,j] = sum_p A[p,kk] G[i,p,j]
                    let mut gb = vec![0.0; bsz * k * n];
                    for i in 0..bsz {
                        let gs = &g[i * m * n..(i + 1) * m * n];
                        let bs = &bv.data()[i * k * n..(i + 1) * k * n];
                        let gbs = &mut gb[i * k * n..(i + 1) * k * n];
                        for p in 0..m {
                            let grow = &gs[p * n..(p + 1) * n];
                            for kk in 0..k {
                                let brow = &bs[kk * n..(kk + 1) * n];
                                ga[p * k + kk] +=
                                    grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                                let apk = av.data()[p * k + kk];
                                if apk != 0.0 {
                                    let gbrow = &mut gbs[kk * n..(kk + 1) * n];
                                    for j in 0..n {
                                        gbrow[j] += apk * grow[j];
                                    }
                                }
                            }
                        }
                    }
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::PairContract(a, b) => {
                    let av = &nodes[a.idx].value;
                    let bv = &nodes[b.idx].value;
                    let (bsz, p, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                    let q = bv.shape()[1];
                    // dA[i,p,k] = sum_q G[p,q] B[i,q,k]; dB[i,q,k] = sum_p G[p,q] A[i,p,k]
                    let mut ga = vec![0.0; bsz * p * k];
                    let mut gb = vec![0.0; bsz * q * k];
                    for i in 0..bsz {
                        for pp in 0..p {
                            let garow = &mut ga[(i * p + pp) * k..(i * p + pp + 1) * k];
                            let arow = &av.data()[(i * p + pp) * k..(i * p + pp + 1) * k];
                            for qq in 0..q {
                                let gpq = g[pp * q + qq];
                                if gpq == 0.0 {
                                    continue;
                                }
                                let brow = &bv.data()[(i * q + qq) * k..(i * q + qq + 1) * k];
                                let gbrow = &mut gb[(i * q + qq) * k..(i * q + qq + 1) * k];
                                for kk in 0..k {
                                    garow[kk] += gpq * brow[kk];
                                    gbrow[kk] += gpq * arow[kk];
                                }
                            }
                        }
                    }
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Transpose(x) => {
                    let (r, c) = {
                        let s = node.value.shape();
                        (s[0], s[1])
                    };
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            gx[j * r + i] = g[i * c + j];
                        }
                    }
                    acc(*x, gx);
                }
                Op::Conv1d { x, kernel, axis } => {
                    let xv = &nodes[x.idx].value;
                    let kv = &nodes[kernel.idx].value;
                    let (gx, gk) = conv1d_backward(xv, *axis, kv, &g);
                    acc(*x, gx);
                    acc(*kernel, gk);
                }
                Op::ReduceSum { x, axis } => {
                    let xs = nodes[x.idx].value.shape();
                    let (outer, ax, inner) = split3(xs, *axis);
                    let mut gx = vec![0.0; outer * ax * inner];
                    for o in 0..outer {
                        for a in 0..ax {
                            for i in 0..inner {
                                gx[(o * ax + a) * inner + i] = g[o * inner + i];
                            }
                        }
                    }
                    acc(*x, gx);
                }
                Op::SumAll(x) => {
                    let n = nodes[x.idx].value.numel();
                    acc(*x, vec![g[0]; n]);
                }
                Op::BroadcastTo(x) => {
                    let gx =
                        reduce_grad_to(&g, node.value.shape(), nodes[x.idx].value.shape());
                    acc(*x, gx);
                }
                Op::Reshape(x) => {
                    acc(*x, g.clone());
                }
                Op::Concat { parts, axis } => {
                    let out_shape = node.value.shape();
                    let (outer, _, inner) = split3(out_shape, *axis);
                    let total_ax = out_shape[*axis];
                    let mut offset = 0;
                    for p in parts {
                        let ps = nodes[p.idx].value.shape();
                        let pax = ps[*axis];
                        let mut gp = vec![0.0; outer * pax * inner];
                        for o in 0..outer {
                            for a in 0..pax {
                                let src = (o * total_ax + offset + a) * inner;
                                let dst = (o * pax + a) * inner;
                                gp[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                            }
                        }
                        acc(*p, gp);
                        offset += pax;
                    }
                }
                Op::SolveSpd { m, b } => {
                    let cv = &node.value; // [n, k]
                    let n = cv.shape()[0];
                    let k = cv.shape()[1];
                    let factor = node.saved.as_ref().expect("solve_spd saved factor");
                    // dB = M^{-1} G  (M symmetric)
                    let gb = cholesky_solve(factor, n, &g, k);
                    // dM = sym(-dB C^T); forward saw only the symmetric part
                    let mut s = vec![0.0; n * n];
                    for i in 0..n {
                        for j in 0..n {
                            let mut acc_ij = 0.0;
                            for c in 0..k {
                                acc_ij += gb[i * k + c] * cv.data()[j * k + c];
                            }
                            s[i * n + j] = -acc_ij;
                        }
                    }
                    let mut gm = vec![0.0; n * n];
                    for i in 0..n {
                        for j in 0..n {
                            gm[i * n + j] = 0.5 * (s[i * n + j] + s[j * n + i]);
                        }
                    }
                    acc(*m, gm);
                    acc(*b, gb);
                }
            }
        }

        let mut out = Vec::with_capacity(leaves.len());
        for leaf in leaves {
            let shape = nodes[leaf.idx].value.shape().to_vec();
            let data = match grads[leaf.idx].take() {
                Some(g) => g,
                None => vec![0.0; nodes[leaf.idx].value.numel()],
            };
            out.push(Tensor::new(shape, data).expect("gradient shape"));
        }
        Ok(out)
    }
}

fn unary_name(op: UnaryOp) -> &'static str {
    match op {
        UnaryOp::Relu => "relu",
        UnaryOp::Sigmoid => "sigmoid",
        UnaryOp::Exp => "exp",
        UnaryOp::Ln => "ln",
        UnaryOp::Sqrt => "sqrt",
        UnaryOp::Square => "square",
        UnaryOp::Sign => "sign",
        UnaryOp::Abs => "abs",
        UnaryOp::Neg => "neg",
    }
}

fn bin_name(op: BinOp) -> &'static str {
    match op {
        BinOp::Add => "add",
        BinOp::Sub => "sub",
        BinOp::Mul => "mul",
        BinOp::Div => "div",
    }
}

fn apply_unary(op: UnaryOp, v: f64) -> f64 {
    match op {
        UnaryOp::Relu => v.max(0.0),
        UnaryOp::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        UnaryOp::Exp => v.exp(),
        UnaryOp::Ln => v.ln(),
        UnaryOp::Sqrt => v.sqrt(),
        UnaryOp::Square => v * v,
        UnaryOp::Sign => {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        UnaryOp::Abs => v.abs(),
        UnaryOp::Neg => -v,
    }
}

fn unary_backward(op: UnaryOp, x: &[f64], y: &[f64], g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.len()];
    for i in 0..g.len() {
        out[i] = g[i]
            * match op {
                UnaryOp::Relu => {
                    if x[i] > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                UnaryOp::Sigmoid => y[i] * (1.0 - y[i]),
                UnaryOp::Exp => y[i],
                UnaryOp::Ln => 1.0 / x[i],
                UnaryOp::Sqrt => 0.5 / y[i],
                UnaryOp::Square => 2.0 * x[i],
                UnaryOp::Sign => 0.0,
                UnaryOp::Abs => {
                    if x[i] > 0.0 {
                        1.0
                    } else if x[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }
                UnaryOp::Neg => -1.0,
            };
    }
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(TensorError::ShapeMismatch {
            op: "broadcast",
            detail: format!("rank mismatch {:?} vs {:?} (no implicit rank promotion)", a, b),
        });
    }
    let mut out = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        if x == y {
            out.push(x);
        } else if x == 1 {
            out.push(y);
        } else if y == 1 {
            out.push(x);
        } else {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast",
                detail: format!("incompatible shapes {:?} vs {:?}", a, b),
            });
        }
    }
    Ok(out)
}

/// Strides for iterating `shape` as if broadcast to `out_shape`
/// (0 on broadcast dims), padded on the left to rank 4.
fn padded_bcast_strides(shape: &[usize], out_shape: &[usize]) -> [usize; 4] {
    let strides = strides_of(shape);
    let mut out = [0usize; 4];
    let pad = 4 - out_shape.len();
    for i in 0..out_shape.len() {
        out[pad + i] = if shape[i] == out_shape[i] { strides[i] } else { 0 };
    }
    out
}

fn padded_dims(shape: &[usize]) -> [usize; 4] {
    let mut out = [1usize; 4];
    let pad = 4 - shape.len();
    for i in 0..shape.len() {
        out[pad + i] = shape[i];
    }
    out
}

fn broadcast_binary(op: BinOp, a: &Tensor, b: &Tensor, checked: bool) -> Result<Tensor> {
    let apply = |x: f64, y: f64| match op {
        BinOp::Add => x + y,
        BinOp::Sub => x - y,
        BinOp::Mul => x * y,
        BinOp::Div => x / y,
    };
    if matches!(op, BinOp::Div) && checked && b.data().iter().any(|&v| v == 0.0) {
        return Err(TensorError::DivByZero);
    }
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| apply(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let dims = padded_dims(&out_shape);
    let sa = padded_bcast_strides(a.shape(), &out_shape);
    let sb = padded_bcast_strides(b.shape(), &out_shape);
    let mut data = Vec::with_capacity(out_shape.iter().product());
    let (ad, bd) = (a.data(), b.data());
    for i0 in 0..dims[0] {
        let (a0, b0) = (i0 * sa[0], i0 * sb[0]);
        for i1 in 0..dims[1] {
            let (a1, b1) = (a0 + i1 * sa[1], b0 + i1 * sb[1]);
            for i2 in 0..dims[2] {
                let (a2, b2) = (a1 + i2 * sa[2], b1 + i2 * sb[2]);
                for i3 in 0..dims[3] {
                    data.push(apply(ad[a2 + i3 * sa[3]], bd[b2 + i3 * sb[3]]));
                }
            }
        }
    }
    Tensor::new(out_shape, data)
}

/// Per-input gradients for a broadcast binary op, still in the output shape.
fn binary_backward(
    op: BinOp,
    a: &Tensor,
    b: &Tensor,
    out_shape: &[usize],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n: usize = out_shape.iter().product();
    let mut ga = vec![0.0; n];
    let mut gb = vec![0.0; n];
    let dims = padded_dims(out_shape);
    let sa = padded_bcast_strides(a.shape(), out_shape);
    let sb = padded_bcast_strides(b.shape(), out_shape);
    let (ad, bd) = (a.data(), b.data());
    let mut flat = 0usize;
    for i0 in 0..dims[0] {
        let (a0, b0) = (i0 * sa[0], i0 * sb[0]);
        for i1 in 0..dims[1] {
            let (a1, b1) = (a0 + i1 * sa[1], b0 + i1 * sb[1]);
            for i2 in 0..dims[2] {
                let (a2, b2) = (a1 + i2 * sa[2], b1 + i2 * sb[2]);
                for i3 in 0..dims[3] {
                    let (ai, bi) = (a2 + i3 * sa[3], b2 + i3 * sb[3]);
                    let gv = g[flat];
                    match op {
                        BinOp::Add => {
                            ga[flat] = gv;
                            gb[flat] = gv;
                        }
                        BinOp::Sub => {
                            ga[flat] = gv;
                            gb[flat] = -gv;
                        }
                        BinOp::Mul => {
                            ga[flat] = gv * bd[bi];
                            gb[flat] = gv * ad[ai];
                        }
                        BinOp::Div => {
                            ga[flat] = gv / bd[bi];
                            gb[flat] = -gv * ad[ai] / (bd[bi] * bd[bi]);
                        }
                    }
                    flat += 1;
                }
            }
        }
    }
    (ga, gb)
}

/// Sum `grad` (shaped `from`) down to `to` by collapsing broadcast dims.
fn reduce_grad_to(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let n: usize = to.iter().product();
    let mut out = vec![0.0; n];
    let dims = padded_dims(from);
    let st = padded_bcast_strides(to, from);
    let mut flat = 0usize;
    for i0 in 0..dims[0] {
        let t0 = i0 * st[0];
        for i1 in 0..dims[1] {
            let t1 = t0 + i1 * st[1];
            for i2 in 0..dims[2] {
                let t2 = t1 + i2 * st[2];
                for i3 in 0..dims[3] {
                    out[t2 + i3 * st[3]] += grad[flat];
                    flat += 1;
                }
            }
        }
    }
    out
}

fn matmul_value(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            detail: format!("{:?} x {:?}", a.shape(), b.shape()),
        });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a.data()[i * k + kk];
            if av != 0.0 {
                let brow = &b.data()[kk * n..(kk + 1) * n];
                for j in 0..n {
                    crow[j] += av * brow[j];
                }
            }
        }
    }
    Tensor::new(vec![m, n], c)
}

fn matmul_left_batched_value(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 3 || a.shape()[1] != b.shape()[1] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_left_batched",
            detail: format!("{:?} x {:?}", a.shape(), b.shape()),
        });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (bsz, n) = (b.shape()[0], b.shape()[2]);
    let mut out = vec![0.0; bsz * m * n];
    for i in 0..bsz {
        let bslice = &b.data()[i * k * n..(i + 1) * k * n];
        let oslice = &mut out[i * m * n..(i + 1) * m * n];
        for p in 0..m {
            let orow = &mut oslice[p * n..(p + 1) * n];
            for kk in 0..k {
                let av = a.data()[p * k + kk];
                if av != 0.0 {
                    let brow = &bslice[kk * n..(kk + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
    }
    Tensor::new(vec![bsz, m, n], out)
}

fn pair_contract_value(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 3
        || b.rank() != 3
        || a.shape()[0] != b.shape()[0]
        || a.shape()[2] != b.shape()[2]
    {
        return Err(TensorError::ShapeMismatch {
            op: "pair_contract",
            detail: format!("{:?} with {:?}", a.shape(), b.shape()),
        });
    }
    let (bsz, p, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let q = b.shape()[1];
    let mut out = vec![0.0; p * q];
    for i in 0..bsz {
        for pp in 0..p {
            let arow = &a.data()[(i * p + pp) * k..(i * p + pp + 1) * k];
            let orow = &mut out[pp * q..(pp + 1) * q];
            for qq in 0..q {
                let brow = &b.data()[(i * q + qq) * k..(i * q + qq + 1) * k];
                orow[qq] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    }
    Tensor::new(vec![p, q], out)
}

fn transpose_value(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "transpose",
            detail: format!("expected rank 2, got {:?}", x.shape()),
        });
    }
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = x.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], data)
}

fn conv_check(x: &Tensor, axis: usize, kernel: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    if x.rank() != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "conv1d_axis",
            detail: format!("input must be rank 3, got {:?}", x.shape()),
        });
    }
    if axis > 1 {
        return Err(TensorError::Invalid(format!("conv1d_axis: axis {} out of range", axis)));
    }
    if kernel.rank() != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "conv1d_axis",
            detail: format!("kernel must be rank 3, got {:?}", kernel.shape()),
        });
    }
    let k = kernel.shape()[0];
    if k % 2 == 0 {
        return Err(TensorError::Invalid(format!("conv1d_axis: kernel size {} must be odd", k)));
    }
    let c_in = x.shape()[2];
    if kernel.shape()[1] != c_in {
        return Err(TensorError::ShapeMismatch {
            op: "conv1d_axis",
            detail: format!("kernel C_in {} != input C_in {}", kernel.shape()[1], c_in),
        });
    }
    Ok((x.shape()[0], x.shape()[1], c_in, k, kernel.shape()[2]))
}

fn conv1d_value(x: &Tensor, axis: usize, kernel: &Tensor) -> Result<Tensor> {
    let (a0, a1, c_in, k, c_out) = conv_check(x, axis, kernel)?;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; a0 * a1 * c_out];
    let xd = x.data();
    let kd = kernel.data();
    for i0 in 0..a0 {
        for i1 in 0..a1 {
            let orow = &mut out[(i0 * a1 + i1) * c_out..(i0 * a1 + i1 + 1) * c_out];
            for dk in 0..k {
                let off = dk as isize - pad;
                let (s0, s1) = if axis == 0 {
                    (i0 as isize + off, i1 as isize)
                } else {
                    (i0 as isize, i1 as isize + off)
                };
                if s0 < 0 || s1 < 0 || s0 >= a0 as isize || s1 >= a1 as isize {
                    continue;
                }
                let xrow = &xd[(s0 as usize * a1 + s1 as usize) * c_in..][..c_in];
                let kslab = &kd[dk * c_in * c_out..][..c_in * c_out];
                for ci in 0..c_in {
                    let xv = xrow[ci];
                    if xv != 0.0 {
                        let krow = &kslab[ci * c_out..(ci + 1) * c_out];
                        for co in 0..c_out {
                            orow[co] += xv * krow[co];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![a0, a1, c_out], out)
}

fn conv1d_backward(x: &Tensor, axis: usize, kernel: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (a0, a1, c_in, k, c_out) = conv_check(x, axis, kernel).expect("checked at forward");
    let pad = (k / 2) as isize;
    let mut gx = vec![0.0; a0 * a1 * c_in];
    let mut gk = vec![0.0; k * c_in * c_out];
    let xd = x.data();
    let kd = kernel.data();
    for i0 in 0..a0 {
        for i1 in 0..a1 {
            let grow = &g[(i0 * a1 + i1) * c_out..(i0 * a1 + i1 + 1) * c_out];
            for dk in 0..k {
                let off = dk as isize - pad;
                let (s0, s1) = if axis == 0 {
                    (i0 as isize + off, i1 as isize)
                } else {
                    (i0 as isize, i1 as isize + off)
                };
                if s0 < 0 || s1 < 0 || s0 >= a0 as isize || s1 >= a1 as isize {
                    continue;
                }
                let src = (s0 as usize * a1 + s1 as usize) * c_in;
                let xrow = &xd[src..src + c_in];
                let gxrow = &mut gx[src..src + c_in];
                let kslab = &kd[dk * c_in * c_out..][..c_in * c_out];
                let gkslab = &mut gk[dk * c_in * c_out..][..c_in * c_out];
                for ci in 0..c_in {
                    let krow = &kslab[ci * c_out..(ci + 1) * c_out];
                    let gkrow = &mut gkslab[ci * c_out..(ci + 1) * c_out];
                    let xv = xrow[ci];
                    let mut acc = 0.0;
                    for co in 0..c_out {
                        let gv = grow[co];
                        acc += gv * krow[co];
                        gkrow[co] += gv * xv;
                    }
                    gxrow[ci] += acc;
                }
            }
        }
    }
    (gx, gk)
}

fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let ax = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, ax, inner)
}

fn reduce_sum_value(x: &Tensor, axis: usize, keep: bool) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(TensorError::Invalid(format!(
            "reduce_sum: axis {} out of range for shape {:?}",
            axis,
            x.shape()
        )));
    }
    let (outer, ax, inner) = split3(x.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    let xd = x.data();
    for o in 0..outer {
        for a in 0..ax {
            let src = (o * ax + a) * inner;
            let dst = o * inner;
            for i in 0..inner {
                out[dst + i] += xd[src + i];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    if keep {
        shape[axis] = 1;
    } else {
        shape.remove(axis);
    }
    Tensor::new(shape, out)
}

fn broadcast_to_value(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if x.rank() != shape.len() {
        return Err(TensorError::ShapeMismatch {
            op: "broadcast_to",
            detail: format!("rank mismatch {:?} -> {:?}", x.shape(), shape),
        });
    }
    for (&xs, &os) in x.shape().iter().zip(shape) {
        if xs != os && xs != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                detail: format!("{:?} -> {:?}", x.shape(), shape),
            });
        }
    }
    let dims = padded_dims(shape);
    let sx = padded_bcast_strides(x.shape(), shape);
    let mut data = Vec::with_capacity(shape.iter().product());
    let xd = x.data();
    for i0 in 0..dims[0] {
        let x0 = i0 * sx[0];
        for i1 in 0..dims[1] {
            let x1 = x0 + i1 * sx[1];
            for i2 in 0..dims[2] {
                let x2 = x1 + i2 * sx[2];
                for i3 in 0..dims[3] {
                    data.push(xd[x2 + i3 * sx[3]]);
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), data)
}

fn concat_value(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts[0];
    if axis >= first.rank() {
        return Err(TensorError::Invalid(format!("concat: axis {} out of range", axis)));
    }
    let mut total_ax = 0;
    for p in parts {
        if p.rank() != first.rank() {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                detail: "rank mismatch between parts".into(),
            });
        }
        for d in 0..first.rank() {
            if d != axis && p.shape()[d] != first.shape()[d] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    detail: format!("{:?} vs {:?} on non-concat dim {}", p.shape(), first.shape(), d),
                });
            }
        }
        total_ax += p.shape()[axis];
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total_ax;
    let (outer, _, inner) = split3(&shape, axis);
    let mut data = vec![0.0; outer * total_ax * inner];
    let mut offset = 0;
    for p in parts {
        let pax = p.shape()[axis];
        for o in 0..outer {
            for a in 0..pax {
                let src = (o * pax + a) * inner;
                let dst = (o * total_ax + offset + a) * inner;
                data[dst..dst + inner].copy_from_slice(&p.data()[src..src + inner]);
            }
        }
        offset += pax;
    }
    Tensor::new(shape, data)
}
