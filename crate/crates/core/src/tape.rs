//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order, so `backward` is a single
//! reverse sweep. Tapes are meant to be rebuilt for each training step.
//!
//! Stop-gradient outputs and discrete choices (argmin indices) can be recorded
//! on one tape and replayed on another. Finite-difference checks use this to
//! evaluate the exact surrogate that the backward pass differentiates.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Conv1d { x: Var, w: Var, stride: usize, pad: usize, dilation: usize },
    ConvT1d { x: Var, w: Var, stride: usize, pad: usize },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sin(Var),
    Cos(Var),
    Huber(Var, f64),
    ClampMin(Var, f64),
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(f64, f64)> },
    Softmax(Var),
    LogSoftmax(Var),
    GatherRows { table: Var, idx: Vec<usize> },
    Pick { x: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Mse(Var, Var),
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    StopGrad,
    Cumsum { x: Var, axis: usize },
    Reshape(Var),
    PairwiseSqDist(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Values captured from a recording tape: stop-gradient outputs and discrete
/// index choices, in the order they were produced.
#[derive(Debug, Clone, Default)]
pub struct Frozen {
    values: Vec<Tensor>,
    picks: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Default)]
enum FreezeMode {
    #[default]
    Off,
    Record(Frozen),
    Replay {
        frozen: Rc<Frozen>,
        value_cursor: usize,
        pick_cursor: usize,
    },
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    freeze: FreezeMode,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` was not reached.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

enum Bcast {
    Same,
    /// `b` repeats over the leading axes of `a` (includes scalar `b`).
    RepeatB(usize),
    /// `a` repeats over the leading axes of `b`.
    RepeatA(usize),
    General(Vec<usize>, Vec<usize>),
}

impl Bcast {
    #[inline]
    fn map(&self, i: usize) -> (usize, usize) {
        match self {
            Bcast::Same => (i, i),
            Bcast::RepeatB(n) => (i, i % n),
            Bcast::RepeatA(n) => (i % n, i),
            Bcast::General(ia, ib) => (ia[i], ib[i]),
        }
    }
}

fn strip_leading_ones(s: &[usize]) -> &[usize] {
    let k = s.iter().take_while(|&&d| d == 1).count();
    &s[k..]
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Bcast)> {
    if a == b {
        return Ok((a.to_vec(), Bcast::Same));
    }
    let (sa, sb) = (strip_leading_ones(a), strip_leading_ones(b));
    if a.len() >= b.len() && a.ends_with(sb) {
        return Ok((a.to_vec(), Bcast::RepeatB(numel(sb))));
    }
    if b.len() >= a.len() && b.ends_with(sa) {
        return Ok((b.to_vec(), Bcast::RepeatA(numel(sa))));
    }
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut p = vec![1; rank - s.len()];
        p.extend_from_slice(s);
        p
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x == y || y == 1 {
            out.push(x);
        } else if x == 1 {
            out.push(y);
        } else {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    let strides = |p: &[usize]| {
        let mut st = vec![0; rank];
        let mut acc = 1;
        for k in (0..rank).rev() {
            st[k] = if p[k] == 1 { 0 } else { acc };
            acc *= p[k];
        }
        st
    };
    let (st_a, st_b) = (strides(&pa), strides(&pb));
    let n = numel(&out);
    let mut ia = Vec::with_capacity(n);
    let mut ib = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        ia.push(idx.iter().zip(&st_a).map(|(i, s)| i * s).sum());
        ib.push(idx.iter().zip(&st_b).map(|(i, s)| i * s).sum());
        for k in (0..rank).rev() {
            idx[k] += 1;
            if idx[k] < out[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    Ok((out, Bcast::General(ia, ib)))
}

/// (outer, axis length, inner) decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

pub(crate) fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    (len + 2 * pad).checked_sub(span).map(|v| v / stride + 1)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = libm::exp(v - m);
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = x.iter().map(|&v| libm::exp(v - m)).sum();
    let lse = m + libm::log(z);
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Numerically stable softmax of a slice (max-subtracted).
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    softmax_row(x, &mut out);
    out
}

/// Numerically stable log-softmax of a slice.
pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    log_softmax_row(x, &mut out);
    out
}

/// Huber penalty: quadratic within `delta`, linear beyond.
pub fn huber(x: f64, delta: f64) -> f64 {
    let a = libm::fabs(x);
    if a <= delta {
        0.5 * x * x
    } else {
        delta * (a - 0.5 * delta)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape that records stop-gradient values and discrete choices for replay.
    pub fn recording() -> Self {
        Self {
            nodes: Vec::new(),
            freeze: FreezeMode::Record(Frozen::default()),
        }
    }

    /// Tape whose stop-gradient outputs and discrete choices are taken from a
    /// previous recording instead of being recomputed.
    pub fn replaying(frozen: Rc<Frozen>) -> Self {
        Self {
            nodes: Vec::new(),
            freeze: FreezeMode::Replay {
                frozen,
                value_cursor: 0,
                pick_cursor: 0,
            },
        }
    }

    /// Captured values of a recording tape (empty otherwise).
    pub fn frozen(&self) -> Frozen {
        match &self.freeze {
            FreezeMode::Record(f) => f.clone(),
            _ => Frozen::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element var.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::Const | Op::StopGrad => false,
            other => inputs(other).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, "leaf")
            .unwrap_or_else(|_| panic!("non-finite leaf"))
    }

    pub fn try_leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "leaf")
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Const, "constant")
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(value))
    }

    /// Discrete choice that is frozen under replay (e.g. quantizer indices).
    pub fn discrete(&mut self, compute: impl FnOnce() -> Vec<usize>) -> Vec<usize> {
        match &mut self.freeze {
            FreezeMode::Off => compute(),
            FreezeMode::Record(f) => {
                let v = compute();
                f.picks.push(v.clone());
                v
            }
            FreezeMode::Replay {
                frozen,
                pick_cursor,
                ..
            } => {
                let v = frozen.picks[*pick_cursor].clone();
                *pick_cursor += 1;
                v
            }
        }
    }

    /// Identity in the forward pass, zero gradient in the backward pass.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let value = match &mut self.freeze {
            FreezeMode::Off => self.nodes[x.0].value.clone(),
            FreezeMode::Record(f) => {
                let v = self.nodes[x.0].value.clone();
                f.values.push(v.clone());
                v
            }
            FreezeMode::Replay {
                frozen,
                value_cursor,
                ..
            } => {
                let v = frozen.values[*value_cursor].clone();
                *value_cursor += 1;
                v
            }
        };
        self.push(value, Op::StopGrad, "stop_gradient")
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (shape, plan) = broadcast(name, sa, sb)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n = numel(&shape);
        let data: Vec<f64> = match plan {
            Bcast::Same => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n)
                .map(|i| {
                    let (ia, ib) = plan.map(i);
                    f(va[ia], vb[ib])
                })
                .collect(),
        };
        self.push(Tensor::new(&shape, data)?, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&t| f(t)).collect();
        let out = Tensor::new(v.shape(), data)?;
        self.push(out, op, name)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, "scale", |t| t * c, Op::Scale(x, c))
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, "offset", |t| t + c, Op::Offset(x))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// Under a recording or replaying tape the active set is a recorded
    /// discrete choice, so differencing never straddles a kink.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        if matches!(self.freeze, FreezeMode::Off) {
            return self.unary(x, "relu", |t| if t > 0.0 { t } else { 0.0 }, Op::Relu(x));
        }
        let v = self.value(x).clone();
        let active = self.discrete(|| v.data().iter().map(|&t| (t > 0.0) as usize).collect());
        let data = v.data().iter().zip(&active).map(|(&t, &a)| if a == 1 { t } else { 0.0 }).collect();
        self.push(Tensor::new(v.shape(), data)?, Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "sigmoid", sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "exp", libm::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "log", libm::log, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "sqrt", libm::sqrt, Op::Sqrt(x))
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "sin", libm::sin, Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "cos", libm::cos, Op::Cos(x))
    }

    /// Elementwise Huber function with threshold `delta`.
    pub fn huber(&mut self, x: Var, delta: f64) -> Result<Var> {
        if !(delta > 0.0) {
            return Err(invalid!("huber delta must be positive, got {delta}"));
        }
        self.unary(x, "huber", |t| huber(t, delta), Op::Huber(x, delta))
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.unary(x, "clamp_min", |t| t.max(floor), Op::ClampMin(x, floor))
    }

    /// `a[..., M, K] @ b[K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (k, n) = (sb[0], sb[1]);
        let rows = numel(&sa) / k.max(1);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let orow = &mut out[r * n..(r + 1) * n];
            for (kk, &x) in va[r * k..(r + 1) * k].iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                for (o, &w) in orow.iter_mut().zip(&vb[kk * n..(kk + 1) * n]) {
                    *o += x * w;
                }
            }
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), "matmul")
    }

    /// Batched product `a[B, M, K] @ b[B, K, N]`, or `a @ b^T` with
    /// `b[B, N, K]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::ShapeMismatch {
            op: "bmm",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; bt * m * n];
        for bi in 0..bt {
            let ab = &va[bi * m * k..(bi + 1) * m * k];
            let bb = &vb[bi * k * n..(bi + 1) * k * n];
            let ob = &mut out[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                let arow = &ab[i * k..(i + 1) * k];
                let orow = &mut ob[i * n..(i + 1) * n];
                if trans_b {
                    for (j, o) in orow.iter_mut().enumerate() {
                        *o = arow.iter().zip(&bb[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum();
                    }
                } else {
                    for (kk, &x) in arow.iter().enumerate() {
                        for (o, &y) in orow.iter_mut().zip(&bb[kk * n..(kk + 1) * n]) {
                            *o += x * y;
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::new(&[bt, m, n], out)?,
            Op::Bmm { a, b, trans_b },
            "bmm",
        )
    }

    /// 1-D convolution over time. `x[B, L, Cin]`, `w[K, Cin, Cout]`, zero padding.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize, dilation: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] || stride == 0 || dilation == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (b, l, cin) = (sx[0], sx[1], sx[2]);
        let (k, cout) = (sw[0], sw[2]);
        let lout = conv_out_len(l, k, stride, pad, dilation)
            .ok_or_else(|| invalid!("conv1d input length {l} too short for kernel {k}"))?;
        let (vx, vw) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; b * lout * cout];
        for bi in 0..b {
            for t in 0..lout {
                let orow = &mut out[(bi * lout + t) * cout..(bi * lout + t + 1) * cout];
                for kk in 0..k {
                    let src = (t * stride + kk * dilation) as isize - pad as isize;
                    if src < 0 || src as usize >= l {
                        continue;
                    }
                    let xrow = &vx[(bi * l + src as usize) * cin..(bi * l + src as usize + 1) * cin];
                    let wk = &vw[kk * cin * cout..(kk + 1) * cin * cout];
                    for (ci, &xv) in xrow.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        for (o, &wv) in orow.iter_mut().zip(&wk[ci * cout..(ci + 1) * cout]) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::new(&[b, lout, cout], out)?,
            Op::Conv1d {
                x,
                w,
                stride,
                pad,
                dilation,
            },
            "conv1d",
        )
    }

    /// Transposed 1-D convolution (adjoint of a strided conv).
    /// Output length is `(L - 1) * stride - 2 * pad + K`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose1d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (b, l, cin) = (sx[0], sx[1], sx[2]);
        let (k, cout) = (sw[0], sw[2]);
        let lout = ((l - 1) * stride + k)
            .checked_sub(2 * pad)
            .filter(|&v| v > 0)
            .ok_or_else(|| invalid!("conv_transpose1d produces empty output"))?;
        let (vx, vw) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; b * lout * cout];
        for bi in 0..b {
            for t in 0..l {
                let xrow = &vx[(bi * l + t) * cin..(bi * l + t + 1) * cin];
                for kk in 0..k {
                    let dst = (t * stride + kk) as isize - pad as isize;
                    if dst < 0 || dst as usize >= lout {
                        continue;
                    }
                    let d = dst as usize;
                    let orow = &mut out[(bi * lout + d) * cout..(bi * lout + d + 1) * cout];
                    let wk = &vw[kk * cin * cout..(kk + 1) * cin * cout];
                    for (ci, &xv) in xrow.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        for (o, &wv) in orow.iter_mut().zip(&wk[ci * cout..(ci + 1) * cout]) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::new(&[b, lout, cout], out)?,
            Op::ConvT1d { x, w, stride, pad },
            "conv_transpose1d",
        )
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let vx = self.value(x);
        let (g, bb) = (self.value(gain).data(), self.value(bias).data());
        let mut out = Vec::with_capacity(vx.numel());
        let mut stats = Vec::new();
        for row in vx.rows() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / libm::sqrt(var + eps);
            stats.push((mean, rstd));
            for (j, &v) in row.iter().enumerate() {
                out.push((v - mean) * rstd * g[j] + bb[j]);
            }
        }
        let shape = vx.shape().to_vec();
        self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            "layer_norm",
        )
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let c = v.last_dim();
        let mut out = vec![0.0; v.numel()];
        for (row, o) in v.rows().zip(out.chunks_exact_mut(c)) {
            softmax_row(row, o);
        }
        let shape = v.shape().to_vec();
        self.push(Tensor::new(&shape, out)?, Op::Softmax(x), "softmax")
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let c = v.last_dim();
        let mut out = vec![0.0; v.numel()];
        for (row, o) in v.rows().zip(out.chunks_exact_mut(c)) {
            log_softmax_row(row, o);
        }
        let shape = v.shape().to_vec();
        self.push(Tensor::new(&shape, out)?, Op::LogSoftmax(x), "log_softmax")
    }

    /// Rows of `table[V, d]` selected by `idx`, giving `[idx.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(invalid!("gather_rows expects a rank-2 table"));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= v {
                return Err(Error::IndexOutOfRange { index: i, len: v });
            }
            out.extend_from_slice(t.row(i));
        }
        self.push(
            Tensor::new(&[idx.len(), d], out)?,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            "gather_rows",
        )
    }

    /// `out[r] = x[r, idx[r]]` over the rows of `x` (last axis indexed).
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let c = v.last_dim();
        let rows = v.numel() / c.max(1);
        if rows != idx.len() {
            return Err(Error::ShapeMismatch {
                op: "pick",
                lhs: v.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let mut out = Vec::with_capacity(rows);
        for (r, &i) in idx.iter().enumerate() {
            if i >= c {
                return Err(Error::IndexOutOfRange { index: i, len: c });
            }
            out.push(v.data()[r * c + i]);
        }
        self.push(
            Tensor::new(&[rows], out)?,
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            "pick",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(Error::Empty("mean"));
        }
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(invalid!("sum_axis: axis {axis} out of range for {shape:?}"));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &v[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        self.push(
            Tensor::new(&new_shape, out)?,
            Op::SumAxis { x, axis },
            "sum_axis",
        )
    }

    /// Mean of squared differences between same-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        if va.numel() == 0 {
            return Err(Error::Empty("mse"));
        }
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let m = s / va.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mse(a, b), "mse")
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or(Error::Empty("concat"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(invalid!("concat: axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(k, (a, b))| k == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            "concat",
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(invalid!("slice {start}..{end} on axis {axis} of {shape:?}"));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value(x).data();
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            out.extend_from_slice(&v[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = w;
        self.push(
            Tensor::new(&new_shape, out)?,
            Op::Slice { x, axis, start },
            "slice",
        )
    }

    /// Inclusive running sum along `axis`.
    pub fn cumsum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(invalid!("cumsum: axis {axis} out of range for {shape:?}"));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = self.value(x).data().to_vec();
        for o in 0..outer {
            for a in 1..len {
                for i in 0..inner {
                    out[(o * len + a) * inner + i] += out[(o * len + a - 1) * inner + i];
                }
            }
        }
        self.push(Tensor::new(&shape, out)?, Op::Cumsum { x, axis }, "cumsum")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push(v, Op::Reshape(x), "reshape")
    }

    /// `out[i, j] = ||a_i - b_j||^2` for `a[n, d]`, `b[m, d]`.
    pub fn pairwise_sqdist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "pairwise_sqdist",
                lhs: sa,
                rhs: sb,
            });
        }
        let (n, m, d) = (sa[0], sb[0], sa[1]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ai = &va[i * d..(i + 1) * d];
            for j in 0..m {
                out[i * m + j] = ai
                    .iter()
                    .zip(&vb[j * d..(j + 1) * d])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
            }
        }
        self.push(
            Tensor::new(&[n, m], out)?,
            Op::PairwiseSqDist(a, b),
            "pairwise_sqdist",
        )
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(invalid!(
                "backward requires a scalar root, got shape {:?}",
                rv.shape()
            ));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Const | Op::StopGrad => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (_, plan) = broadcast("add", shp(*a), shp(*b))?;
                if let Some(ga) = self.buf(grads, *a) {
                    for (k, &gk) in g.iter().enumerate() {
                        ga[plan.map(k).0] += gk;
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for (k, &gk) in g.iter().enumerate() {
                        gb[plan.map(k).1] += sign * gk;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (_, plan) = broadcast("mul", shp(*a), shp(*b))?;
                let (va, vb) = (val(*a), val(*b));
                if let Some(ga) = self.buf(grads, *a) {
                    for (k, &gk) in g.iter().enumerate() {
                        let (ia, ib) = plan.map(k);
                        ga[ia] += gk * vb[ib];
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for (k, &gk) in g.iter().enumerate() {
                        let (ia, ib) = plan.map(k);
                        gb[ib] += gk * va[ia];
                    }
                }
            }
            Op::Div(a, b) => {
                let (_, plan) = broadcast("div", shp(*a), shp(*b))?;
                let (va, vb) = (val(*a), val(*b));
                if let Some(ga) = self.buf(grads, *a) {
                    for (k, &gk) in g.iter().enumerate() {
                        let (ia, ib) = plan.map(k);
                        ga[ia] += gk / vb[ib];
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for (k, &gk) in g.iter().enumerate() {
                        let (ia, ib) = plan.map(k);
                        gb[ib] -= gk * va[ia] / (vb[ib] * vb[ib]);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.buf(grads, *x) {
                    for (d, &gk) in gx.iter_mut().zip(g) {
                        *d += gk * c;
                    }
                }
            }
            Op::Offset(x) | Op::Reshape(x) => {
                if let Some(gx) = self.buf(grads, *x) {
                    for (d, &gk) in gx.iter_mut().zip(g) {
                        *d += gk;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let sb = shp(*b);
                let (k, n) = (sb[0], sb[1]);
                let rows = g.len() / n.max(1);
                let (va, vb) = (val(*a), val(*b));
                if let Some(ga) = self.buf(grads, *a) {
                    for r in 0..rows {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            ga[r * k + kk] += grow
                                .iter()
                                .zip(&vb[kk * n..(kk + 1) * n])
                                .map(|(x, y)| x * y)
                                .sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for r in 0..rows {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let x = va[r * k + kk];
                            if x == 0.0 {
                                continue;
                            }
                            for (d, &gv) in gb[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                                *d += x * gv;
                            }
                        }
                    }
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = shp(*a);
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (va, vb) = (val(*a), val(*b));
                if let Some(ga) = self.buf(grads, *a) {
                    for bi in 0..bt {
                        for i in 0..m {
                            let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                            for kk in 0..k {
                                let mut s = 0.0;
                                for (j, &gv) in grow.iter().enumerate() {
                                    let bv = if *trans_b {
                                        vb[(bi * n + j) * k + kk]
                                    } else {
                                        vb[(bi * k + kk) * n + j]
                                    };
                                    s += gv * bv;
                                }
                                ga[(bi * m + i) * k + kk] += s;
                            }
                        }
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for bi in 0..bt {
                        for i in 0..m {
                            let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                            let arow = &va[(bi * m + i) * k..(bi * m + i + 1) * k];
                            for (kk, &x) in arow.iter().enumerate() {
                                for (j, &gv) in grow.iter().enumerate() {
                                    let idx = if *trans_b {
                                        (bi * n + j) * k + kk
                                    } else {
                                        (bi * k + kk) * n + j
                                    };
                                    gb[idx] += x * gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                stride,
                pad,
                dilation,
            } => {
                let (sx, sw) = (shp(*x), shp(*w));
                let (b, l, cin) = (sx[0], sx[1], sx[2]);
                let (k, cout) = (sw[0], sw[2]);
                let lout = node.value.shape()[1];
                let (vx, vw) = (val(*x), val(*w));
                let taps = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for bi in 0..b {
                        for t in 0..lout {
                            for kk in 0..k {
                                let src = (t * stride + kk * dilation) as isize - *pad as isize;
                                if src >= 0 && (src as usize) < l {
                                    f(bi * lout + t, bi * l + src as usize, kk);
                                }
                            }
                        }
                    }
                };
                if let Some(gx) = self.buf(grads, *x) {
                    taps(&mut |orow, xrow, kk| {
                        let grow = &g[orow * cout..(orow + 1) * cout];
                        let wk = &vw[kk * cin * cout..(kk + 1) * cin * cout];
                        for ci in 0..cin {
                            gx[xrow * cin + ci] += grow
                                .iter()
                                .zip(&wk[ci * cout..(ci + 1) * cout])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                    });
                }
                if let Some(gw) = self.buf(grads, *w) {
                    taps(&mut |orow, xrow, kk| {
                        let grow = &g[orow * cout..(orow + 1) * cout];
                        let xr = &vx[xrow * cin..(xrow + 1) * cin];
                        for (ci, &xv) in xr.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let base = (kk * cin + ci) * cout;
                            for (d, &gv) in gw[base..base + cout].iter_mut().zip(grow) {
                                *d += xv * gv;
                            }
                        }
                    });
                }
            }
            Op::ConvT1d { x, w, stride, pad } => {
                let (sx, sw) = (shp(*x), shp(*w));
                let (b, l, cin) = (sx[0], sx[1], sx[2]);
                let (k, cout) = (sw[0], sw[2]);
                let lout = node.value.shape()[1];
                let (vx, vw) = (val(*x), val(*w));
                let taps = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for bi in 0..b {
                        for t in 0..l {
                            for kk in 0..k {
                                let dst = (t * stride + kk) as isize - *pad as isize;
                                if dst >= 0 && (dst as usize) < lout {
                                    f(bi * lout + dst as usize, bi * l + t, kk);
                                }
                            }
                        }
                    }
                };
                if let Some(gx) = self.buf(grads, *x) {
                    taps(&mut |orow, xrow, kk| {
                        let grow = &g[orow * cout..(orow + 1) * cout];
                        let wk = &vw[kk * cin * cout..(kk + 1) * cin * cout];
                        for ci in 0..cin {
                            gx[xrow * cin + ci] += grow
                                .iter()
                                .zip(&wk[ci * cout..(ci + 1) * cout])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                    });
                }
                if let Some(gw) = self.buf(grads, *w) {
                    taps(&mut |orow, xrow, kk| {
                        let grow = &g[orow * cout..(orow + 1) * cout];
                        let xr = &vx[xrow * cin..(xrow + 1) * cin];
                        for (ci, &xv) in xr.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let base = (kk * cin + ci) * cout;
                            for (d, &gv) in gw[base..base + cout].iter_mut().zip(grow) {
                                *d += xv * gv;
                            }
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let vx = val(*x);
                if let Some(gx) = self.buf(grads, *x) {
                    for ((d, &gk), &xv) in gx.iter_mut().zip(g).zip(vx) {
                        if xv > 0.0 {
                            *d += gk;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.buf(grads, *x) {
                    for ((d, &gk), &yv) in gx.iter_mut().zip(g).zip(y) {
                        *d += gk * yv * (1.0 - yv);
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = self.buf(grads, *x) {
                    for ((d, &gk), &yv) in gx.iter_mut().zip(g).zip(y) {
                        *d += gk * yv;
                    }
                }
            }
            Op::Log(x) => {
                let vx = val(*x);
                if let Some(gx) = self.buf(grads, *x) {
                    for ((d, &gk), &xv) in gx.iter_mut().zip(g).zip(vx) {
                        *d += gk / xv;
                    }
                }
            }
            Op::Sqrt(x) => {
                if let Some(gx) = self.buf(grads, *x) {
                    for ((d, &gk), &yv) in gx.iter_mut().zip(g).zip(y) {
                        *d += gk / (2.0 * yv);
                    }
                }
            }
            Op::Sin(x) => {
                let vx = val(*x);
                if let Some(gx) = self.buf(grads, *x) {
                    for ((d, &gk), &xv) in gx.iter_mut().zip(g).zip(vx) {
                        *d += gk * libm::cos(xv);
                    }
                }
            }
            Op::Cos(x) => {
                let vx = val(*x);
                if let Some(gx) = self.buf(grads, *x) {
                    for ((d, &gk), &xv) in gx.iter_mut().zip(g).zip(vx) {
                        *d -= gk * libm::sin(xv);
                    }
                }
            }
            Op::Huber(x, delta) => {
                let vx = val(*x);
                if let Some(gx) = self.buf(grads, *x) {
                    for ((d, &gk), &xv) in gx.iter_mut().zip(g).zip(vx) {
                        let slope = if libm::fabs(xv) <= *delta {
                            xv
                        } else {
                            delta * xv.signum()
                        };
                        *d += gk * slope;
                    }
                }
            }
            Op::ClampMin(x, floor) => {
                let vx = val(*x);
                if let Some(gx) = self.buf(grads, *x) {
                    for ((d, &gk), &xv) in gx.iter_mut().zip(g).zip(vx) {
                        if xv > *floor {
                            *d += gk;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let c = self.nodes[x.0].value.last_dim();
                let vx = val(*x);
                let gv = val(*gain);
                let xhat = |r: usize, j: usize| (vx[r * c + j] - stats[r].0) * stats[r].1;
                if let Some(gg) = self.buf(grads, *gain) {
                    for r in 0..stats.len() {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat(r, j);
                        }
                    }
                }
                if let Some(gb) = self.buf(grads, *bias) {
                    for r in 0..stats.len() {
                        for j in 0..c {
                            gb[j] += g[r * c + j];
                        }
                    }
                }
                if let Some(gx) = self.buf(grads, *x) {
                    let cf = c as f64;
                    for (r, &(_, rstd)) in stats.iter().enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dxh = g[r * c + j] * gv[j];
                            s1 += dxh;
                            s2 += dxh * xhat(r, j);
                        }
                        for j in 0..c {
                            let dxh = g[r * c + j] * gv[j];
                            gx[r * c + j] += rstd / cf * (cf * dxh - s1 - xhat(r, j) * s2);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let c = node.value.last_dim();
                if let Some(gx) = self.buf(grads, *x) {
                    for ((yr, gr), dr) in y.chunks_exact(c).zip(g.chunks_exact(c)).zip(gx.chunks_exact_mut(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gk) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gk - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let c = node.value.last_dim();
                if let Some(gx) = self.buf(grads, *x) {
                    for ((yr, gr), dr) in y.chunks_exact(c).zip(g.chunks_exact(c)).zip(gx.chunks_exact_mut(c)) {
                        let gs: f64 = gr.iter().sum();
                        for ((d, &yv), &gk) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += gk - libm::exp(yv) * gs;
                        }
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                let d = shp(*table)[1];
                if let Some(gt) = self.buf(grads, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Pick { x, idx } => {
                let c = self.nodes[x.0].value.last_dim();
                if let Some(gx) = self.buf(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        gx[r * c + i] += g[r];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.buf(grads, *x) {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.buf(grads, *x) {
                    let s = g[0] / gx.len() as f64;
                    for d in gx.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = split_axis(shp(*x), *axis);
                if let Some(gx) = self.buf(grads, *x) {
                    for o in 0..outer {
                        for a in 0..len {
                            for i in 0..inner {
                                gx[(o * len + a) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let s = 2.0 * g[0] / va.len() as f64;
                if let Some(ga) = self.buf(grads, *a) {
                    for ((d, x), y) in ga.iter_mut().zip(va).zip(vb) {
                        *d += s * (x - y);
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for ((d, x), y) in gb.iter_mut().zip(va).zip(vb) {
                        *d -= s * (x - y);
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut off = 0;
                for &v in xs {
                    let len = shp(v)[*axis];
                    if let Some(gv) = self.buf(grads, v) {
                        for o in 0..outer {
                            let src = &g[(o * total + off) * inner..(o * total + off + len) * inner];
                            for (d, s) in gv[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    off += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = split_axis(shp(*x), *axis);
                let w = node.value.shape()[*axis];
                if let Some(gx) = self.buf(grads, *x) {
                    for o in 0..outer {
                        let dst = &mut gx[(o * len + start) * inner..(o * len + start + w) * inner];
                        for (d, s) in dst.iter_mut().zip(&g[o * w * inner..(o + 1) * w * inner]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Cumsum { x, axis } => {
                let (outer, len, inner) = split_axis(shp(*x), *axis);
                if let Some(gx) = self.buf(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut acc = 0.0;
                            for a in (0..len).rev() {
                                acc += g[(o * len + a) * inner + i];
                                gx[(o * len + a) * inner + i] += acc;
                            }
                        }
                    }
                }
            }
            Op::PairwiseSqDist(a, b) => {
                let (sa, sb) = (shp(*a), shp(*b));
                let (n, d, m) = (sa[0], sa[1], sb[0]);
                let (va, vb) = (val(*a), val(*b));
                if let Some(ga) = self.buf(grads, *a) {
                    for i in 0..n {
                        for j in 0..m {
                            let c = 2.0 * g[i * m + j];
                            for k in 0..d {
                                ga[i * d + k] += c * (va[i * d + k] - vb[j * d + k]);
                            }
                        }
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for i in 0..n {
                        for j in 0..m {
                            let c = 2.0 * g[i * m + j];
                            for k in 0..d {
                                gb[j * d + k] -= c * (va[i * d + k] - vb[j * d + k]);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Const | Op::StopGrad => Vec::new(),
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::MatMul(a, b)
        | Op::Mse(a, b)
        | Op::PairwiseSqDist(a, b)
        | Op::Bmm { a, b, .. } => vec![*a, *b],
        Op::Conv1d { x, w, .. } | Op::ConvT1d { x, w, .. } => vec![*x, *w],
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::Scale(x, _)
        | Op::Offset(x)
        | Op::Relu(x)
        | Op::Sigmoid(x)
        | Op::Exp(x)
        | Op::Log(x)
        | Op::Sqrt(x)
        | Op::Sin(x)
        | Op::Cos(x)
        | Op::Huber(x, _)
        | Op::ClampMin(x, _)
        | Op::Softmax(x)
        | Op::LogSoftmax(x)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::Reshape(x)
        | Op::SumAxis { x, .. }
        | Op::Slice { x, .. }
        | Op::Cumsum { x, .. }
        | Op::Pick { x, .. } => vec![*x],
        Op::GatherRows { table, .. } => vec![*table],
        Op::Concat { xs, .. } => xs.clone(),
    }
}
