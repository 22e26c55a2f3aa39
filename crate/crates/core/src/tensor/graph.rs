use alloc::vec;
use alloc::vec::Vec;

use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Lower bound applied to the argument of [`Graph::log`].
///
/// The clamp sits outside the gradient path: the derivative is taken as
/// `1 / max(x, LOG_CLAMP)`, so a clamped entry still passes gradient.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node recorded on a [`Graph`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Affine { x: Var, w: Var, b: Var },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum { input: Var, axis: usize },
    Mean { input: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    Warp { image: Var, flow: Var },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of tensor operations supporting one reverse pass.
///
/// Nodes are stored in creation order, so every op's inputs precede it.
/// Ops whose inputs carry no gradient are stored as constants and skipped
/// by [`backward`](Self::backward).
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn finite(op: &'static str, data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { op, index }),
        None => Ok(()),
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

/// (outer, axis length, inner) split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        finite(name, &data)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, requires_grad))
    }

    /// Copies `t` onto the graph as a leaf. The leaf requires grad exactly
    /// when `t` does.
    pub fn input(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.zero_grad();
        let rg = t.requires_grad();
        self.push(value, Op::Leaf, rg)
    }

    /// Copies `t` as a trainable leaf regardless of its own flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.zero_grad();
        value.set_requires_grad(true);
        self.push(value, Op::Leaf, true)
    }

    /// Copies `t` as a leaf that never receives gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.zero_grad();
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a one-element node.
    pub fn item(&self, v: Var) -> Result<f64> {
        self.value(v).item().ok_or_else(|| Error::NonScalarLoss {
            shape: self.shape(v).to_vec(),
        })
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(name, sa, sb));
        }
        let shape = sa.to_vec();
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        self.record(name, shape, data, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        self.record(name, shape, data, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("scale", a, |x| s * x, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        self.record("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    /// `x W + b` with `x: [batch, in]`, `W: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(mismatch("affine", sx, sw));
        }
        if sb != [sw[1]] {
            return Err(mismatch("affine bias", sw, sb));
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        let mut out = matmul_raw(self.data(x), self.data(w), m, k, n);
        let bias = self.data(b);
        for row in out.chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        self.record("affine", vec![m, n], out, Op::Affine { x, w, b }, &[x, w, b])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, libm::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, libm::exp, Op::Exp(a))
    }

    /// Natural log with the argument clamped at [`LOG_CLAMP`].
    pub fn log(&mut self, a: Var) -> Result<Var> {
        finite("log input", self.data(a))?;
        self.unary("log", a, |x| libm::log(x.max(LOG_CLAMP)), Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, libm::fabs, Op::Abs(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        finite("softmax input", self.data(a))?;
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or_else(|| mismatch("softmax", &shape, &[]))?;
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - m);
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.record("softmax", shape, out, Op::Softmax(a), &[a])
    }

    /// Log-softmax over the last axis, computed with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        finite("log_softmax input", self.data(a))?;
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or_else(|| mismatch("log_softmax", &shape, &[]))?;
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&v| libm::exp(v - m)).sum();
            let lse = m + libm::log(s);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.record("log_softmax", shape, out, Op::LogSoftmax(a), &[a])
    }

    fn reduce(&mut self, name: &'static str, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(mismatch(name, &shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            let inv = 1.0 / len as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let op = if mean { Op::Mean { input: a, axis } } else { Op::Sum { input: a, axis } };
        self.record(name, new_shape, out, op, &[a])
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce("sum", a, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce("mean", a, axis, true)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.record("sum_all", Vec::new(), vec![s], Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.record("mean_all", Vec::new(), vec![s], Op::MeanAll(a), &[a])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(Error::Empty { what: "concat inputs" })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(mismatch("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same_rest = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !same_rest {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let block = len * inner;
                out.extend_from_slice(&self.data(v)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.record(
            "concat",
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(mismatch("slice", &shape, &[axis, start, len]));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        self.record("slice", new_shape, out, Op::Slice { input: a, axis, start }, &[a])
    }

    /// Column `j` of a rank-2 node, as a rank-1 node.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let s = self.slice(a, 1, j, 1)?;
        let rows = self.shape(a)[0];
        self.reshape(s, vec![rows])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(a).len() || shape.contains(&0) {
            return Err(mismatch("reshape", self.shape(a), &shape));
        }
        let data = self.data(a).to_vec();
        self.record("reshape", shape, data, Op::Reshape(a), &[a])
    }

    /// Bilinear resampling of `image: [B, H, W, C]` at the absolute source
    /// coordinates in `flow: [B, H, W, 2]` (channel 0 is x, channel 1 is y).
    ///
    /// Each output pixel sums its four floor/ceil neighbours weighted by
    /// `(1 - |F_y - h|)(1 - |F_x - w|)`; neighbours outside the image add
    /// nothing.
    pub fn bilinear_warp(&mut self, image: Var, flow: Var) -> Result<Var> {
        let (si, sf) = (self.shape(image), self.shape(flow));
        if si.len() != 4 || sf.len() != 4 || sf[3] != 2 || si[..3] != sf[..3] {
            return Err(mismatch("bilinear_warp", si, sf));
        }
        finite("bilinear_warp flow", self.data(flow))?;
        let (b, h, w, c) = (si[0], si[1], si[2], si[3]);
        let shape = si.to_vec();
        let img = self.data(image);
        let fl = self.data(flow);
        let mut out = vec![0.0; b * h * w * c];
        for n in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let p = (n * h + i) * w + j;
                    let taps = neighbours(fl[2 * p], fl[2 * p + 1], h, w);
                    let dst = &mut out[p * c..(p + 1) * c];
                    for tap in taps.iter().flatten() {
                        if tap.weight == 0.0 {
                            continue;
                        }
                        let src = ((n * h + tap.y) * w + tap.x) * c;
                        for (ch, o) in dst.iter_mut().enumerate() {
                            *o += img[src + ch] * tap.weight;
                        }
                    }
                }
            }
        }
        self.record("bilinear_warp", shape, out, Op::Warp { image, flow }, &[image, flow])
    }

    /// Populates gradients of `loss` with respect to every node that
    /// requires grad. A second call without [`reset_grads`](Self::reset_grads)
    /// is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: node.value.shape().to_vec(),
            });
        }
        if !node.requires_grad {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    /// Clears gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Gradient of the last backward loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `v` into `t.grad` (zeros if `v` was not
    /// reached by the backward pass).
    pub fn write_grad(&self, v: Var, t: &mut Tensor) -> Result<()> {
        let g = match self.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.value(v).len()],
        };
        t.set_grad(g)
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = nodes[idx].value.data();
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let n = nodes[v.0].value.len();
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
                f(buf);
            }
        };
        match &nodes[idx].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| add_into(d, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                acc(a, &mut |d| {
                    for ((x, gi), bi) in d.iter_mut().zip(g).zip(vb) {
                        *x += gi * bi;
                    }
                });
                acc(b, &mut |d| {
                    for ((x, gi), ai) in d.iter_mut().zip(g).zip(va) {
                        *x += gi * ai;
                    }
                });
            }
            &Op::Scale(a, s) => acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)),
            &Op::AddScalar(a) | &Op::Reshape(a) => acc(a, &mut |d| add_into(d, g)),
            &Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(a), val(b));
                acc(a, &mut |d| matmul_bt_acc(g, vb, d, m, n, k));
                acc(b, &mut |d| matmul_at_acc(va, g, d, m, k, n));
            }
            &Op::Affine { x, w, b } => {
                let (sx, sw) = (nodes[x.0].value.shape(), nodes[w.0].value.shape());
                let (m, k, n) = (sx[0], sx[1], sw[1]);
                let (vx, vw) = (val(x), val(w));
                acc(x, &mut |d| matmul_bt_acc(g, vw, d, m, n, k));
                acc(w, &mut |d| matmul_at_acc(vx, g, d, m, k, n));
                acc(b, &mut |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            &Op::Relu(a) => {
                let va = val(a);
                acc(a, &mut |d| {
                    for ((x, gi), ai) in d.iter_mut().zip(g).zip(va) {
                        if *ai > 0.0 {
                            *x += gi;
                        }
                    }
                });
            }
            &Op::Tanh(a) => acc(a, &mut |d| {
                for ((x, gi), y) in d.iter_mut().zip(g).zip(out) {
                    *x += gi * (1.0 - y * y);
                }
            }),
            &Op::Sigmoid(a) => acc(a, &mut |d| {
                for ((x, gi), y) in d.iter_mut().zip(g).zip(out) {
                    *x += gi * y * (1.0 - y);
                }
            }),
            &Op::Exp(a) => acc(a, &mut |d| {
                for ((x, gi), y) in d.iter_mut().zip(g).zip(out) {
                    *x += gi * y;
                }
            }),
            &Op::Log(a) => {
                let va = val(a);
                acc(a, &mut |d| {
                    for ((x, gi), ai) in d.iter_mut().zip(g).zip(va) {
                        *x += gi / ai.max(LOG_CLAMP);
                    }
                });
            }
            &Op::Abs(a) => {
                let va = val(a);
                acc(a, &mut |d| {
                    for ((x, gi), ai) in d.iter_mut().zip(g).zip(va) {
                        if *ai > 0.0 {
                            *x += gi;
                        } else if *ai < 0.0 {
                            *x -= gi;
                        }
                    }
                });
            }
            &Op::Softmax(a) => {
                let cols = *nodes[idx].value.shape().last().unwrap_or(&1);
                acc(a, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((x, gi), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *x += y * (gi - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmax(a) => {
                let cols = *nodes[idx].value.shape().last().unwrap_or(&1);
                acc(a, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                        let total: f64 = gr.iter().sum();
                        for ((x, gi), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *x += gi - libm::exp(*y) * total;
                        }
                    }
                });
            }
            &Op::Sum { input, axis } | &Op::Mean { input, axis } => {
                let scale = match nodes[idx].op {
                    Op::Mean { .. } => 1.0 / nodes[input.0].value.shape()[axis] as f64,
                    _ => 1.0,
                };
                let (outer, len, inner) = split_axis(nodes[input.0].value.shape(), axis);
                acc(input, &mut |d| {
                    for o in 0..outer {
                        for k in 0..len {
                            let base = (o * len + k) * inner;
                            for i in 0..inner {
                                d[base + i] += scale * g[o * inner + i];
                            }
                        }
                    }
                });
            }
            &Op::SumAll(a) => acc(a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            &Op::MeanAll(a) => {
                let s = g[0] / nodes[a.0].value.len() as f64;
                acc(a, &mut |d| d.iter_mut().for_each(|x| *x += s));
            }
            Op::Concat { inputs, axis } => {
                let axis = *axis;
                let (outer, total, inner) = split_axis(nodes[idx].value.shape(), axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = nodes[v.0].value.shape()[axis];
                    acc(v, &mut |d| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            add_into(&mut d[o * len * inner..(o + 1) * len * inner], &g[src..src + len * inner]);
                        }
                    });
                    offset += len;
                }
            }
            &Op::Slice { input, axis, start } => {
                let (outer, full, inner) = split_axis(nodes[input.0].value.shape(), axis);
                let len = nodes[idx].value.shape()[axis];
                acc(input, &mut |d| {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        add_into(&mut d[dst..dst + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            &Op::Warp { image, flow } => {
                let s = nodes[image.0].value.shape();
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (img, fl) = (val(image), val(flow));
                acc(image, &mut |d| {
                    for p in 0..b * h * w {
                        let n = p / (h * w);
                        let taps = neighbours(fl[2 * p], fl[2 * p + 1], h, w);
                        for tap in taps.iter().flatten() {
                            let src = ((n * h + tap.y) * w + tap.x) * c;
                            for ch in 0..c {
                                d[src + ch] += g[p * c + ch] * tap.weight;
                            }
                        }
                    }
                });
                acc(flow, &mut |d| {
                    for p in 0..b * h * w {
                        let n = p / (h * w);
                        let taps = neighbours(fl[2 * p], fl[2 * p + 1], h, w);
                        let (mut gx, mut gy) = (0.0, 0.0);
                        for tap in taps.iter().flatten() {
                            let src = ((n * h + tap.y) * w + tap.x) * c;
                            let dot: f64 = (0..c).map(|ch| g[p * c + ch] * img[src + ch]).sum();
                            gx += dot * tap.dwx * tap.wy;
                            gy += dot * tap.wx * tap.dwy;
                        }
                        d[2 * p] += gx;
                        d[2 * p + 1] += gy;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

// d[m, k] += g[m, n] * b[k, n]^T
fn matmul_bt_acc(g: &[f64], b: &[f64], d: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let bp = &b[p * n..(p + 1) * n];
            d[i * k + p] += gi.iter().zip(bp).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// d[k, n] += a[m, k]^T * g[m, n]
fn matmul_at_acc(a: &[f64], g: &[f64], d: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (x, &gv) in d[p * n..(p + 1) * n].iter_mut().zip(gi) {
                *x += aip * gv;
            }
        }
    }
}

/// One bilinear tap: integer source pixel, its separable weights and the
/// derivatives of those weights with respect to the sampling coordinate.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    pub x: usize,
    pub y: usize,
    pub weight: f64,
    wx: f64,
    wy: f64,
    dwx: f64,
    dwy: f64,
}

/// The four floor/ceil neighbours of `(fx, fy)`; out-of-image ones are `None`.
pub(crate) fn neighbours(fx: f64, fy: f64, h: usize, w: usize) -> [Option<Tap>; 4] {
    let x0 = libm::floor(fx);
    let y0 = libm::floor(fy);
    let (ax, ay) = (fx - x0, fy - y0);
    let xs = [(x0, 1.0 - ax, -1.0), (x0 + 1.0, ax, 1.0)];
    let ys = [(y0, 1.0 - ay, -1.0), (y0 + 1.0, ay, 1.0)];
    let mut taps = [None; 4];
    for (t, &(yy, wy, dwy)) in ys.iter().enumerate() {
        for (u, &(xx, wx, dwx)) in xs.iter().enumerate() {
            if yy >= 0.0 && xx >= 0.0 && yy < h as f64 && xx < w as f64 {
                taps[2 * t + u] = Some(Tap {
                    x: xx as usize,
                    y: yy as usize,
                    weight: wy * wx,
                    wx,
                    wy,
                    dwx,
                    dwy,
                });
            }
        }
    }
    taps
}
