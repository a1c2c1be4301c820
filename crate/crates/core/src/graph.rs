//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every operation appends one node holding its
//! forward value and the handles it was computed from. [`Graph::backward`]
//! walks the tape once in reverse and accumulates gradients into every node
//! that depends on a leaf created with [`Graph::leaf`] or bound from a
//! [`ParamStore`].
//!
//! Every forward op checks its output for non-finite values and reports the
//! op by name, so a NaN surfaces where it is produced rather than in the
//! loss.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{fmt_shape, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{
    axis_split, broadcast_offsets, broadcast_shape, broadcast_strides, reduce_to_shape, strides, Tensor,
};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Tanh,
    Atanh,
    Sigmoid,
    Gelu,
    Exp,
    Log,
    Sqrt,
    Abs,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Tanh => "tanh",
            Unary::Atanh => "atanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Gelu => "gelu",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Sqrt => "sqrt",
            Unary::Abs => "abs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Unary(Unary, Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    BroadcastTo(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    IndexSelect(Var, usize, Vec<usize>),
    Sum(Var),
    SumAxis(Var),
    Softmax(Var, usize),
    L2Norm(Var, usize, f64),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Running record of the largest row norm seen on ball-valued tensors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BallProbe {
    pub limit: f64,
    pub max_norm: f64,
    pub tensors_checked: usize,
    pub violations: usize,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: Vec<Var>,
}

impl Grads {
    /// Gradient of `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zeros when `v` does not influence the output.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }

    /// Gradient of a bound parameter.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.index()).and_then(|v| self.get(*v))
    }
}

/// Execution tape.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Var>,
    probe: Option<BallProbe>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// New graph with every parameter of `store` bound as a leaf.
    pub fn with_params(store: &ParamStore) -> Self {
        let mut g = Self::new();
        g.bind_params(store);
        g
    }

    pub fn bind_params(&mut self, store: &ParamStore) {
        self.params = store.iter().map(|(_, e)| self.leaf(e.value.clone())).collect();
    }

    /// Leaf handle of a bound parameter.
    ///
    /// Panics if the parameter store was not bound to this graph.
    pub fn param(&self, id: ParamId) -> Var {
        *self.params.get(id.index()).expect("parameter store not bound to graph")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn enable_ball_probe(&mut self, limit: f64) {
        self.probe = Some(BallProbe { limit, max_norm: 0.0, tensors_checked: 0, violations: 0 });
    }

    pub fn ball_probe(&self) -> Option<BallProbe> {
        self.probe
    }

    /// Record the row norms of a ball-valued node in the probe, if enabled.
    pub fn observe_ball(&mut self, v: Var) {
        if let Some(probe) = self.probe.as_mut() {
            let value = &self.nodes[v.0].value;
            let mut worst = 0.0f64;
            for row in value.rows() {
                worst = worst.max(libm::sqrt(row.iter().map(|x| x * x).sum::<f64>()));
            }
            probe.tensors_checked += 1;
            probe.max_norm = probe.max_norm.max(worst);
            if worst > probe.limit {
                probe.violations += 1;
            }
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn rank(&self, v: Var) -> usize {
        self.shape(v).len()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push(value, op, requires_grad))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    // ---- elementwise binary ------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else {
            let out = broadcast_shape(ta.shape(), tb.shape())
                .ok_or_else(|| Error::shapes(kind.name(), ta.shape(), tb.shape()))?;
            let oa = broadcast_offsets(&broadcast_strides(ta.shape(), &out), &out);
            let ob = broadcast_offsets(&broadcast_strides(tb.shape(), &out), &out);
            let data = oa.iter().zip(&ob).map(|(&i, &j)| f(ta.data()[i], tb.data()[j])).collect();
            Tensor::new(out, data)?
        };
        let rg = self.rg(&[a, b]);
        self.push_checked(kind.name(), value, Op::Binary(kind, a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// `a * c` for a real constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push_checked("scale", value, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// `a + c` for a real constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push_checked("offset", value, Op::Offset(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    // ---- elementwise unary -------------------------------------------------

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        match kind {
            Unary::Atanh => {
                if let Some(bad) = x.data().iter().find(|v| !(v.abs() < 1.0)) {
                    return Err(Error::Domain { op: "atanh", detail: alloc::format!("input {bad} outside (-1, 1)") });
                }
            }
            Unary::Log => {
                if let Some(bad) = x.data().iter().find(|v| !(**v > 0.0)) {
                    return Err(Error::Domain { op: "log", detail: alloc::format!("input {bad} not positive") });
                }
            }
            Unary::Sqrt => {
                if let Some(bad) = x.data().iter().find(|v| !(**v >= 0.0)) {
                    return Err(Error::Domain { op: "sqrt", detail: alloc::format!("input {bad} negative") });
                }
            }
            _ => {}
        }
        let value = x.map(|v| match kind {
            Unary::Tanh => libm::tanh(v),
            Unary::Atanh => libm::atanh(v),
            Unary::Sigmoid => sigmoid(v),
            Unary::Gelu => gelu(v),
            Unary::Exp => libm::exp(v),
            Unary::Log => libm::log(v),
            Unary::Sqrt => libm::sqrt(v),
            Unary::Abs => v.abs(),
        });
        let rg = self.rg(&[a]);
        self.push_checked(kind.name(), value, Op::Unary(kind, a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    /// Inverse hyperbolic tangent. Inputs must lie strictly inside (-1, 1);
    /// there is no internal clamp.
    pub fn atanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Atanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Gelu, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, a)
    }

    /// Absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Abs, a)
    }

    // ---- linear algebra and layout ----------------------------------------

    /// Matrix product over the last two axes: `[.., m, k] x [.., k, n]`.
    ///
    /// Leading batch dimensions must match, or one operand is a plain
    /// matrix shared across the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let dims = matmul_dims(ta.shape(), tb.shape())?;
        let mut out = vec![0.0; dims.batch * dims.m * dims.n];
        for bi in 0..dims.batch {
            let ao = if dims.a_batched { bi * dims.m * dims.k } else { 0 };
            let bo = if dims.b_batched { bi * dims.k * dims.n } else { 0 };
            let co = bi * dims.m * dims.n;
            gemm(
                &ta.data()[ao..ao + dims.m * dims.k],
                &tb.data()[bo..bo + dims.k * dims.n],
                &mut out[co..co + dims.m * dims.n],
                dims.m,
                dims.k,
                dims.n,
            );
        }
        let value = Tensor::new(dims.out_shape.clone(), out)?;
        let rg = self.rg(&[a, b]);
        self.push_checked("matmul", value, Op::MatMul(a, b), rg)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&ax| ax >= rank || core::mem::replace(&mut seen[ax], true)) {
            return Err(Error::shape("permute", alloc::format!("axes {:?} for {}", axes, fmt_shape(t.shape()))));
        }
        let s = strides(t.shape());
        let out_shape: Vec<usize> = axes.iter().map(|&ax| t.shape()[ax]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&ax| s[ax]).collect();
        let offs = broadcast_offsets(&src_strides, &out_shape);
        let data = offs.iter().map(|&o| t.data()[o]).collect();
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Permute(a, axes.to_vec()), rg))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.rank(a);
        if rank < 2 {
            return Err(Error::shape("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Explicit trailing-aligned broadcast to `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        match broadcast_shape(t.shape(), shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::shapes("broadcast_to", t.shape(), shape)),
        }
        let offs = broadcast_offsets(&broadcast_strides(t.shape(), shape), shape);
        let data = offs.iter().map(|&o| t.data()[o]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::BroadcastTo(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", alloc::format!("axis {axis} for {}", fmt_shape(&base))));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shapes("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = &self.nodes[p.0].value;
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if axis >= t.rank() || len == 0 || start + len > t.shape()[axis] {
            return Err(Error::shape(
                "slice",
                alloc::format!("axis {axis} [{start}, {}) of {}", start + len, fmt_shape(t.shape())),
            ));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Slice(a, axis, start), rg))
    }

    /// Split along `axis` into pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(a, axis, start, s)?);
            start += s;
        }
        if axis < self.rank(a) && start != self.shape(a)[axis] {
            return Err(Error::shape("split", alloc::format!("sizes {:?} do not cover axis {axis}", sizes)));
        }
        Ok(out)
    }

    /// Gather entries along `axis` at `indices` (repeats allowed).
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if axis >= t.rank() || indices.is_empty() {
            return Err(Error::shape("index_select", alloc::format!("axis {axis} of {}", fmt_shape(t.shape()))));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        if let Some(bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::shape("index_select", alloc::format!("index {bad} out of range {n}")));
        }
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * n + i) * inner;
                data.extend_from_slice(&t.data()[base..base + inner]);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = indices.len();
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::IndexSelect(a, axis, indices.to_vec()), rg))
    }

    // ---- reductions --------------------------------------------------------

    /// Sum of all entries (rank-0 result).
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(&[a]);
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if axis >= t.rank() {
            return Err(Error::shape("sum_axis", alloc::format!("axis {axis} of {}", fmt_shape(t.shape()))));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    data[o * inner + i] += t.data()[base + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        self.push_checked("sum_axis", value, Op::SumAxis(a), rg)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self.shape(a).get(axis).copied().unwrap_or(1) as f64;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean and population variance along `axis`, both kept with extent 1.
    pub fn layer_stats(&mut self, a: Var, axis: usize) -> Result<(Var, Var)> {
        let mean = self.mean_axis(a, axis)?;
        let centered = self.sub(a, mean)?;
        let sq = self.square(centered)?;
        let var = self.mean_axis(sq, axis)?;
        Ok((mean, var))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if axis >= t.rank() {
            return Err(Error::shape("softmax", alloc::format!("axis {axis} of {}", fmt_shape(t.shape()))));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut data = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = libm::exp(data[at(j)] - max);
                    data[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    data[at(j)] /= z;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push_checked("softmax", value, Op::Softmax(a, axis), rg)
    }

    /// Euclidean norm along `axis` (kept with extent 1), floored at `eps`:
    /// `max(||x||, eps)`. The gradient is zero where the floor is active.
    pub fn l2norm(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if axis >= t.rank() {
            return Err(Error::shape("l2norm", alloc::format!("axis {axis} of {}", fmt_shape(t.shape()))));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let ss: f64 = (0..n).map(|j| t.data()[(o * n + j) * inner + i]).map(|x| x * x).sum();
                data[o * inner + i] = libm::sqrt(ss).max(eps);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        self.push_checked("l2norm", value, Op::L2Norm(a, axis, eps), rg)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Grads> {
        let out = &self.nodes[output.0].value;
        if out.numel() != 1 {
            return Err(Error::contract(alloc::format!(
                "backward needs a scalar output, got shape {}",
                fmt_shape(out.shape())
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::ones(out.shape().to_vec()));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Grads { grads, params: self.params.clone() })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let acc = |v: Var, contrib: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let out = g.shape();
                let same = ta.shape() == out && tb.shape() == out;
                let (oa, ob) = if same {
                    ((0..g.numel()).collect::<Vec<_>>(), (0..g.numel()).collect::<Vec<_>>())
                } else {
                    (
                        broadcast_offsets(&broadcast_strides(ta.shape(), out), out),
                        broadcast_offsets(&broadcast_strides(tb.shape(), out), out),
                    )
                };
                let xa = |i: usize| ta.data()[oa[i]];
                let xb = |i: usize| tb.data()[ob[i]];
                let gd = g.data();
                let (da, db): (Vec<f64>, Vec<f64>) = match kind {
                    Binary::Add => (gd.to_vec(), gd.to_vec()),
                    Binary::Sub => (gd.to_vec(), gd.iter().map(|x| -x).collect()),
                    Binary::Mul => (
                        (0..gd.len()).map(|i| gd[i] * xb(i)).collect(),
                        (0..gd.len()).map(|i| gd[i] * xa(i)).collect(),
                    ),
                    Binary::Div => (
                        (0..gd.len()).map(|i| gd[i] / xb(i)).collect(),
                        (0..gd.len()).map(|i| -gd[i] * xa(i) / (xb(i) * xb(i))).collect(),
                    ),
                };
                let da = Tensor::new(out.to_vec(), da).expect("grad shape");
                let db = Tensor::new(out.to_vec(), db).expect("grad shape");
                acc(*a, reduce_to_shape(&da, ta.shape()), grads);
                acc(*b, reduce_to_shape(&db, tb.shape()), grads);
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c), grads),
            Op::Offset(a) => acc(*a, g.clone(), grads),
            Op::Unary(kind, a) => {
                let x = val(*a).data();
                let y = node.value.data();
                let d: Vec<f64> = (0..x.len())
                    .map(|i| {
                        let local = match kind {
                            Unary::Tanh => 1.0 - y[i] * y[i],
                            Unary::Atanh => 1.0 / (1.0 - x[i] * x[i]),
                            Unary::Sigmoid => y[i] * (1.0 - y[i]),
                            Unary::Gelu => gelu_grad(x[i]),
                            Unary::Exp => y[i],
                            Unary::Log => 1.0 / x[i],
                            Unary::Sqrt => 0.5 / y[i],
                            Unary::Abs => {
                                if x[i] > 0.0 {
                                    1.0
                                } else if x[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        g.data()[i] * local
                    })
                    .collect();
                acc(*a, Tensor::new(g.shape().to_vec(), d).expect("grad shape"), grads);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let dims = matmul_dims(ta.shape(), tb.shape()).expect("validated in forward");
                let (m, k, n) = (dims.m, dims.k, dims.n);
                let mut da = vec![0.0; ta.numel()];
                let mut db = vec![0.0; tb.numel()];
                for bi in 0..dims.batch {
                    let ao = if dims.a_batched { bi * m * k } else { 0 };
                    let bo = if dims.b_batched { bi * k * n } else { 0 };
                    let go = bi * m * n;
                    let gs = &g.data()[go..go + m * n];
                    let av = &ta.data()[ao..ao + m * k];
                    let bv = &tb.data()[bo..bo + k * n];
                    // dA = G B^T, dB = A^T G
                    for i in 0..m {
                        for j in 0..n {
                            let gij = gs[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[ao + i * k + p] += gij * bv[p * n + j];
                                db[bo + p * n + j] += av[i * k + p] * gij;
                            }
                        }
                    }
                }
                acc(*a, Tensor::new(ta.shape().to_vec(), da).expect("grad shape"), grads);
                acc(*b, Tensor::new(tb.shape().to_vec(), db).expect("grad shape"), grads);
            }
            Op::Permute(a, axes) => {
                let ta = val(*a);
                let s = strides(ta.shape());
                let src: Vec<usize> = axes.iter().map(|&ax| s[ax]).collect();
                let offs = broadcast_offsets(&src, g.shape());
                let mut d = vec![0.0; ta.numel()];
                for (gv, o) in g.data().iter().zip(offs) {
                    d[o] += gv;
                }
                acc(*a, Tensor::new(ta.shape().to_vec(), d).expect("grad shape"), grads);
            }
            Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape().to_vec()).expect("grad shape"), grads),
            Op::BroadcastTo(a) => acc(*a, reduce_to_shape(g, val(*a).shape()), grads),
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut start = 0;
                for p in parts {
                    let shape = val(*p).shape();
                    let len = shape[*axis];
                    let mut d = Vec::with_capacity(val(*p).numel());
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        d.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    start += len;
                    acc(*p, Tensor::new(shape.to_vec(), d).expect("grad shape"), grads);
                }
            }
            Op::Slice(a, axis, start) => {
                let ta = val(*a);
                let (outer, n, inner) = axis_split(ta.shape(), *axis);
                let len = g.shape()[*axis];
                let mut d = vec![0.0; ta.numel()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                acc(*a, Tensor::new(ta.shape().to_vec(), d).expect("grad shape"), grads);
            }
            Op::IndexSelect(a, axis, indices) => {
                let ta = val(*a);
                let (outer, n, inner) = axis_split(ta.shape(), *axis);
                let mut d = vec![0.0; ta.numel()];
                for o in 0..outer {
                    for (j, &i) in indices.iter().enumerate() {
                        let src = (o * indices.len() + j) * inner;
                        let dst = (o * n + i) * inner;
                        for q in 0..inner {
                            d[dst + q] += g.data()[src + q];
                        }
                    }
                }
                acc(*a, Tensor::new(ta.shape().to_vec(), d).expect("grad shape"), grads);
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                acc(*a, Tensor::full(val(*a).shape().to_vec(), gv), grads);
            }
            Op::SumAxis(a) => {
                let shape = val(*a).shape();
                let offs = broadcast_offsets(&broadcast_strides(g.shape(), shape), shape);
                let d = offs.iter().map(|&o| g.data()[o]).collect();
                acc(*a, Tensor::new(shape.to_vec(), d).expect("grad shape"), grads);
            }
            Op::Softmax(a, axis) => {
                let y = &node.value;
                let (outer, n, inner) = axis_split(y.shape(), *axis);
                let mut d = vec![0.0; y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g.data()[at(j)] * y.data()[at(j)]).sum();
                        for j in 0..n {
                            d[at(j)] = y.data()[at(j)] * (g.data()[at(j)] - dot);
                        }
                    }
                }
                acc(*a, Tensor::new(y.shape().to_vec(), d).expect("grad shape"), grads);
            }
            Op::L2Norm(a, axis, eps) => {
                let x = val(*a);
                let y = &node.value;
                let (outer, n, inner) = axis_split(x.shape(), *axis);
                let mut d = vec![0.0; x.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let r = y.data()[o * inner + i];
                        let ss: f64 = (0..n).map(|j| x.data()[(o * n + j) * inner + i]).map(|v| v * v).sum();
                        if libm::sqrt(ss) <= *eps {
                            continue;
                        }
                        let gr = g.data()[o * inner + i];
                        for j in 0..n {
                            let at = (o * n + j) * inner + i;
                            d[at] = gr * x.data()[at] / r;
                        }
                    }
                }
                acc(*a, Tensor::new(x.shape().to_vec(), d).expect("grad shape"), grads);
            }
        }
    }
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    out_shape: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shapes("matmul", a, b));
    }
    let (ab, am) = a.split_at(a.len() - 2);
    let (bb, bm) = b.split_at(b.len() - 2);
    if am[1] != bm[0] {
        return Err(Error::shapes("matmul", a, b));
    }
    let batch_shape = match (ab.is_empty(), bb.is_empty()) {
        (_, true) => ab,
        (true, false) => bb,
        (false, false) if ab == bb => ab,
        _ => return Err(Error::shapes("matmul", a, b)),
    };
    let mut out_shape = batch_shape.to_vec();
    out_shape.extend_from_slice(&[am[0], bm[1]]);
    Ok(MatMulDims {
        batch: batch_shape.iter().product(),
        m: am[0],
        k: am[1],
        n: bm[1],
        a_batched: !ab.is_empty(),
        b_batched: !bb.is_empty(),
        out_shape,
    })
}

fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

/// Exact GELU.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    normal_cdf(x) + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([3]));
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn tanh_derivative_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let y = g.tanh(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn matmul_values() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[5., 6.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[17., 39.]);
        let bad = g.constant(t(&[3, 1], &[1., 1., 1.]));
        assert!(matches!(g.matmul(a, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_shared_left_operand() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2], &[1., 1.]));
        let b = g.constant(t(&[2, 2, 1], &[1., 2., 3., 4.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1, 1]);
        assert_eq!(g.value(c).data(), &[3., 7.]);
    }

    #[test]
    fn atanh_domain_is_reported() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.5, 1.0]));
        match g.atanh(x) {
            Err(Error::Domain { op, .. }) => assert_eq!(op, "atanh"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_output_names_op() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[1.0]));
        let z = g.constant(t(&[1], &[0.0]));
        assert_eq!(g.div(x, z), Err(Error::NonFinite { op: "div" }));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros([2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_node_accumulates_once_per_use() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros([2, 3]));
        let b = g.leaf(Tensor::zeros([3]));
        let c = g.add(a, b).unwrap();
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[2., 2., 2.]);
        assert_eq!(g.shape(c), &[2, 3]);
    }

    #[test]
    fn concat_and_split_layout() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1], &[1., 2.]));
        let b = g.constant(t(&[2, 2], &[3., 4., 5., 6.]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1., 3., 4., 2., 5., 6.]);
        let parts = g.split(c, 1, &[1, 2]).unwrap();
        assert_eq!(g.value(parts[1]).data(), &[3., 4., 5., 6.]);
        assert!(g.split(c, 1, &[1, 1]).is_err());
    }

    #[test]
    fn permute_moves_axes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn([2, 3, 4], |i| i as f64));
        let p = g.permute(a, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // p[k][i][j] = a[i][j][k]
        assert_eq!(g.value(p).data()[1 * 6 + 1 * 3 + 2], (1 * 12 + 2 * 4 + 1) as f64);
        assert!(g.permute(a, &[0, 0, 1]).is_err());
    }

    #[test]
    fn l2norm_floor() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[3., 4., 0., 0.]));
        let n = g.l2norm(x, 1, 1e-12).unwrap();
        assert_eq!(g.value(n).data(), &[5.0, 1e-12]);
        let s = g.sum(n).unwrap();
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[0.6, 0.8, 0.0, 0.0]);
    }

    #[test]
    fn gelu_reference_value() {
        // 2 * Phi(2)
        assert!((gelu(2.0) - 1.954_499_736_103_642).abs() < 1e-12);
        assert_eq!(gelu(0.0), 0.0);
    }
}
