//! Append-only tape of tensor operations with reverse-mode differentiation.
//!
//! Nodes are pushed in evaluation order, so a node's inputs always precede
//! it and the backward sweep is a plain reverse iteration.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{invalid, shape_err, Error, Result};
use crate::kernels::{self, Conv1dGeom, GroupStats};
use crate::param::{GradBuffer, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Powf(Var, T),
    Gelu(Var),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Sum(Var),
    Mean(Var),
    Select(Var, usize),
    Reshape(Var),
    Concat(Vec<Var>),
    Narrow { x: Var, offset: usize },
    Conv1d { x: Var, w: Var, b: Option<Var>, geom: Conv1dGeom },
    Dense { x: Var, w: Var, b: Option<Var> },
    GlobalAvg(Var),
    GlobalMax(Var, Vec<usize>),
    ChannelAvg(Var),
    ChannelMax(Var, Vec<usize>),
    GroupNorm(Var, usize, GroupStats<T>),
    ScaleChannels(Var, Var),
    ShiftChannels(Var, Var),
    ScalePositions(Var, Var),
    MulMask(Var, Vec<T>),
}

struct Node<'a, T: Element> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of operations. Parameter leaves borrow from a [`ParamStore`]
/// for the lifetime `'a`, so building a graph never copies weights.
pub struct Graph<'a, T: Element = f64> {
    nodes: Vec<Node<'a, T>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
    backward_done: bool,
}

impl<T: Element> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Element> Graph<'a, T> {
    /// Graph that records gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// Graph for inference: nothing requires a gradient.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node so the graph can be rebuilt.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.backward_done = false;
    }

    /// Bytes held by non-parameter nodes: the activation footprint of
    /// everything evaluated so far.
    pub fn activation_bytes(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Param(_)))
            .map(|n| n.value.size_bytes())
            .sum()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<&Tensor<T>> {
        self.nodes
            .get(v.0)
            .map(|n| n.value.as_ref())
            .ok_or(Error::UnknownVar(v.0))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (never differentiated).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to a stored parameter. Repeated requests for the same id
    /// return the same node.
    pub fn param(&mut self, store: &'a ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Param(id),
            requires_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.shape() != tb.shape() {
            return shape_err(name, ta.shape(), tb.shape());
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.check(a)?.map(f);
        Ok(self.push(out, op, &[a]))
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

    /// Sum of equally shaped tensors.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Invalid {
                op: "add_all",
                msg: "empty operand list".into(),
            })?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::lit(s);
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::lit(s);
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, T::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, T::ln, Op::Ln(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let p = T::lit(p);
        self.unary(a, |x| x.powf(p), Op::Powf(a, p))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, kernels::gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, T::tanh, Op::Tanh(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, false)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, true)
    }

    fn softmax_impl(&mut self, a: Var, axis: usize, log: bool) -> Result<Var> {
        let t = self.check(a)?;
        if axis >= t.rank() {
            return invalid("softmax", format!("axis {axis} out of range for {:?}", t.shape()));
        }
        let data = kernels::softmax(t.data(), t.shape(), axis, log);
        let out = Tensor::new(t.shape(), data)?;
        let op = if log {
            Op::LogSoftmax(a, axis)
        } else {
            Op::Softmax(a, axis)
        };
        Ok(self.push(out, op, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.check(a)?.data().iter().fold(T::zero(), |acc, &v| acc + v);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.check(a)?;
        let n = T::from_usize(t.numel()).unwrap();
        let s = t.data().iter().fold(T::zero(), |acc, &v| acc + v) / n;
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), &[a]))
    }

    /// Scalar at flat `index`.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.check(a)?;
        let Some(&v) = t.data().get(index) else {
            return invalid("select", format!("index {index} out of range for {:?}", t.shape()));
        };
        Ok(self.push(Tensor::scalar(v), Op::Select(a, index), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.check(a)?.clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return invalid("concat", "empty operand list");
        };
        let tail = self.check(first)?.shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.check(p)?;
            if t.shape()[1..] != tail[..] {
                return shape_err("concat", self.value(first).shape(), t.shape());
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    /// Rows `start..start+len` along axis 0.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.check(a)?;
        if len == 0 || start + len > t.shape()[0] {
            return invalid(
                "narrow",
                format!("rows {start}..{} out of range for {:?}", start + len, t.shape()),
            );
        }
        let inner: usize = t.shape()[1..].iter().product();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let data = t.data()[start * inner..(start + len) * inner].to_vec();
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Narrow { x: a, offset: start * inner }, &[a]))
    }

    /// 1-D convolution of `x: [C_in × L]` with `w: [C_out × C_in/groups × k]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.check(x)?, self.check(w)?);
        if tx.rank() != 2 || tw.rank() != 3 {
            return shape_err("conv1d", tx.shape(), tw.shape());
        }
        let (c_in, len) = (tx.shape()[0], tx.shape()[1]);
        let (c_out, cin_g, kernel) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        if stride == 0 || groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return invalid(
                "conv1d",
                format!("stride {stride}, groups {groups} invalid for input {:?} kernel {:?}", tx.shape(), tw.shape()),
            );
        }
        if cin_g * groups != c_in {
            return shape_err("conv1d", tx.shape(), tw.shape());
        }
        if len + 2 * padding < kernel {
            return invalid(
                "conv1d",
                format!("kernel {kernel} longer than padded input {:?} (padding {padding})", tx.shape()),
            );
        }
        let geom = Conv1dGeom { c_in, len, c_out, kernel, stride, padding, groups };
        let bias = match b {
            Some(bv) => {
                let tb = self.check(bv)?;
                if tb.shape() != [c_out] {
                    return shape_err("conv1d bias", tw.shape(), tb.shape());
                }
                Some(tb.data())
            }
            None => None,
        };
        let data = kernels::conv1d_forward(tx.data(), tw.data(), bias, &geom);
        let out = Tensor::new(&[c_out, geom.out_len()], data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv1d { x, w, b, geom }, &inputs))
    }

    /// `W·x + b` for `x: [n]`, `W: [m × n]`, `b: [m]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.check(x)?, self.check(w)?);
        if tx.rank() != 1 || tw.rank() != 2 || tw.shape()[1] != tx.shape()[0] {
            return shape_err("dense", tx.shape(), tw.shape());
        }
        let (m, n) = (tw.shape()[0], tw.shape()[1]);
        let mut out = match b {
            Some(bv) => {
                let tb = self.check(bv)?;
                if tb.shape() != [m] {
                    return shape_err("dense bias", tw.shape(), tb.shape());
                }
                tb.data().to_vec()
            }
            None => vec![T::zero(); m],
        };
        for (i, o) in out.iter_mut().enumerate() {
            let row = &tw.data()[i * n..(i + 1) * n];
            *o = row.iter().zip(tx.data()).fold(*o, |acc, (&wv, &xv)| acc + wv * xv);
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::from_vec(out), Op::Dense { x, w, b }, &inputs))
    }

    fn rank2(&self, a: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.check(a)?;
        if t.rank() != 2 {
            return invalid(op, format!("expected [C × L], got {:?}", t.shape()));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    /// `[C × L] → [C]`, mean over positions.
    pub fn global_avg(&mut self, a: Var) -> Result<Var> {
        let (c, l) = self.rank2(a, "global_avg")?;
        let t = self.value(a);
        let lf = T::from_usize(l).unwrap();
        let data = (0..c)
            .map(|ci| t.data()[ci * l..(ci + 1) * l].iter().fold(T::zero(), |s, &v| s + v) / lf)
            .collect();
        Ok(self.push(Tensor::from_vec(data), Op::GlobalAvg(a), &[a]))
    }

    /// `[C × L] → [C]`, max over positions; ties go to the lowest index.
    pub fn global_max(&mut self, a: Var) -> Result<Var> {
        let (c, l) = self.rank2(a, "global_max")?;
        let t = self.value(a);
        let mut arg = Vec::with_capacity(c);
        let mut data = Vec::with_capacity(c);
        for ci in 0..c {
            let row = &t.data()[ci * l..(ci + 1) * l];
            let (i, v) = argmax(row);
            arg.push(ci * l + i);
            data.push(v);
        }
        Ok(self.push(Tensor::from_vec(data), Op::GlobalMax(a, arg), &[a]))
    }

    /// `[C × L] → [1 × L]`, mean over channels.
    pub fn channel_avg(&mut self, a: Var) -> Result<Var> {
        let (c, l) = self.rank2(a, "channel_avg")?;
        let t = self.value(a);
        let cf = T::from_usize(c).unwrap();
        let data = (0..l)
            .map(|j| (0..c).fold(T::zero(), |s, ci| s + t.data()[ci * l + j]) / cf)
            .collect();
        let out = Tensor::new(&[1, l], data)?;
        Ok(self.push(out, Op::ChannelAvg(a), &[a]))
    }

    /// `[C × L] → [1 × L]`, max over channels; ties go to the lowest channel.
    pub fn channel_max(&mut self, a: Var) -> Result<Var> {
        let (c, l) = self.rank2(a, "channel_max")?;
        let t = self.value(a);
        let mut arg = Vec::with_capacity(l);
        let mut data = Vec::with_capacity(l);
        for j in 0..l {
            let col: Vec<T> = (0..c).map(|ci| t.data()[ci * l + j]).collect();
            let (i, v) = argmax(&col);
            arg.push(i * l + j);
            data.push(v);
        }
        let out = Tensor::new(&[1, l], data)?;
        Ok(self.push(out, Op::ChannelMax(a, arg), &[a]))
    }

    /// Group normalisation without affine terms; variance floored at `eps`.
    pub fn group_norm(&mut self, a: Var, groups: usize, eps: f64) -> Result<Var> {
        let (c, l) = self.rank2(a, "group_norm")?;
        if groups == 0 || c % groups != 0 {
            return invalid("group_norm", format!("{c} channels not divisible into {groups} groups"));
        }
        if eps <= 0.0 {
            return invalid("group_norm", "eps must be positive");
        }
        let (data, stats) = kernels::group_norm(self.value(a).data(), c, l, groups, T::lit(eps));
        let out = Tensor::new(&[c, l], data)?;
        Ok(self.push(out, Op::GroupNorm(a, groups, stats), &[a]))
    }

    /// `x[c, j] * w[c]`.
    pub fn scale_channels(&mut self, x: Var, w: Var) -> Result<Var> {
        self.channelwise(x, w, "scale_channels", true)
    }

    /// `x[c, j] + b[c]`.
    pub fn shift_channels(&mut self, x: Var, b: Var) -> Result<Var> {
        self.channelwise(x, b, "shift_channels", false)
    }

    fn channelwise(&mut self, x: Var, w: Var, name: &'static str, mul: bool) -> Result<Var> {
        let (c, l) = self.rank2(x, name)?;
        let tw = self.check(w)?;
        if tw.numel() != c {
            return shape_err(name, self.value(x).shape(), tw.shape());
        }
        let tx = self.value(x);
        let mut data = tx.data().to_vec();
        for ci in 0..c {
            let s = tw.data()[ci];
            for v in &mut data[ci * l..(ci + 1) * l] {
                *v = if mul { *v * s } else { *v + s };
            }
        }
        let out = Tensor::new(&[c, l], data)?;
        let op = if mul {
            Op::ScaleChannels(x, w)
        } else {
            Op::ShiftChannels(x, w)
        };
        Ok(self.push(out, op, &[x, w]))
    }

    /// `x[c, j] * m[j]`, with `m` shaped `[L]` or `[1 × L]`.
    pub fn scale_positions(&mut self, x: Var, m: Var) -> Result<Var> {
        let (c, l) = self.rank2(x, "scale_positions")?;
        let tm = self.check(m)?;
        if tm.numel() != l {
            return shape_err("scale_positions", self.value(x).shape(), tm.shape());
        }
        let tx = self.value(x);
        let mut data = tx.data().to_vec();
        for ci in 0..c {
            for (v, &s) in data[ci * l..(ci + 1) * l].iter_mut().zip(tm.data()) {
                *v = *v * s;
            }
        }
        let out = Tensor::new(&[c, l], data)?;
        Ok(self.push(out, Op::ScalePositions(x, m), &[x, m]))
    }

    /// Elementwise product with a constant mask (dropout and friends).
    pub fn mul_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let t = self.check(x)?;
        if mask.len() != t.numel() {
            return shape_err("mul_mask", t.shape(), &[mask.len()]);
        }
        let data = t.data().iter().zip(&mask).map(|(&a, &b)| a * b).collect();
        let out = Tensor::new(t.shape(), data)?;
        Ok(self.push(out, Op::MulMask(x, mask), &[x]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let t = self.check(loss)?;
        if t.numel() != 1 {
            return Err(Error::NonScalarLoss(t.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Detached);
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }

        let mut leaves = HashMap::new();
        let mut params = Vec::new();
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &self.nodes[i];
            let t = Tensor::new(node.value.shape(), g)?;
            match node.op {
                Op::Param(id) => params.push((id, t)),
                Op::Leaf => {
                    leaves.insert(Var(i), t);
                }
                _ => {}
            }
        }
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients { leaves, params })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut send = |v: Var, f: &dyn Fn(usize) -> T| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            for (k, s) in slot.iter_mut().enumerate() {
                *s = *s + f(k);
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                send(*a, &|k| g[k]);
                send(*b, &|k| g[k]);
            }
            Op::Sub(a, b) => {
                send(*a, &|k| g[k]);
                send(*b, &|k| -g[k]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                send(*a, &|k| g[k] * vb[k]);
                send(*b, &|k| g[k] * va[k]);
            }
            Op::Scale(a, s) => send(*a, &|k| g[k] * *s),
            Op::AddScalar(a) | Op::Reshape(a) => send(*a, &|k| g[k]),
            Op::Exp(a) => send(*a, &|k| g[k] * out[k]),
            Op::Ln(a) => {
                let va = val(*a);
                send(*a, &|k| g[k] / va[k]);
            }
            Op::Powf(a, p) => {
                let va = val(*a);
                send(*a, &|k| g[k] * *p * va[k].powf(*p - T::one()));
            }
            Op::Gelu(a) => {
                let va = val(*a);
                send(*a, &|k| g[k] * kernels::gelu_grad(va[k]));
            }
            Op::Sigmoid(a) => send(*a, &|k| g[k] * out[k] * (T::one() - out[k])),
            Op::Relu(a) => {
                let va = val(*a);
                send(*a, &|k| if va[k] > T::zero() { g[k] } else { T::zero() });
            }
            Op::Tanh(a) => send(*a, &|k| g[k] * (T::one() - out[k] * out[k])),
            Op::Softmax(a, axis) => {
                let gx = kernels::softmax_backward(out, g, node.value.shape(), *axis);
                send(*a, &|k| gx[k]);
            }
            Op::LogSoftmax(a, axis) => {
                let gx = kernels::log_softmax_backward(out, g, node.value.shape(), *axis);
                send(*a, &|k| gx[k]);
            }
            Op::Sum(a) => send(*a, &|_| g[0]),
            Op::Mean(a) => {
                let n = T::from_usize(self.nodes[a.0].value.numel()).unwrap();
                send(*a, &|_| g[0] / n);
            }
            Op::Select(a, idx) => {
                let idx = *idx;
                send(*a, &|k| if k == idx { g[0] } else { T::zero() });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.numel();
                    let o = off;
                    send(*p, &|k| g[o + k]);
                    off += n;
                }
            }
            Op::Narrow { x, offset } => {
                let (off, n) = (*offset, g.len());
                send(*x, &|k| if k >= off && k < off + n { g[k - off] } else { T::zero() });
            }
            Op::Conv1d { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::conv1d_backward(val(*x), val(*w), g, geom);
                send(*x, &|k| gx[k]);
                send(*w, &|k| gw[k]);
                if let Some(b) = b {
                    send(*b, &|k| gb[k]);
                }
            }
            Op::Dense { x, w, b } => {
                let (vx, vw) = (val(*x), val(*w));
                let n = vx.len();
                send(*x, &|j| (0..g.len()).fold(T::zero(), |acc, i| acc + g[i] * vw[i * n + j]));
                send(*w, &|k| g[k / n] * vx[k % n]);
                if let Some(b) = b {
                    send(*b, &|k| g[k]);
                }
            }
            Op::GlobalAvg(a) => {
                let l = self.nodes[a.0].value.shape()[1];
                let lf = T::from_usize(l).unwrap();
                send(*a, &|k| g[k / l] / lf);
            }
            Op::ChannelAvg(a) => {
                let shape = self.nodes[a.0].value.shape();
                let cf = T::from_usize(shape[0]).unwrap();
                let l = shape[1];
                send(*a, &|k| g[k % l] / cf);
            }
            Op::GlobalMax(a, arg) | Op::ChannelMax(a, arg) => {
                let mut dense = vec![T::zero(); self.nodes[a.0].value.numel()];
                for (o, &src) in arg.iter().enumerate() {
                    dense[src] = dense[src] + g[o];
                }
                send(*a, &|k| dense[k]);
            }
            Op::GroupNorm(a, groups, stats) => {
                let gx = kernels::group_norm_backward(out, g, *groups, stats);
                send(*a, &|k| gx[k]);
            }
            Op::ScaleChannels(x, w) => {
                let l = node.value.shape()[1];
                let (vx, vw) = (val(*x), val(*w));
                send(*x, &|k| g[k] * vw[k / l]);
                send(*w, &|c| {
                    (c * l..(c + 1) * l).fold(T::zero(), |acc, k| acc + g[k] * vx[k])
                });
            }
            Op::ShiftChannels(x, b) => {
                let l = node.value.shape()[1];
                send(*x, &|k| g[k]);
                send(*b, &|c| g[c * l..(c + 1) * l].iter().fold(T::zero(), |acc, &v| acc + v));
            }
            Op::ScalePositions(x, m) => {
                let shape = node.value.shape();
                let (c, l) = (shape[0], shape[1]);
                let (vx, vm) = (val(*x), val(*m));
                send(*x, &|k| g[k] * vm[k % l]);
                send(*m, &|j| (0..c).fold(T::zero(), |acc, ci| acc + g[ci * l + j] * vx[ci * l + j]));
            }
            Op::MulMask(x, mask) => send(*x, &|k| g[k] * mask[k]),
        }
    }
}

fn argmax<T: Element>(xs: &[T]) -> (usize, T) {
    let mut best = (0, xs[0]);
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Result of [`Graph::backward`]: gradients of every gradient-requiring leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T: Element = f64> {
    leaves: HashMap<Var, Tensor<T>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for a non-parameter leaf.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    pub fn params(&self) -> &[(ParamId, Tensor<T>)] {
        &self.params
    }

    pub fn accumulate_into(&self, buf: &mut GradBuffer<T>, scale: T) {
        for (id, g) in &self.params {
            buf.accumulate(*id, g, scale);
        }
    }
}
