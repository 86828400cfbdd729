//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied during one forward pass. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse.

use std::collections::HashMap;

use super::kernels;
use super::store::{ParamId, VarStore};
use super::tensor::{broadcast_shape, for_each_broadcast, pad4, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, F),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    Square(Var),
    Clamp(Var, F, F),
    SumAxes(Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    ConvTranspose2x2 { x: Var, w: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    AdaptiveAvgPool(Var),
    Concat(Vec<Var>),
    SliceChannels { x: Var, start: usize },
    Softmax(Var),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Debug)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
    param_order: Vec<ParamId>,
    training: bool,
    buffer_updates: Vec<(ParamId, Tensor<F>)>,
}

impl<F: Real> Graph<F> {
    /// `training` selects batch statistics (and running-stat updates) in normalization layers.
    pub fn new(training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
            training,
            buffer_updates: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient (used for input-gradient checks).
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter into this graph; repeated calls return the same node.
    pub fn param(&mut self, vs: &VarStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(vs.get(id).clone(), Op::Leaf, vs.is_trainable(id));
        self.params.insert(id, v);
        self.param_order.push(id);
        v
    }

    /// Queues a new value for a buffer (running statistic); see [`Graph::take_buffer_updates`].
    pub fn record_buffer_update(&mut self, id: ParamId, value: Tensor<F>) {
        self.buffer_updates.push((id, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor<F>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> (Tensor<F>, bool) {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)
            .unwrap_or_else(|| panic!("cannot broadcast {sa:?} with {sb:?}"));
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![F::zero(); out_shape.iter().product()];
        if sa == sb {
            for ((o, &x), &y) in out.iter_mut().zip(da).zip(db) {
                *o = f(x, y);
            }
        } else {
            for_each_broadcast(&sa, &sb, &out_shape, |o, i, j| out[o] = f(da[i], db[j]));
        }
        (Tensor::from_vec(&out_shape, out), self.rg(a) || self.rg(b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (t, rg) = self.binary(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (t, rg) = self.binary(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (t, rg) = self.binary(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (t, rg) = self.binary(a, b, |x, y| x / y);
        self.push(t, Op::Div(a, b), rg)
    }

    fn unary(&mut self, x: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let t = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = F::of(s);
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = F::of(s);
        self.unary(x, Op::MulScalar(x, s), |v| v * s)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.mul_scalar(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > F::zero() { v } else { F::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| {
            if v >= F::zero() {
                F::one() / (F::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (F::one() + e)
            }
        })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), |v| v.sqrt())
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (F::of(lo), F::of(hi));
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.max(lo).min(hi))
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Var {
        let in_shape = self.shape(x).to_vec();
        let mut out_shape = in_shape.clone();
        for &a in axes {
            assert!(a < in_shape.len(), "axis {a} out of range for {in_shape:?}");
            out_shape[a] = 1;
        }
        let mut out = vec![F::zero(); out_shape.iter().product()];
        let xd = self.value(x).data();
        for_each_broadcast(&out_shape, &in_shape, &in_shape, |i, o, _| out[o] += xd[i]);
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&out_shape, out), Op::SumAxes(x), rg)
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Var {
        let shape = self.shape(x);
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let s = self.sum_axes(x, axes);
        self.mul_scalar(s, 1.0 / count as f64)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum_axes(x, &axes)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let t = kernels::conv2d_forward(self.value(x), self.value(w), stride, pad);
        let rg = self.rg(x) || self.rg(w);
        self.push(t, Op::Conv2d { x, w, stride, pad }, rg)
    }

    pub fn conv_transpose2x2(&mut self, x: Var, w: Var) -> Var {
        let t = kernels::conv_transpose2x2_forward(self.value(x), self.value(w));
        let rg = self.rg(x) || self.rg(w);
        self.push(t, Op::ConvTranspose2x2 { x, w }, rg)
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (t, argmax) = kernels::max_pool2_forward(self.value(x));
        let rg = self.rg(x);
        self.push(t, Op::MaxPool2 { x, argmax }, rg)
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let t = kernels::adaptive_avg_pool_forward(self.value(x), oh, ow);
        let rg = self.rg(x);
        self.push(t, Op::AdaptiveAvgPool(x), rg)
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        let parts: Vec<&Tensor<F>> = xs.iter().map(|&v| self.value(v)).collect();
        let t = Tensor::concat_channels(&parts);
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(t, Op::Concat(xs.to_vec()), rg)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x).slice_channels(start, len);
        let rg = self.rg(x);
        self.push(t, Op::SliceChannels { x, start }, rg)
    }

    /// Softmax over the channel axis of a rank-4 tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4();
        let hw = h * w;
        let xd = xt.data();
        let mut out = vec![F::zero(); xd.len()];
        for b in 0..n {
            for p in 0..hw {
                let idx = |k: usize| (b * c + k) * hw + p;
                let m = (0..c).map(|k| xd[idx(k)]).fold(F::neg_infinity(), F::max);
                let mut z = F::zero();
                for k in 0..c {
                    let e = (xd[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..c {
                    out[idx(k)] /= z;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, c, h, w], out), Op::Softmax(x), rg)
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        let seed = Tensor::ones(self.shape(loss));
        assert_eq!(seed.numel(), 1, "backward needs a scalar loss");
        self.backward_with(loss, seed)
    }

    /// Reverse pass seeded with an arbitrary output gradient.
    pub fn backward_with(&self, out: Var, seed: Tensor<F>) -> Gradients<F> {
        assert_eq!(seed.shape(), self.shape(out));
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        if !self.rg(out) {
            return Gradients { grads };
        }
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, t: Tensor<F>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    /// Sums a broadcast-output gradient back down to `target` shape, weighting each
    /// element by `weight(out_idx, a_idx, b_idx)`.
    fn reduce_grad(
        &self,
        g: &Tensor<F>,
        a_shape: &[usize],
        b_shape: &[usize],
        for_a: bool,
        weight: impl Fn(usize, usize, usize) -> F,
    ) -> Tensor<F> {
        let target = if for_a { a_shape } else { b_shape };
        let mut out = vec![F::zero(); target.iter().product()];
        let gd = g.data();
        for_each_broadcast(a_shape, b_shape, g.shape(), |o, i, j| {
            let k = if for_a { i } else { j };
            out[k] += gd[o] * weight(o, i, j);
        });
        Tensor::from_vec(target, out)
    }

    fn backprop_node(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let one = F::one();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -one } else { one };
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                if self.rg(*a) {
                    let t = if sa == g.shape() { g.clone() } else { self.reduce_grad(g, &sa, &sb, true, |_, _, _| one) };
                    self.accumulate(grads, *a, t);
                }
                if self.rg(*b) {
                    let t = if sb == g.shape() {
                        g.map(|v| v * sign)
                    } else {
                        self.reduce_grad(g, &sa, &sb, false, |_, _, _| sign)
                    };
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let t = self.reduce_grad(g, &sa, &sb, true, |_, _, j| db[j]);
                    self.accumulate(grads, *a, t);
                }
                if self.rg(*b) {
                    let t = self.reduce_grad(g, &sa, &sb, false, |_, i, _| da[i]);
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Div(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let db = self.value(*b).data();
                let out = node.value.data();
                if self.rg(*a) {
                    let t = self.reduce_grad(g, &sa, &sb, true, |_, _, j| one / db[j]);
                    self.accumulate(grads, *a, t);
                }
                if self.rg(*b) {
                    let t = self.reduce_grad(g, &sa, &sb, false, |o, _, j| -out[o] / db[j]);
                    self.accumulate(grads, *b, t);
                }
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::MulScalar(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Relu(x) => {
                let t = g.zip_map(self.value(*x), |gv, xv| if xv > F::zero() { gv } else { F::zero() });
                self.accumulate(grads, *x, t);
            }
            Op::Sigmoid(x) => {
                let t = g.zip_map(&node.value, |gv, y| gv * y * (one - y));
                self.accumulate(grads, *x, t);
            }
            Op::Exp(x) => {
                let t = g.zip_map(&node.value, |gv, y| gv * y);
                self.accumulate(grads, *x, t);
            }
            Op::Log(x) => {
                let t = g.zip_map(self.value(*x), |gv, xv| gv / xv);
                self.accumulate(grads, *x, t);
            }
            Op::Sqrt(x) => {
                let half = F::of(0.5);
                // d sqrt at 0 is taken as 0 so exact fits do not produce NaN
                let t = g.zip_map(&node.value, |gv, y| if y > F::zero() { gv * half / y } else { F::zero() });
                self.accumulate(grads, *x, t);
            }
            Op::Abs(x) => {
                let t = g.zip_map(self.value(*x), |gv, xv| {
                    if xv > F::zero() {
                        gv
                    } else if xv < F::zero() {
                        -gv
                    } else {
                        F::zero()
                    }
                });
                self.accumulate(grads, *x, t);
            }
            Op::Square(x) => {
                let two = F::of(2.0);
                let t = g.zip_map(self.value(*x), |gv, xv| gv * two * xv);
                self.accumulate(grads, *x, t);
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let t = g.zip_map(self.value(*x), |gv, xv| if xv >= lo && xv <= hi { gv } else { F::zero() });
                self.accumulate(grads, *x, t);
            }
            Op::SumAxes(x) => {
                let xs = self.shape(*x).to_vec();
                let gd = g.data();
                let mut out = vec![F::zero(); xs.iter().product()];
                for_each_broadcast(g.shape(), &xs, &xs, |i, o, _| out[i] = gd[o]);
                self.accumulate(grads, *x, Tensor::from_vec(&xs, out));
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::ConvTranspose2x2 { x, w } => {
                let (dx, dw) = kernels::conv_transpose2x2_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![F::zero(); self.value(*x).numel()];
                for (gv, &k) in g.data().iter().zip(argmax) {
                    dx[k] += *gv;
                }
                self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx));
            }
            Op::AdaptiveAvgPool(x) => {
                let dx = kernels::adaptive_avg_pool_backward(self.shape(*x), g);
                self.accumulate(grads, *x, dx);
            }
            Op::Concat(xs) => {
                let mut start = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if self.rg(v) {
                        self.accumulate(grads, v, g.slice_channels(start, c));
                    }
                    start += c;
                }
            }
            Op::SliceChannels { x, start } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let len = g.shape()[1];
                let hw = h * w;
                let mut dx = vec![F::zero(); n * c * hw];
                for b in 0..n {
                    let dst = (b * c + start) * hw;
                    dx[dst..dst + len * hw].copy_from_slice(&g.data()[b * len * hw..(b + 1) * len * hw]);
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
            }
            Op::Softmax(x) => {
                let (n, c, h, w) = node.value.dims4();
                let hw = h * w;
                let (y, gd) = (node.value.data(), g.data());
                let mut dx = vec![F::zero(); y.len()];
                for b in 0..n {
                    for p in 0..hw {
                        let idx = |k: usize| (b * c + k) * hw + p;
                        let dot: F = (0..c).map(|k| gd[idx(k)] * y[idx(k)]).sum();
                        for k in 0..c {
                            dx[idx(k)] = y[idx(k)] * (gd[idx(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
            }
        }
    }

    /// Gradients of every trainable parameter bound into this graph, in binding order.
    pub fn param_grads(&self, grads: &Gradients<F>) -> Vec<(ParamId, Tensor<F>)> {
        self.param_order
            .iter()
            .filter_map(|id| {
                let v = self.params[id];
                if !self.rg(v) {
                    return None;
                }
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                Some((*id, g))
            })
            .collect()
    }

    /// The graph node a parameter was bound to, if any.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }
}

/// Rank-4 shape helper used by layers when broadcasting per-channel values.
pub fn channel_shape(c: usize) -> [usize; 4] {
    let mut s = pad4(&[c]);
    s.swap(1, 3);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec())
    }

    #[test]
    fn broadcast_mul_gradients() {
        let mut g = Graph::<f64>::new(true);
        let a = g.input(t(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.input(t(&[1, 2, 1, 1], &[10.0, 20.0]));
        let m = g.mul(a, b);
        assert_eq!(g.value(m).data(), &[10.0, 20.0, 60.0, 80.0]);
        let s = g.sum_all(m);
        let grads = g.backward(s);
        assert_eq!(grads.get(a).unwrap().data(), &[10.0, 10.0, 20.0, 20.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn shared_node_accumulates() {
        let mut g = Graph::<f64>::new(true);
        let x = g.input(t(&[1, 1, 1, 1], &[3.0]));
        let y = g.mul(x, x);
        let z = g.add(y, x);
        let grads = g.backward(z);
        assert_eq!(grads.get(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new(false);
        let x = g.constant(t(&[1, 1, 1, 1], &[3.0]));
        let y = g.input(t(&[1, 1, 1, 1], &[2.0]));
        let z = g.mul(x, y);
        let grads = g.backward(z);
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(y).unwrap().data(), &[3.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new(false);
        let x = g.constant(t(&[1, 3, 1, 2], &[1.0, -2.0, 0.5, 3.0, 100.0, 0.0]));
        let p = g.softmax_channels(x);
        let d = g.value(p).data();
        assert!((d[0] + d[2] + d[4] - 1.0).abs() < 1e-12);
        assert!((d[1] + d[3] + d[5] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sqrt_gradient_at_zero_is_finite() {
        let mut g = Graph::<f64>::new(true);
        let x = g.input(t(&[1, 1, 1, 1], &[0.0]));
        let s = g.sqrt(x);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn channel_shape_layout() {
        assert_eq!(channel_shape(5), [1, 5, 1, 1]);
    }
}
