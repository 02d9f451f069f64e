//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. Leaves are
//! either constants (no gradient) or parameters; any node downstream of a
//! parameter is marked as needing a gradient, everything else is skipped
//! by [`Tape::backward`].

use crate::scalar::Scalar;
use crate::tensor::{Conv2dSpec, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Sqrt(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Softplus(Var),
    Sigmoid(Var),
    Square(Var),
    Powf(Var, f64),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, w: Var, spec: Conv2dSpec },
    Upsample2x(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    SumAxes(Var, Vec<usize>),
    Extremum { x: Var, axis: usize, args: Vec<usize> },
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, value: Tensor<T>, op: Op, x: Var) -> Var {
        let g = self.nodes[x.0].needs_grad;
        self.push(value, op, g)
    }

    fn binary(&mut self, value: Tensor<T>, op: Op, a: Var, b: Var) -> Var {
        let g = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(value, op, g)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(T::of(value)))
    }

    /// Copy of `v` cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).broadcast_zip(self.value(b), |x, y| x + y);
        self.binary(v, Op::Add(a, b), a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).broadcast_zip(self.value(b), |x, y| x - y);
        self.binary(v, Op::Sub(a, b), a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).broadcast_zip(self.value(b), |x, y| x * y);
        self.binary(v, Op::Mul(a, b), a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).broadcast_zip(self.value(b), |x, y| x / y);
        self.binary(v, Op::Div(a, b), a, b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let v = self.value(x).map(|e| e * f);
        self.unary(v, Op::Scale(x, factor), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let v = self.value(x).map(|e| e + c);
        self.unary(v, Op::AddScalar(x), x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        let v = self
            .value(x)
            .map(|e| if e > T::zero() { e } else { e * s });
        self.unary(v, Op::LeakyRelu(x, slope), x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.sqrt());
        self.unary(v, Op::Sqrt(x), x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.exp());
        self.unary(v, Op::Exp(x), x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.ln());
        self.unary(v, Op::Log(x), x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.abs());
        self.unary(v, Op::Abs(x), x)
    }

    /// `ln(1 + e^x)` evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(softplus);
        self.unary(v, Op::Softplus(x), x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.unary(v, Op::Sigmoid(x), x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * e);
        self.unary(v, Op::Square(x), x)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        let pt = T::of(p);
        let v = self.value(x).map(|e| e.powf(pt));
        self.unary(v, Op::Powf(x, p), x)
    }

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let v = self.value(a).matmul(self.value(b), ta, tb);
        self.binary(v, Op::MatMul { a, b, ta, tb }, a, b)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, spec: Conv2dSpec) -> Var {
        let v = self.value(x).conv2d(self.value(w), spec);
        self.binary(v, Op::Conv2d { x, w, spec }, x, w)
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let v = self.value(x).upsample2x();
        self.unary(v, Op::Upsample2x(x), x)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape.to_vec());
        self.unary(v, Op::Reshape(x), x)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let v = self.value(x).permute(axes);
        self.unary(v, Op::Permute(x, axes.to_vec()), x)
    }

    pub fn sum_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Var {
        let kept = self.value(x).reduced_shape(axes);
        let v = self.value(x).sum_axes(axes, keepdim);
        self.unary(v, Op::SumAxes(x, kept), x)
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Var {
        let count: usize = axes.iter().map(|&a| self.shape(x)[a]).product();
        let s = self.sum_axes(x, axes, keepdim);
        self.scale(s, 1.0 / count as f64)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum_axes(x, &axes, false)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn min_axis(&mut self, x: Var, axis: usize) -> Var {
        let (v, args) = self.value(x).extremum_axis(axis, false);
        self.unary(v, Op::Extremum { x, axis, args }, x)
    }

    pub fn max_axis(&mut self, x: Var, axis: usize) -> Var {
        let (v, args) = self.value(x).extremum_axis(axis, true);
        self.unary(v, Op::Extremum { x, axis, args }, x)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&tensors, axis);
        let g = parts.iter().any(|&p| self.nodes[p.0].needs_grad);
        self.push(v, Op::Concat(parts.to_vec(), axis), g)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self.value(x).narrow(axis, start, len);
        self.unary(v, Op::Narrow { x, axis, start }, x)
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, output: Var) -> Grads<T> {
        assert_eq!(
            self.value(output).numel(),
            1,
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::ones(self.shape(output).to_vec()));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        // Leaves keep their accumulated gradient; interior entries were consumed.
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let shape = self.shape(v);
        let g = if g.shape() == shape {
            g
        } else if g.numel() == shape.iter().product::<usize>() {
            g.reshape(shape.to_vec())
        } else {
            g.sum_to_shape(shape)
        };
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|e| -e));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let ga = g.broadcast_zip(self.value(*b), |x, y| x * y);
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = g.broadcast_zip(self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Div(a, b) => {
                if self.wants(*a) {
                    let ga = g.broadcast_zip(self.value(*b), |x, y| x / y);
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gy = g.zip_map(out, |x, y| x * y);
                    let gb = gy.broadcast_zip(self.value(*b), |x, y| -x / y);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(x, f) => {
                let f = T::of(*f);
                self.accumulate(grads, *x, g.map(|e| e * f));
            }
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate(grads, *x, g.clone()),
            Op::LeakyRelu(x, slope) => {
                let s = T::of(*slope);
                let gx = g.zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { gv * s });
                self.accumulate(grads, *x, gx);
            }
            Op::Sqrt(x) => {
                let half = T::of(0.5);
                self.accumulate(grads, *x, g.zip_map(out, |gv, y| gv * half / y));
            }
            Op::Exp(x) => self.accumulate(grads, *x, g.zip_map(out, |gv, y| gv * y)),
            Op::Log(x) => {
                self.accumulate(grads, *x, g.zip_map(self.value(*x), |gv, xv| gv / xv))
            }
            Op::Abs(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Softplus(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| gv * sigmoid(xv));
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_map(out, |gv, y| gv * y * (T::one() - y));
                self.accumulate(grads, *x, gx);
            }
            Op::Square(x) => {
                let two = T::of(2.0);
                let gx = g.zip_map(self.value(*x), |gv, xv| gv * two * xv);
                self.accumulate(grads, *x, gx);
            }
            Op::Powf(x, p) => {
                let pt = T::of(*p);
                let pm1 = T::of(*p - 1.0);
                let gx = g.zip_map(self.value(*x), |gv, xv| gv * pt * xv.powf(pm1));
                self.accumulate(grads, *x, gx);
            }
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    // C = op(A) op(B): dop(A) = G op(B)^T
                    let ga = if *ta {
                        bv.matmul(g, *tb, true)
                    } else {
                        g.matmul(bv, false, !*tb)
                    };
                    self.accumulate(grads, *a, reduce_batch(ga, av.shape()));
                }
                if self.wants(*b) {
                    let gb = if *tb {
                        g.matmul(av, true, *ta)
                    } else {
                        av.matmul(g, !*ta, false)
                    };
                    self.accumulate(grads, *b, reduce_batch(gb, bv.shape()));
                }
            }
            Op::Conv2d { x, w, spec } => {
                let (gx, gw) = Tensor::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *spec,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw);
                }
            }
            Op::Upsample2x(x) => self.accumulate(grads, *x, g.sum_pool2x()),
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                self.accumulate(grads, *x, g.permute(&inverse));
            }
            Op::SumAxes(x, kept) => {
                let shape = self.shape(*x).to_vec();
                let gk = g.clone().reshape(kept.clone());
                self.accumulate(grads, *x, gk.broadcast_to(&shape));
            }
            Op::Extremum { x, axis, args } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let size = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let mut gx = Tensor::zeros(shape.to_vec());
                let d = gx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let k = args[o * inner + i];
                        d[(o * size + k) * inner + i] += g.data()[o * inner + i];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.wants(p) {
                        self.accumulate(grads, p, g.narrow(*axis, start, len));
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x);
                let len = g.shape()[*axis];
                let mut pieces = Vec::new();
                if *start > 0 {
                    let mut s = shape.to_vec();
                    s[*axis] = *start;
                    pieces.push(Tensor::zeros(s));
                }
                pieces.push(g.clone());
                let rest = shape[*axis] - start - len;
                if rest > 0 {
                    let mut s = shape.to_vec();
                    s[*axis] = rest;
                    pieces.push(Tensor::zeros(s));
                }
                let refs: Vec<&Tensor<T>> = pieces.iter().collect();
                self.accumulate(grads, *x, Tensor::concat(&refs, *axis));
            }
        }
    }
}

/// Sum a batched gradient back down to an unbatched operand.
fn reduce_batch<T: Scalar>(g: Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g;
    }
    if shape.len() == 2 && g.ndim() == 3 {
        return g.sum_axes(&[0], false);
    }
    g.sum_to_shape(shape)
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    // max(x, 0) + ln(1 + e^-|x|)
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
