//! Layer building blocks shared by the generator, discriminator and heads.
//!
//! Parameters are stored as `f32` tensors and bound onto a [`Graph`] per
//! forward pass. Whether a parameter becomes a differentiable leaf or a
//! constant is decided by the graph's trainable prefixes, which is how the
//! freezing policy is enforced.

use std::collections::{BTreeMap, HashMap};
use std::ops::{Deref, DerefMut};

use dorm_tensor::{Conv2dSpec, Grads, Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub const LRELU_SLOPE: f64 = 0.2;
pub const LRELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// A tape plus the bookkeeping that maps named parameters onto it.
pub struct Graph<T: Scalar> {
    tape: Tape<T>,
    trainable: Vec<String>,
    bound: HashMap<String, Var>,
    order: Vec<String>,
}

impl<T: Scalar> Graph<T> {
    /// Graph where every parameter is a constant.
    pub fn inference() -> Self {
        Self::training(&[])
    }

    /// Graph where parameters whose name starts with one of `prefixes` are trainable.
    pub fn training(prefixes: &[&str]) -> Self {
        Self {
            tape: Tape::new(),
            trainable: prefixes.iter().map(|p| p.to_string()).collect(),
            bound: HashMap::new(),
            order: Vec::new(),
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Bind a named parameter once per graph.
    pub fn bind(&mut self, name: &str, value: &Tensor<f32>) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let t = value.cast::<T>();
        let v = if self.is_trainable(name) {
            self.tape.param(t)
        } else {
            self.tape.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        self.order.push(name.to_string());
        v
    }

    /// Trainable parameters bound so far, in binding order.
    pub fn trainable_bindings(&self) -> Vec<(String, Var)> {
        self.order
            .iter()
            .filter(|n| self.is_trainable(n))
            .map(|n| (n.clone(), self.bound[n]))
            .collect()
    }

    /// Gradients of `loss` for every bound trainable parameter.
    pub fn parameter_grads(&self, loss: Var) -> BTreeMap<String, Tensor<T>> {
        let mut grads: Grads<T> = self.tape.backward(loss);
        self.trainable_bindings()
            .into_iter()
            .filter_map(|(name, v)| grads.take(v).map(|g| (name, g)))
            .collect()
    }
}

impl<T: Scalar> Deref for Graph<T> {
    type Target = Tape<T>;
    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T: Scalar> DerefMut for Graph<T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}

pub fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

/// Named parameter traversal, used for checkpoints, hashing and optimizers.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<f32>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<f32>));

    fn named_tensors(&self, prefix: &str) -> BTreeMap<String, Tensor<f32>> {
        let mut out = BTreeMap::new();
        self.visit(prefix, &mut |n, t| {
            out.insert(n.to_string(), t.clone());
        });
        out
    }

    /// SHA-256 per tensor, hex encoded.
    fn digests(&self, prefix: &str) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        self.visit(prefix, &mut |n, t| {
            out.insert(n.to_string(), tensor_digest(t));
        });
        out
    }

    /// One hash over every tensor's name, shape and payload.
    fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        self.visit("", &mut |n, t| {
            h.update(n.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        });
        hex::encode(h.finalize())
    }

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    /// Overwrite tensors from a name map; every visited name must be present with a matching shape.
    fn load_tensors(
        &mut self,
        prefix: &str,
        tensors: &BTreeMap<String, Tensor<f32>>,
    ) -> Result<(), String> {
        let mut err = None;
        self.visit_mut(prefix, &mut |n, t| {
            if err.is_some() {
                return;
            }
            match tensors.get(n) {
                Some(src) if src.shape() == t.shape() => *t = src.clone(),
                Some(src) => {
                    err = Some(format!(
                        "tensor `{n}` has shape {:?}, expected {:?}",
                        src.shape(),
                        t.shape()
                    ))
                }
                None => err = Some(format!("missing tensor `{n}`")),
            }
        });
        err.map_or(Ok(()), Err)
    }
}

pub fn tensor_digest(t: &Tensor<f32>) -> String {
    hex::encode(Sha256::digest(t.to_le_bytes()))
}

pub fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect(),
    )
}

/// Fully connected layer with equalized learning rate.
///
/// Stored weights are N(0, 1/lr_mul²) and scaled at runtime by
/// `lr_mul / sqrt(fan_in)`; the bias is scaled by `lr_mul`.
#[derive(Clone, Debug, PartialEq)]
pub struct EqLinear {
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub lr_mul: f32,
}

impl EqLinear {
    pub fn new(rng: &mut impl Rng, fan_in: usize, fan_out: usize, bias_init: f32, lr_mul: f32) -> Self {
        let weight = randn(rng, &[fan_out, fan_in]).map(|v| v / lr_mul);
        let bias = Tensor::full(vec![fan_out], bias_init / lr_mul);
        Self {
            weight,
            bias,
            lr_mul,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn fan_out(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn weight_gain(&self) -> f64 {
        self.lr_mul as f64 / (self.fan_in() as f64).sqrt()
    }

    /// Weight matrix as actually applied, `[out, in]`.
    pub fn effective_weight(&self) -> Tensor<f32> {
        let g = self.weight_gain() as f32;
        self.weight.map(|v| v * g)
    }

    pub fn effective_bias(&self) -> Tensor<f32> {
        let m = self.lr_mul;
        self.bias.map(|v| v * m)
    }

    /// `x [B, in] -> [B, out]`, no activation.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, name: &str, x: Var) -> Var {
        let w = g.bind(&join(name, "weight"), &self.weight);
        let b = g.bind(&join(name, "bias"), &self.bias);
        let w = g.scale(w, self.weight_gain());
        let y = g.matmul(x, w, false, true);
        let b = if self.lr_mul == 1.0 {
            b
        } else {
            g.scale(b, self.lr_mul as f64)
        };
        g.add(y, b)
    }
}

impl Parameters for EqLinear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<f32>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Plain (unmodulated) convolution with equalized learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct EqConv {
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub stride: usize,
}

impl EqConv {
    pub fn new(rng: &mut impl Rng, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        Self {
            weight: randn(rng, &[c_out, c_in, kernel, kernel]),
            bias: Tensor::zeros(vec![c_out]),
            stride,
        }
    }

    pub fn weight_gain(&self) -> f64 {
        let s = self.weight.shape();
        1.0 / ((s[1] * s[2] * s[3]) as f64).sqrt()
    }

    pub fn spec(&self) -> Conv2dSpec {
        let k = self.weight.dim(2);
        Conv2dSpec {
            stride: self.stride,
            ..Conv2dSpec::same(k)
        }
    }

    /// Convolution, bias and scaled leaky rectifier.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, name: &str, x: Var) -> Var {
        let w = g.bind(&join(name, "weight"), &self.weight);
        let b = g.bind(&join(name, "bias"), &self.bias);
        let w = g.scale(w, self.weight_gain());
        let y = g.conv2d(x, w, self.spec());
        let c = self.weight.dim(0);
        let b = g.reshape(b, &[1, c, 1, 1]);
        let y = g.add(y, b);
        lrelu(g, y)
    }
}

impl Parameters for EqConv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<f32>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Leaky rectifier with the usual √2 gain for conv stacks.
pub fn lrelu<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let y = g.leaky_relu(x, LRELU_SLOPE);
    g.scale(y, LRELU_GAIN)
}

/// Adam with per-parameter state keyed by name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: HashMap<String, AdamSlot>,
}

#[derive(Clone, Debug)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            state: HashMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor<f32>, grad: &Tensor<f32>) {
        assert_eq!(param.shape(), grad.shape(), "gradient shape for `{name}`");
        let slot = self.state.entry(name.to_string()).or_insert_with(|| AdamSlot {
            m: vec![0.0; param.numel()],
            v: vec![0.0; param.numel()],
            t: 0,
        });
        slot.t += 1;
        let bc1 = 1.0 - self.beta1.powi(slot.t);
        let bc2 = 1.0 - self.beta2.powi(slot.t);
        for (i, p) in param.data_mut().iter_mut().enumerate() {
            let gi = grad.data()[i] as f64;
            slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * gi;
            slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * gi * gi;
            let mhat = slot.m[i] / bc1;
            let vhat = slot.v[i] / bc2;
            *p -= (self.lr * mhat / (vhat.sqrt() + self.eps)) as f32;
        }
    }

    /// Apply every gradient in `grads` to the matching tensors of `module`.
    pub fn apply(
        &mut self,
        module: &mut dyn Parameters,
        prefix: &str,
        grads: &BTreeMap<String, Tensor<f32>>,
    ) {
        module.visit_mut(prefix, &mut |n, t| {
            if let Some(g) = grads.get(n) {
                self.step(n, t, g);
            }
        });
    }
}
