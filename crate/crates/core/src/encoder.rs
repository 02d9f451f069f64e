//! Frozen image encoder used for structure losses, desk-FID and perceptual distances.
//!
//! The default is a small strided convolution stack with seeded orthogonal
//! weights. Its tokens are the spatial positions of an intermediate layer.

use std::path::Path;

use dorm_tensor::{Conv2dSpec, PadMode, Scalar, Tensor, Var};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::error::{ensure, DormError, Result};
use crate::image::{stack, ImageTensor};
use crate::nn::{join, randn, Graph, Parameters, LRELU_SLOPE};

pub const ENCODER_KIND: &str = "encoder";
pub const NORM_EPS: f64 = 1e-8;
const PREFIX: &str = "encoder";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    SeededRandomConv,
    LoadedWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub resolution: usize,
    /// Output channels of each layer; the last entry is `c` for pooled features.
    pub channels: Vec<usize>,
    /// Stride of each layer.
    pub strides: Vec<usize>,
    pub kernel: usize,
    /// Layer whose output forms the token grid (default: penultimate).
    pub layer_index: usize,
    pub seed: u64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            kind: EncoderKind::SeededRandomConv,
            resolution: 32,
            channels: vec![32, 64, 64],
            strides: vec![2, 2, 1],
            kernel: 3,
            layer_index: 1,
            seed: 1234,
        }
    }
}

impl EncoderSpec {
    pub fn for_resolution(resolution: usize) -> Self {
        Self {
            resolution,
            ..Self::default()
        }
    }

    pub fn depth(&self) -> usize {
        self.channels.len()
    }

    /// Product of strides up to and including the token layer.
    pub fn patch(&self) -> usize {
        self.strides[..=self.layer_index].iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.channels.is_empty(), "encoder needs at least one layer");
        ensure!(
            self.strides.len() == self.channels.len(),
            "encoder has {} strides for {} layers",
            self.strides.len(),
            self.channels.len()
        );
        ensure!(self.layer_index < self.depth(), "token layer {} out of range", self.layer_index);
        ensure!(self.kernel % 2 == 1, "encoder kernel must be odd");
        let total: usize = self.strides.iter().product();
        ensure!(
            self.resolution % total == 0 && self.resolution >= total,
            "resolution {} is not divisible by the total stride {total}",
            self.resolution
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct EncoderLayer {
    weight: Tensor<f32>,
    bias: Tensor<f32>,
    stride: usize,
}

/// `n × c` token matrix from one image.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub tokens: Tensor<f32>,
    pub layer_index: usize,
    pub source_image_hash: String,
}

impl TokenGrid {
    pub fn from_tokens(tokens: Tensor<f32>) -> Self {
        Self {
            tokens,
            layer_index: 0,
            source_image_hash: String::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.tokens.dim(0)
    }

    pub fn c(&self) -> usize {
        self.tokens.dim(1)
    }
}

/// `n × n` token cosine similarities.
#[derive(Clone, Debug, PartialEq)]
pub struct AutoCorrMap {
    pub m: Tensor<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    spec: EncoderSpec,
    layers: Vec<EncoderLayer>,
}

impl Encoder {
    /// Seeded orthogonal initialization; parameters never change afterwards.
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut c_in = 3;
        let mut layers = Vec::new();
        for (&c_out, &stride) in spec.channels.iter().zip(&spec.strides) {
            let fan_in = c_in * spec.kernel * spec.kernel;
            let q = orthogonal(&mut rng, c_out, fan_in);
            let gain = crate::nn::LRELU_GAIN;
            let weight = Tensor::new(
                vec![c_out, c_in, spec.kernel, spec.kernel],
                q.iter().map(|v| (v * gain) as f32).collect(),
            );
            layers.push(EncoderLayer {
                weight,
                bias: Tensor::zeros(vec![c_out]),
                stride,
            });
            c_in = c_out;
        }
        Ok(Self { spec, layers })
    }

    pub fn default_for(resolution: usize) -> Self {
        Self::new(EncoderSpec::for_resolution(resolution)).expect("default encoder spec is valid")
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    /// Token count `n` for the configured resolution.
    pub fn num_tokens(&self) -> usize {
        let side = self.spec.resolution / self.spec.patch();
        side * side
    }

    pub fn token_channels(&self) -> usize {
        self.spec.channels[self.spec.layer_index]
    }

    pub fn pooled_dim(&self) -> usize {
        self.token_channels()
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(ENCODER_KIND)?;
        let mut spec: EncoderSpec = serde_json::from_value(ckpt.meta.config.clone())
            .map_err(|e| DormError::IncompatibleCheckpoint(format!("encoder spec: {e}")))?;
        spec.kind = EncoderKind::LoadedWeights;
        let mut enc = Self::new(spec)?;
        enc.load_tensors(PREFIX, &ckpt.tensors)
            .map_err(DormError::IncompatibleCheckpoint)?;
        Ok(enc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = CheckpointMeta::new(ENCODER_KIND, json!(self.spec));
        Checkpoint::new(meta, self.named_tensors(PREFIX))
    }

    fn check(&self, x: &ImageTensor) -> Result<()> {
        ensure!(
            x.height() == self.spec.resolution && x.width() == self.spec.resolution,
            "image is {}x{}, encoder expects {r}x{r}",
            x.height(),
            x.width(),
            r = self.spec.resolution
        );
        Ok(())
    }

    /// Every layer's activation for a `[B, 3, H, W]` batch.
    pub fn features_on<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Vec<Var> {
        self.run(g, x, self.layers.len() - 1)
    }

    fn run<T: Scalar>(&self, g: &mut Graph<T>, x: Var, last: usize) -> Vec<Var> {
        let mut h = x;
        let mut out = Vec::with_capacity(last + 1);
        for l in &self.layers[..=last] {
            // Always constants: the encoder is never trained.
            let w = g.constant(l.weight.cast::<T>());
            let b = g.constant(l.bias.cast::<T>());
            let spec = Conv2dSpec {
                stride: l.stride,
                padding: self.spec.kernel / 2,
                pad_mode: PadMode::Replicate,
            };
            let y = g.conv2d(h, w, spec);
            let b = g.reshape(b, &[1, l.weight.dim(0), 1, 1]);
            let y = g.add(y, b);
            h = g.leaky_relu(y, LRELU_SLOPE);
            out.push(h);
        }
        out
    }

    /// Tokens `[B, n, c]` from the configured layer.
    pub fn tokens_on<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let feats = self.run(g, x, self.spec.layer_index);
        let f = feats[self.spec.layer_index];
        let s = g.shape(f).to_vec();
        let flat = g.reshape(f, &[s[0], s[1], s[2] * s[3]]);
        g.permute(flat, &[0, 2, 1])
    }

    /// Mean token `[B, c]`.
    pub fn pooled_on<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let t = self.tokens_on(g, x);
        g.mean_axes(t, &[1], false)
    }

    pub fn extract_tokens(&self, x: &ImageTensor) -> Result<TokenGrid> {
        self.check(x)?;
        let mut g = Graph::<f32>::inference();
        let xv = g.constant(stack(&[x]));
        let t = self.tokens_on(&mut g, xv);
        let t = g.value(t).clone();
        let (n, c) = (t.dim(1), t.dim(2));
        Ok(TokenGrid {
            tokens: t.reshape(vec![n, c]),
            layer_index: self.spec.layer_index,
            source_image_hash: hex::encode(Sha256::digest(x.pixels().to_le_bytes())),
        })
    }

    pub fn pooled_features(&self, x: &ImageTensor) -> Result<Vec<f32>> {
        Ok(self.pooled_batch(&[x])?.into_iter().next().expect("one image"))
    }

    /// Pooled features for many images, one row each.
    pub fn pooled_batch(&self, images: &[&ImageTensor]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            for x in chunk {
                self.check(x)?;
            }
            let mut g = Graph::<f32>::inference();
            let xv = g.constant(stack(chunk));
            let p = self.pooled_on(&mut g, xv);
            let c = g.shape(p)[1];
            out.extend(g.value(p).data().chunks(c).map(|r| r.to_vec()));
        }
        Ok(out)
    }

    /// Concatenation of every layer's flattened activation.
    pub fn all_features(&self, x: &ImageTensor) -> Result<Vec<f32>> {
        self.check(x)?;
        let mut g = Graph::<f32>::inference();
        let xv = g.constant(stack(&[x]));
        let feats = self.features_on(&mut g, xv);
        Ok(feats
            .iter()
            .flat_map(|&f| g.value(f).data().to_vec())
            .collect())
    }
}

/// `[B, n, c] -> [B, n, n]` cosine matrix.
pub fn autocorr_on<T: Scalar>(g: &mut Graph<T>, tokens: Var) -> Var {
    let unit = normalize_rows_on(g, tokens);
    g.matmul(unit, unit, false, true)
}

/// Divide each row (last axis) by `sqrt(‖x‖² + ε²)`.
///
/// Guarding under the root keeps cosines of ordinary tokens exact while
/// still avoiding a division by zero for all-zero rows.
pub fn normalize_rows_on<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let rank = g.shape(x).len();
    let sq = g.square(x);
    let ss = g.sum_axes(sq, &[rank - 1], true);
    let ss = g.add_scalar(ss, NORM_EPS * NORM_EPS);
    let norm = g.sqrt(ss);
    g.div(x, norm)
}

pub fn autocorr(f: &TokenGrid) -> AutoCorrMap {
    let mut g = Graph::<f64>::inference();
    let (n, c) = (f.n(), f.c());
    let t = g.constant(f.tokens.cast::<f64>().reshape(vec![1, n, c]));
    let m = autocorr_on(&mut g, t);
    AutoCorrMap {
        m: g.value(m).clone().reshape(vec![n, n]),
    }
}

/// `rows × cols` matrix with orthonormal rows (or columns when `rows > cols`).
fn orthogonal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let (big, small) = (rows.max(cols), rows.min(cols));
    let a = randn(rng, &[big, small]);
    let m = DMatrix::from_row_slice(big, small, &a.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
    let qr = m.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Sign fix so the decomposition is unique.
    for j in 0..small {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
        }
    }
    out
}

impl Parameters for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<f32>)) {
        for (i, l) in self.layers.iter().enumerate() {
            let n = join(prefix, &i.to_string());
            f(&join(&n, "weight"), &l.weight);
            f(&join(&n, "bias"), &l.bias);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let n = join(prefix, &i.to_string());
            f(&join(&n, "weight"), &mut l.weight);
            f(&join(&n, "bias"), &mut l.bias);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let enc = Encoder::default_for(32);
        assert_eq!(enc.num_tokens(), 64);
        assert_eq!(enc.token_channels(), 64);
        let img = ImageTensor::constant(32, [0.2, -0.4, 0.9]);
        let t = enc.extract_tokens(&img).unwrap();
        assert_eq!((t.n(), t.c()), (64, 64));
    }

    #[test]
    fn weights_are_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = orthogonal(&mut rng, 5, 12);
        for a in 0..5 {
            for b in 0..5 {
                let dot: f64 = (0..12).map(|k| q[a * 12 + k] * q[b * 12 + k]).sum();
                assert!((dot - if a == b { 1.0 } else { 0.0 }).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn orthogonal_tokens() {
        let f = TokenGrid::from_tokens(Tensor::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 3.0]));
        let m = autocorr(&f).m;
        let want = [1.0, 0.0, 0.0, 1.0];
        for (a, b) in m.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_wrong_size() {
        let enc = Encoder::default_for(32);
        assert!(enc.extract_tokens(&ImageTensor::constant(16, [0.0; 3])).is_err());
    }
}
