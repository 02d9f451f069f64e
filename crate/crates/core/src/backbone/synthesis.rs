use dorm_tensor::{Conv2dSpec, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BackboneConfig, NoiseMode, StyleVector};
use crate::error::{ensure, Result};
use crate::nn::{join, lrelu, randn, Graph, Parameters};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// 3x3 modulated + demodulated convolution, optionally preceded by 2x upsampling.
    Conv { upsample: bool },
    /// 1x1 modulated convolution to RGB, no demodulation.
    ToRgb,
}

/// Static description of one style-consuming layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerInfo {
    pub index: usize,
    pub resolution: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kind: LayerKind,
}

impl LayerInfo {
    pub fn all(cfg: &BackboneConfig) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        let mut prev = cfg.channels_at(4);
        for res in cfg.block_resolutions() {
            let ch = cfg.channels_at(res);
            let mut push = |in_c, out_c, kind| {
                let index = out.len();
                out.push(LayerInfo {
                    index,
                    resolution: res,
                    in_channels: in_c,
                    out_channels: out_c,
                    kind,
                });
            };
            if res == 4 {
                push(ch, ch, LayerKind::Conv { upsample: false });
            } else {
                push(prev, ch, LayerKind::Conv { upsample: true });
                push(ch, ch, LayerKind::Conv { upsample: false });
            }
            push(ch, 3, LayerKind::ToRgb);
            prev = ch;
        }
        out
    }

    pub fn kernel(&self) -> usize {
        match self.kind {
            LayerKind::Conv { .. } => 3,
            LayerKind::ToRgb => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthLayer {
    pub info: LayerInfo,
    /// Raw `[out, in, k, k]` weights; scaled by `1/sqrt(in·k·k)` at runtime.
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub noise_strength: Tensor<f32>,
}

impl SynthLayer {
    pub fn weight_gain(&self) -> f64 {
        let k = self.info.kernel();
        1.0 / ((self.info.in_channels * k * k) as f64).sqrt()
    }

    pub fn effective_weight(&self) -> Tensor<f32> {
        let g = self.weight_gain() as f32;
        self.weight.map(|v| v * g)
    }
}

/// Synthesis network `g`: learned 4x4 constant, modulated conv stack, skip-connected RGB outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisNetwork {
    pub const_input: Tensor<f32>,
    pub layers: Vec<SynthLayer>,
    pub demod_eps: f64,
}

impl SynthesisNetwork {
    pub fn new(rng: &mut impl rand::Rng, cfg: &BackboneConfig) -> Self {
        let c4 = cfg.channels_at(4);
        let const_input = randn(rng, &[c4, 4, 4]);
        let layers = LayerInfo::all(cfg)
            .into_iter()
            .map(|info| {
                let k = info.kernel();
                SynthLayer {
                    info,
                    weight: randn(rng, &[info.out_channels, info.in_channels, k, k]),
                    bias: Tensor::zeros(vec![info.out_channels]),
                    noise_strength: Tensor::zeros(vec![1]),
                }
            })
            .collect();
        Self {
            const_input,
            layers,
            demod_eps: cfg.demod_eps,
        }
    }

    /// Run the stack on per-layer style batches (`[B, in_channels]` each); returns `[B, 3, H, W]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        name: &str,
        styles: &[Var],
        noise: NoiseMode,
    ) -> Var {
        assert_eq!(styles.len(), self.layers.len(), "one style per layer");
        let batch = g.shape(styles[0])[0];
        let c4 = self.const_input.dim(0);
        let cst = g.bind(&join(name, "const"), &self.const_input);
        let cst = g.reshape(cst, &[1, c4, 4, 4]);
        let zeros = g.constant(Tensor::zeros(vec![batch, c4, 4, 4]));
        let mut x = g.add(zeros, cst);
        let mut rgb: Option<Var> = None;
        for (layer, &s) in self.layers.iter().zip(styles) {
            let lname = join(name, &layer.info.index.to_string());
            let w = g.bind(&join(&lname, "weight"), &layer.weight);
            let b = g.bind(&join(&lname, "bias"), &layer.bias);
            let w = g.scale(w, layer.weight_gain());
            match layer.info.kind {
                LayerKind::Conv { upsample } => {
                    if upsample {
                        x = g.upsample2x(x);
                    }
                    let mut y = modulated_conv(g, x, w, s, true, self.demod_eps);
                    if let NoiseMode::Seeded(seed) = noise {
                        let strength = g.bind(&join(&lname, "noise_strength"), &layer.noise_strength);
                        let shape = g.shape(y).to_vec();
                        let mut rng = ChaCha8Rng::seed_from_u64(
                            seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ layer.info.index as u64,
                        );
                        let n = randn(&mut rng, &[shape[0], 1, shape[2], shape[3]]).cast::<T>();
                        let n = g.constant(n);
                        let n = g.mul(n, strength);
                        y = g.add(y, n);
                    }
                    let b = g.reshape(b, &[1, layer.info.out_channels, 1, 1]);
                    let y = g.add(y, b);
                    x = lrelu(g, y);
                }
                LayerKind::ToRgb => {
                    let y = modulated_conv(g, x, w, s, false, self.demod_eps);
                    let b = g.reshape(b, &[1, 3, 1, 1]);
                    let y = g.add(y, b);
                    rgb = Some(match rgb {
                        None => y,
                        Some(prev) => {
                            let up = g.upsample2x(prev);
                            g.add(up, y)
                        }
                    });
                }
            }
        }
        rgb.expect("synthesis has at least one RGB layer")
    }
}

/// Modulated convolution in the batched form: scale input channels by the
/// style, convolve with the shared weight, then rescale each output channel by
/// the demodulation coefficient. Equivalent to convolving with per-sample
/// weights `w'' = (s·w) / ||s·w||`.
fn modulated_conv<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    s: Var,
    demodulate: bool,
    eps: f64,
) -> Var {
    let batch = g.shape(s)[0];
    let wshape = g.shape(w).to_vec();
    let (c_out, c_in, k) = (wshape[0], wshape[1], wshape[2]);
    let s4 = g.reshape(s, &[batch, c_in, 1, 1]);
    let xs = g.mul(x, s4);
    let y = g.conv2d(xs, w, Conv2dSpec::same(k));
    if !demodulate {
        return y;
    }
    let w2 = g.square(w);
    let w2 = g.sum_axes(w2, &[2, 3], false);
    let s2 = g.square(s);
    let d = g.matmul(s2, w2, false, true);
    let d = g.add_scalar(d, eps);
    let d = g.powf(d, -0.5);
    let d = g.reshape(d, &[batch, c_out, 1, 1]);
    g.mul(y, d)
}

/// Explicit per-sample modulated and demodulated weights:
/// `w'[o,i,..] = s[i]·w[o,i,..]`, `w''[o] = w'[o] / sqrt(||w'[o]||² + eps)`.
pub fn modulate_demodulate(weights: &Tensor<f32>, s: &StyleVector, eps: f64) -> Result<Tensor<f32>> {
    ensure!(weights.ndim() == 4, "weights must be [out, in, k, k]");
    let shape = weights.shape();
    let (c_out, c_in) = (shape[0], shape[1]);
    let taps = shape[2] * shape[3];
    ensure!(
        s.0.len() == c_in,
        "style has {} entries but the weights have {c_in} input channels",
        s.0.len()
    );
    let mut out = weights.clone();
    let d = out.data_mut();
    for o in 0..c_out {
        let row = &mut d[o * c_in * taps..(o + 1) * c_in * taps];
        for i in 0..c_in {
            for v in &mut row[i * taps..(i + 1) * taps] {
                *v *= s.0[i];
            }
        }
        let norm2: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum();
        let inv = 1.0 / (norm2 + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v as f64 * inv) as f32;
        }
    }
    Ok(out)
}

impl Parameters for SynthesisNetwork {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<f32>)) {
        f(&join(prefix, "const"), &self.const_input);
        for l in &self.layers {
            let n = join(prefix, &l.info.index.to_string());
            f(&join(&n, "weight"), &l.weight);
            f(&join(&n, "bias"), &l.bias);
            if matches!(l.info.kind, LayerKind::Conv { .. }) {
                f(&join(&n, "noise_strength"), &l.noise_strength);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
        f(&join(prefix, "const"), &mut self.const_input);
        for l in &mut self.layers {
            let n = join(prefix, &l.info.index.to_string());
            f(&join(&n, "weight"), &mut l.weight);
            f(&join(&n, "bias"), &mut l.bias);
            if matches!(l.info.kind, LayerKind::Conv { .. }) {
                f(&join(&n, "noise_strength"), &mut l.noise_strength);
            }
        }
    }
}
