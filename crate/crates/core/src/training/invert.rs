use dorm_tensor::{Scalar, Tensor, Var};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{IntermediateLatent, NoiseMode, SourceGenerator};
use crate::encoder::Encoder;
use crate::error::{ensure, Result};
use crate::image::{stack, ImageTensor};
use crate::nn::{randn, Adam, Graph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    pub steps: usize,
    pub lr: f64,
    /// Weight of the pooled-feature term next to the pixel MSE.
    pub feature_weight: f64,
    /// Latents averaged for the mean-`w` starting point.
    pub mean_samples: usize,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 0.01,
            feature_weight: 0.1,
            mean_samples: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionResult {
    /// One `w` per style layer.
    pub w_plus: Vec<IntermediateLatent>,
    pub final_loss: f64,
    /// Pixel MSE of the returned latent.
    pub mse: f64,
}

impl InversionResult {
    pub fn flat(&self) -> Vec<f64> {
        self.w_plus.iter().flat_map(|w| w.0.iter().map(|&v| v as f64)).collect()
    }
}

/// Average of `f_s(z)` over seeded samples.
pub fn mean_latent(source: &SourceGenerator, samples: usize, seed: u64) -> IntermediateLatent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = randn(&mut rng, &[samples.max(1), source.config.z_dim]);
    let w = source.mapping.eval(&z);
    let mean = w.sum_axes(&[0], false).map(|v| v / samples.max(1) as f32);
    IntermediateLatent(mean.into_data())
}

/// Gradient-descent inversion into W+ (one `w` per style layer).
///
/// Minimizes pixel MSE plus `feature_weight` times the MSE of pooled encoder
/// features, starting from `init` or from the mean latent.
pub fn invert_latent(
    source: &SourceGenerator,
    encoder: &Encoder,
    image: &ImageTensor,
    init: Option<&[IntermediateLatent]>,
    cfg: &InversionConfig,
) -> Result<InversionResult> {
    let res = source.resolution();
    ensure!(
        image.height() == res && image.width() == res,
        "image is {}x{}, generator renders {res}x{res}",
        image.height(),
        image.width()
    );
    let layers = source.num_layers();
    let d_w = source.config.w_dim;
    let mut wp = match init {
        Some(ws) => {
            ensure!(ws.len() == layers, "init has {} latents for {layers} layers", ws.len());
            ensure!(ws.iter().all(|w| w.0.len() == d_w), "init latents must have length {d_w}");
            Tensor::new(vec![layers, d_w], ws.iter().flat_map(|w| w.0.clone()).collect())
        }
        None => {
            let m = mean_latent(source, cfg.mean_samples, cfg.seed);
            Tensor::new(vec![layers, d_w], (0..layers).flat_map(|_| m.0.clone()).collect())
        }
    };
    let target = stack(&[image]);
    let target_feats = {
        let mut g = Graph::<f32>::inference();
        let x = g.constant(target.clone());
        let p = encoder.pooled_on(&mut g, x);
        g.value(p).clone()
    };
    let mut opt = Adam::new(cfg.lr, 0.9, 0.999, 1e-8);
    let mut last = (f64::NAN, f64::NAN);
    for step in 0..=cfg.steps {
        let mut g = Graph::<f32>::inference();
        let w = g.param(wp.clone());
        let (loss, mse) = inversion_loss(&mut g, source, encoder, w, &target, &target_feats, cfg.feature_weight);
        last = (g.value(loss).item() as f64, g.value(mse).item() as f64);
        if step == cfg.steps || !last.0.is_finite() {
            break;
        }
        let mut grads = g.backward(loss);
        let grad = grads.take(w).expect("latent gradient");
        opt.step("w_plus", &mut wp, &grad);
    }
    let w_plus = wp
        .data()
        .chunks(d_w)
        .map(|c| IntermediateLatent(c.to_vec()))
        .collect();
    Ok(InversionResult {
        w_plus,
        final_loss: last.0,
        mse: last.1,
    })
}

fn inversion_loss(
    g: &mut Graph<f32>,
    source: &SourceGenerator,
    encoder: &Encoder,
    w: Var,
    target: &Tensor<f32>,
    target_feats: &Tensor<f32>,
    feature_weight: f64,
) -> (Var, Var) {
    let styles: Vec<Var> = (0..source.num_layers())
        .map(|l| {
            let wl = g.narrow(w, 0, l, 1);
            source.affine_on(g, l, wl)
        })
        .collect();
    let img = source.synthesize_on(g, &styles, NoiseMode::Off);
    let t = g.constant(target.clone());
    let d = g.sub(img, t);
    let d2 = g.square(d);
    let mse = g.mean(d2);
    let p = encoder.pooled_on(g, img);
    let tf = g.constant(target_feats.clone());
    let fd = g.sub(p, tf);
    let fd2 = g.square(fd);
    let fmse = g.mean(fd2);
    let fw = g.scale(fmse, feature_weight);
    (g.add(mse, fw), mse)
}

/// Differentiable map from styles back to W+ through ridge pseudo-inverses of `A_s`.
///
/// For layer `l`: `w_l = P_l (s_l − b_l)` with `P_l = (WᵀW + λI)⁻¹Wᵀ`.
#[derive(Clone, Debug)]
pub struct StyleInverter {
    /// `[d_w, C_l]` per layer.
    pinv: Vec<Tensor<f32>>,
    bias: Vec<Tensor<f32>>,
}

impl StyleInverter {
    pub const RIDGE: f64 = 1e-4;

    pub fn new(source: &SourceGenerator) -> Self {
        let mut pinv = Vec::new();
        let mut bias = Vec::new();
        for a in &source.affines {
            let w = a.effective_weight();
            let (c, d) = (w.dim(0), w.dim(1));
            let m = DMatrix::from_row_slice(c, d, &w.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
            let gram = m.transpose() * &m + DMatrix::identity(d, d) * Self::RIDGE;
            let inv = gram
                .cholesky()
                .expect("ridge-regularized Gram matrix is positive definite")
                .inverse();
            let p = inv * m.transpose();
            let mut data = Vec::with_capacity(d * c);
            for i in 0..d {
                for j in 0..c {
                    data.push(p[(i, j)] as f32);
                }
            }
            pinv.push(Tensor::new(vec![d, c], data));
            bias.push(a.effective_bias().reshape(vec![1, c]));
        }
        Self { pinv, bias }
    }

    /// Per-layer styles `[B, C_l]` to a flat W+ batch `[B, L·d_w]`.
    pub fn invert_on<T: Scalar>(&self, g: &mut Graph<T>, styles: &[Var]) -> Var {
        let parts: Vec<Var> = styles
            .iter()
            .zip(self.pinv.iter().zip(&self.bias))
            .map(|(&s, (p, b))| {
                let b = g.constant(b.cast::<T>());
                let centered = g.sub(s, b);
                let p = g.constant(p.cast::<T>());
                g.matmul(centered, p, false, true)
            })
            .collect();
        g.concat(&parts, 1)
    }
}
