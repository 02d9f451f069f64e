#![allow(dead_code)]

use dorm_core::backbone::{BackboneConfig, DiscriminatorState, SourceGenerator};
use dorm_core::image::ImageTensor;
use dorm_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 8x8 backbone small enough for straight-line oracles and quick training runs.
pub fn tiny_config() -> BackboneConfig {
    BackboneConfig {
        resolution: 8,
        z_dim: 8,
        w_dim: 8,
        mapping_depth: 2,
        mapping_lr_mul: 1.0,
        base_channels: 8,
        min_channels: 4,
        disc_feature_dim: 16,
        demod_eps: 1e-8,
    }
}

pub fn tiny_source(seed: u64) -> SourceGenerator {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = SourceGenerator::new(&mut rng, tiny_config()).unwrap();
    g.frozen = true;
    g
}

pub fn tiny_disc(seed: u64) -> DiscriminatorState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd15c);
    let mut d = DiscriminatorState::new(&mut rng, &tiny_config());
    d.frozen_extractor = true;
    d
}

pub fn random_image(rng: &mut impl Rng, res: usize) -> ImageTensor {
    let data = (0..3 * res * res).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    ImageTensor::new(Tensor::new(vec![3, res, res], data)).unwrap()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).fold(0.0, f64::max)
}

/// Direct zero-padded convolution of one `[c, h, w]` image in f64.
pub fn conv_naive(x: &[f64], c_in: usize, h: usize, w: usize, weight: &[f64], c_out: usize, k: usize, stride: usize) -> (Vec<f64>, usize, usize) {
    let pad = k / 2;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; c_out * ho * wo];
    for o in 0..c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for i in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += weight[((o * c_in + i) * k + ky) * k + kx]
                                * x[(i * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    (out, ho, wo)
}

pub fn lrelu(v: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        0.2 * v
    }
}

pub fn to_f64(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Central finite-difference check of `f` at `x` against `grad`.
pub fn max_rel_err(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) -> f64 {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let up = f(&xp);
        xp[i] = x[i] - h;
        let down = f(&xp);
        xp[i] = x[i];
        let fd = (up - down) / (2.0 * h);
        let err = (fd - grad[i]).abs() / (fd.abs().max(grad[i].abs()).max(1e-3));
        worst = worst.max(err);
    }
    worst
}
