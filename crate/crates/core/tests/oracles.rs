mod common;

use common::*;
use dorm_core::backbone::{
    modulate_demodulate, IntermediateLatent, LatentCode, LayerKind, NoiseMode, StyleVector,
};
use dorm_core::encoder::{autocorr, Encoder, TokenGrid};
use dorm_core::image::ImageTensor;
use dorm_core::nn::{Graph, Parameters};
use dorm_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dense(w: &Tensor<f32>, b: &Tensor<f32>, x: &[f32]) -> Vec<f64> {
    let (o, i) = (w.dim(0), w.dim(1));
    (0..o)
        .map(|r| (0..i).map(|c| w.data()[r * i + c] as f64 * x[c] as f64).sum::<f64>() + b.data()[r] as f64)
        .collect()
}

#[test]
fn single_layer_mapping_matches_dense_oracle() {
    let mut cfg = tiny_config();
    cfg.mapping_depth = 1;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = dorm_core::backbone::SourceGenerator::new(&mut rng, cfg).unwrap();
    let mut z = vec![0.0; 8];
    z[0] = 1.0;
    let w = g.map_latent(&LatentCode(z.clone())).unwrap();
    let l = &g.mapping.layers[0];
    let want: Vec<f64> = dense(&l.effective_weight(), &l.effective_bias(), &z).into_iter().map(lrelu).collect();
    let got: Vec<f32> = w.0;
    assert!(max_abs_diff(&got, &want.iter().map(|&v| v as f32).collect::<Vec<_>>()) < 1e-6);
}

#[test]
fn mapping_is_deterministic() {
    let g = tiny_source(1);
    let z = LatentCode::sample(&mut ChaCha8Rng::seed_from_u64(9), 8);
    assert_eq!(g.map_latent(&z).unwrap(), g.map_latent(&z).unwrap());
}

#[test]
fn bias_only_affine_gives_ones() {
    let mut g = tiny_source(1);
    let a = &mut g.affines[0];
    a.weight = a.weight.map(|_| 0.0);
    a.bias = a.bias.map(|_| 1.0);
    let s = g.affine(&IntermediateLatent(vec![0.7; 8]), 0).unwrap();
    assert!(s.0.iter().all(|&v| v == 1.0));
}

#[test]
fn affine_matches_dense_oracle() {
    let g = tiny_source(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for layer in 0..g.num_layers() {
        let w: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = g.affine(&IntermediateLatent(w.clone()), layer).unwrap();
        let a = &g.affines[layer];
        let want: Vec<f32> = dense(&a.effective_weight(), &a.effective_bias(), &w).iter().map(|&v| v as f32).collect();
        assert!(max_abs_diff(&s.0, &want) < 1e-6);
    }
}

#[test]
fn demodulation_hand_case() {
    let w = Tensor::new(vec![1, 2, 1, 1], vec![3.0, 4.0]);
    let out = modulate_demodulate(&w, &StyleVector(vec![1.0, 1.0]), 0.0).unwrap();
    assert!(max_abs_diff(out.data(), &[0.6, 0.8]) < 1e-7);
}

#[test]
fn unit_weights_survive_identity_modulation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut data: Vec<f32> = (0..4 * 3 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for row in data.chunks_mut(27) {
        let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    let w = Tensor::new(vec![4, 3, 3, 3], data.clone());
    let out = modulate_demodulate(&w, &StyleVector(vec![1.0; 3]), 1e-8).unwrap();
    assert!(max_abs_diff(out.data(), &data) < 1e-6);
}

/// Straight-line re-implementation of the synthesis network with explicit
/// per-sample modulated weights.
fn synth_oracle(g: &dorm_core::backbone::SourceGenerator, styles: &[StyleVector]) -> Vec<f64> {
    let net = &g.synthesis;
    let c4 = net.const_input.dim(0);
    let (mut x, mut c, mut h) = (to_f64(&net.const_input), c4, 4usize);
    let mut rgb: Option<Vec<f64>> = None;
    for (layer, s) in net.layers.iter().zip(styles) {
        let info = layer.info;
        let k = info.kernel();
        let gain = layer.weight_gain();
        let mut w: Vec<f64> = layer.weight.data().iter().map(|&v| v as f64 * gain).collect();
        let taps = info.in_channels * k * k;
        for o in 0..info.out_channels {
            for i in 0..info.in_channels {
                for t in 0..k * k {
                    w[o * taps + i * k * k + t] *= s.0[i] as f64;
                }
            }
            if let LayerKind::Conv { .. } = info.kind {
                let n: f64 = w[o * taps..(o + 1) * taps].iter().map(|v| v * v).sum::<f64>() + net.demod_eps;
                w[o * taps..(o + 1) * taps].iter_mut().for_each(|v| *v /= n.sqrt());
            }
        }
        match info.kind {
            LayerKind::Conv { upsample } => {
                if upsample {
                    x = upsample_naive(&x, c, h);
                    h *= 2;
                }
                let (y, _, _) = conv_naive(&x, c, h, h, &w, info.out_channels, k, 1);
                c = info.out_channels;
                x = y
                    .iter()
                    .enumerate()
                    .map(|(idx, v)| lrelu(v + layer.bias.data()[idx / (h * h)] as f64) * 2f64.sqrt())
                    .collect();
            }
            LayerKind::ToRgb => {
                let (y, _, _) = conv_naive(&x, c, h, h, &w, 3, 1, 1);
                let y: Vec<f64> = y.iter().enumerate().map(|(idx, v)| v + layer.bias.data()[idx / (h * h)] as f64).collect();
                rgb = Some(match rgb {
                    None => y,
                    Some(prev) => upsample_naive(&prev, 3, h / 2).iter().zip(&y).map(|(a, b)| a + b).collect(),
                });
            }
        }
    }
    rgb.unwrap()
}

fn upsample_naive(x: &[f64], c: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * 4 * h * h];
    for ch in 0..c {
        for y in 0..2 * h {
            for xx in 0..2 * h {
                out[(ch * 2 * h + y) * 2 * h + xx] = x[(ch * h + y / 2) * h + xx / 2];
            }
        }
    }
    out
}

#[test]
fn synthesis_matches_straight_line_oracle() {
    let g = tiny_source(11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..3 {
        let z = LatentCode::sample(&mut rng, 8);
        let styles = g.styles(&g.map_latent(&z).unwrap()).unwrap();
        let img = g.synthesize(&styles, NoiseMode::Off).unwrap();
        let want: Vec<f32> = synth_oracle(&g, &styles).iter().map(|&v| v as f32).collect();
        assert!(max_abs_diff(img.pixels().data(), &want) < 1e-5);
    }
}

#[test]
fn synthesis_is_deterministic_and_matches_generate() {
    let g = tiny_source(13);
    let z = LatentCode::sample(&mut ChaCha8Rng::seed_from_u64(1), 8);
    let styles = g.styles(&g.map_latent(&z).unwrap()).unwrap();
    let a = g.synthesize(&styles, NoiseMode::Off).unwrap();
    let b = g.synthesize(&styles, NoiseMode::Off).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, g.generate(&z, NoiseMode::Off).unwrap());
}

#[test]
fn extractor_matches_direct_convolution_oracle() {
    let d = tiny_disc(4);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = random_image(&mut rng, 8);
    let e = &d.extractor;
    let conv = |x: &[f64], c: usize, h: usize, layer: &dorm_core::nn::EqConv| {
        let s = layer.weight.shape().to_vec();
        let w: Vec<f64> = to_f64(&layer.weight).iter().map(|v| v * layer.weight_gain()).collect();
        let (y, ho, _) = conv_naive(x, c, h, h, &w, s[0], s[2], layer.stride);
        let y: Vec<f64> = y
            .iter()
            .enumerate()
            .map(|(i, v)| lrelu(v + layer.bias.data()[i / (ho * ho)] as f64) * 2f64.sqrt())
            .collect();
        (y, s[0], ho)
    };
    let (mut x, mut c, mut h) = conv(&to_f64(img.pixels()), 3, 8, &e.from_rgb);
    for (a, b) in &e.blocks {
        (x, c, h) = conv(&x, c, h, a);
        (x, c, h) = conv(&x, c, h, b);
    }
    (x, _, _) = conv(&x, c, h, &e.final_conv);
    let flat: Vec<f32> = x.iter().map(|&v| v as f32).collect();
    let want: Vec<f32> = dense(&e.fc.effective_weight(), &e.fc.effective_bias(), &flat)
        .into_iter()
        .map(|v| lrelu(v) as f32)
        .collect();
    let got = d.disc_features(&img).unwrap();
    assert!(max_abs_diff(&got, &want) < 1e-5);
    assert_eq!(got, d.disc_features(&img).unwrap());
}

#[test]
fn encoder_tokens_deterministic_and_distinct() {
    let enc = Encoder::default_for(32);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x = random_image(&mut rng, 32);
    assert_eq!(enc.extract_tokens(&x).unwrap(), enc.extract_tokens(&x).unwrap());
    for _ in 0..100 {
        let a = random_image(&mut rng, 32);
        let b = random_image(&mut rng, 32);
        let ta = enc.extract_tokens(&a).unwrap();
        let tb = enc.extract_tokens(&b).unwrap();
        assert_ne!(ta.tokens, tb.tokens);
    }
}

#[test]
fn pooled_is_mean_of_tokens() {
    let enc = Encoder::default_for(32);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_image(&mut rng, 32);
    let t = enc.extract_tokens(&x).unwrap();
    let (n, c) = (t.n(), t.c());
    let want: Vec<f32> = (0..c)
        .map(|j| ((0..n).map(|i| t.tokens.data()[i * c + j] as f64).sum::<f64>() / n as f64) as f32)
        .collect();
    let got = enc.pooled_features(&x).unwrap();
    assert!(max_abs_diff(&got, &want) < 1e-6);
    assert_eq!(got, enc.pooled_features(&x).unwrap());
}

#[test]
fn constant_image_pools_to_any_token() {
    let enc = Encoder::default_for(32);
    let x = ImageTensor::constant(32, [0.3, -0.2, 0.9]);
    let t = enc.extract_tokens(&x).unwrap();
    let c = t.c();
    let pooled = enc.pooled_features(&x).unwrap();
    for row in t.tokens.data().chunks(c) {
        assert!(max_abs_diff(row, &pooled) < 1e-6);
    }
}

#[test]
fn autocorr_matches_cosine_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (n, c) = (4, 8);
    let data: Vec<f32> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let m = autocorr(&TokenGrid::from_tokens(Tensor::new(vec![n, c], data.clone())));
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (&data[i * c..(i + 1) * c], &data[j * c..(j + 1) * c]);
            let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
            let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((m.m.data()[i * n + j] - dot / (na * nb)).abs() < 1e-6);
        }
    }
}

#[test]
fn autocorr_trivial_grids() {
    let same = autocorr(&TokenGrid::from_tokens(Tensor::new(vec![3, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0])));
    assert!(same.m.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    let ortho = autocorr(&TokenGrid::from_tokens(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])));
    assert_eq!(ortho.m.data(), &[1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn encoder_pixel_gradient_matches_finite_differences() {
    let enc = Encoder::default_for(16);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let img = random_image(&mut rng, 16);
    let x0 = to_f64(img.pixels());
    let probe: Vec<f64> = (0..enc.num_tokens() * enc.token_channels()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let eval = |x: &[f64]| -> (f64, Vec<f64>) {
        let mut g = Graph::<f64>::training(&[]);
        let xv = g.param(Tensor::new(vec![1, 3, 16, 16], x.to_vec()));
        let t = enc.tokens_on(&mut g, xv);
        let shape = g.shape(t).to_vec();
        let p = g.constant(Tensor::new(shape, probe.clone()));
        let y = g.mul(t, p);
        let y = g.sum(y);
        let val = g.value(y).item();
        let mut grads = g.backward(y);
        (val, grads.take(xv).unwrap().into_data())
    };
    let (_, grad) = eval(&x0);
    // Check a spread of pixels; the full image is slow to difference.
    let idx: Vec<usize> = (0..40).map(|_| rng.gen_range(0..x0.len())).collect();
    let h = 1e-6;
    for &i in &idx {
        let mut xp = x0.clone();
        xp[i] += h;
        let up = eval(&xp).0;
        xp[i] -= 2.0 * h;
        let down = eval(&xp).0;
        let fd = (up - down) / (2.0 * h);
        let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-3);
        assert!(err < 1e-4, "pixel {i}: fd {fd} vs {}", grad[i]);
    }
}

#[test]
fn generator_parameter_gradients_match_finite_differences() {
    let mut source = tiny_source(17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let z = Tensor::new(vec![2, 8], (0..16).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
    let probe: Vec<f64> = (0..2 * 3 * 8 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |src: &dorm_core::backbone::SourceGenerator| -> (f64, std::collections::BTreeMap<String, Tensor<f64>>) {
        let mut g = Graph::<f64>::training(&["source."]);
        let zv = g.constant(z.cast::<f64>());
        let w = src.map_on(&mut g, zv);
        let styles = src.styles_on(&mut g, w);
        let img = src.synthesize_on(&mut g, &styles, NoiseMode::Off);
        let p = g.constant(Tensor::new(vec![2, 3, 8, 8], probe.clone()));
        let y = g.mul(img, p);
        let y = g.sum(y);
        (g.value(y).item(), g.parameter_grads(y))
    };
    let (_, grads) = loss(&source);
    for name in ["source.mapping.0.weight", "source.affine.1.weight", "source.affine.3.bias", "source.synthesis.2.weight", "source.synthesis.const"] {
        let grad = grads.get(name).unwrap_or_else(|| panic!("no gradient for {name}"));
        for idx in [0usize, 1, 2] {
            let h = 1e-3f32;
            let bump = |delta: f32| {
                let mut s = source.clone();
                s.visit_mut("source", &mut |n, t| {
                    if n == name {
                        t.data_mut()[idx] += delta;
                    }
                });
                loss(&s).0
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h as f64);
            let an = grad.data()[idx];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-2);
            assert!(err < 1e-2, "{name}[{idx}]: fd {fd} vs {an}");
        }
    }
    source.frozen = false;
}
