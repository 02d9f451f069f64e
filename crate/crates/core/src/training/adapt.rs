use std::io::Write;
use std::path::PathBuf;

use dorm_tensor::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::head::{ClassifierHead, HEAD_PREFIX};
use super::invert::{invert_latent, mean_latent, StyleInverter};
use super::{AdaptConfig, AdaptMode, Augmentation};
use crate::backbone::{DiscriminatorState, LatentCode, NoiseMode, SourceGenerator};
use crate::data::FewShotDataset;
use crate::dorm::{adapted_styles_from, module_prefix, MAModule, ModuleOptions};
use crate::encoder::Encoder;
use crate::error::{ensure, DormError, Result};
use crate::image::{stack, unstack, ImageTensor};
use crate::losses::{adv_d_on, adv_g_on, l_local_on, l_scc_on, l_ss_tokens_on, scc_mask, InversionQueue};
use crate::nn::{randn, Adam, Graph};

/// Frozen pieces every adaptation run reads from.
#[derive(Clone, Copy, Debug)]
pub struct TrainingContext<'a> {
    pub source: &'a SourceGenerator,
    pub disc: &'a DiscriminatorState,
    pub encoder: &'a Encoder,
}

/// One line of the JSONL training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptLog {
    pub step: usize,
    pub adv_g: f64,
    pub adv_d: f64,
    pub l_ss: f64,
    pub l_local: f64,
    pub l_scc: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub module: MAModule,
    pub head: ClassifierHead,
    pub initial_head: ClassifierHead,
    pub logs: Vec<AdaptLog>,
    /// Samples rendered through the training forward path after the last step.
    pub eval: Vec<(LatentCode, ImageTensor)>,
    pub checkpoint: Option<PathBuf>,
}

const Z_STREAM: u64 = 0x7a00_0000_0000_0001;
const DATA_STREAM: u64 = 0x7a00_0000_0000_0002;
const HEAD_STREAM: u64 = 0x7a00_0000_0000_0003;
const EVAL_STREAM: u64 = 0x7a00_0000_0000_0004;

pub fn adapt_few_shot(ctx: TrainingContext<'_>, data: &FewShotDataset, cfg: &AdaptConfig) -> Result<AdaptOutcome> {
    let cfg = AdaptConfig {
        mode: AdaptMode::FewShot,
        ..cfg.clone()
    };
    run(ctx, data, None, &cfg)
}

pub fn adapt_one_shot(ctx: TrainingContext<'_>, image: &ImageTensor, cfg: &AdaptConfig) -> Result<AdaptOutcome> {
    let cfg = AdaptConfig {
        mode: AdaptMode::OneShot,
        ..cfg.clone()
    };
    let data = FewShotDataset::from_images(vec![image.clone()])?;
    run(ctx, &data, Some(image), &cfg)
}

/// Render `z` exactly as the training loop renders its fake batch.
pub fn render_training_path(source: &SourceGenerator, module: &MAModule, alpha: f32, z: &LatentCode) -> Result<ImageTensor> {
    source.check_latent(z)?;
    let prefix = module_prefix(0);
    let mut g = Graph::<f32>::training(&[&format!("{prefix}.")]);
    let zv = g.constant(Tensor::new(vec![1, z.0.len()], z.0.clone()));
    let w_s = source.map_on(&mut g, zv);
    let s_s = source.styles_on(&mut g, w_s);
    let styles = adapted_styles_from(&mut g, &[(module, alpha)], None, zv, w_s, &s_s);
    let img = source.synthesize_on(&mut g, &styles, NoiseMode::Off);
    let img = g.value(img).clone();
    Ok(unstack(&img).remove(0))
}

/// Render many latents in chunks; `module = None` renders the source generator.
pub fn render_batch(source: &SourceGenerator, module: Option<(&MAModule, f32)>, zs: &[LatentCode]) -> Result<Vec<ImageTensor>> {
    let d_z = source.config.z_dim;
    let mut out = Vec::with_capacity(zs.len());
    for chunk in zs.chunks(RENDER_CHUNK) {
        for z in chunk {
            source.check_latent(z)?;
        }
        let mut g = Graph::<f32>::inference();
        let zv = g.constant(Tensor::new(
            vec![chunk.len(), d_z],
            chunk.iter().flat_map(|z| z.0.iter().copied()).collect(),
        ));
        let w_s = source.map_on(&mut g, zv);
        let s_s = source.styles_on(&mut g, w_s);
        let styles = match module {
            Some((m, alpha)) => adapted_styles_from(&mut g, &[(m, alpha)], None, zv, w_s, &s_s),
            None => s_s,
        };
        let img = source.synthesize_on(&mut g, &styles, NoiseMode::Off);
        out.extend(unstack(g.value(img)));
    }
    Ok(out)
}

const RENDER_CHUNK: usize = 32;

struct OneShotState {
    ref_tokens: Tensor<f32>,
    inverter: StyleInverter,
    queue: InversionQueue,
}

fn run(
    ctx: TrainingContext<'_>,
    data: &FewShotDataset,
    reference: Option<&ImageTensor>,
    cfg: &AdaptConfig,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    let source = ctx.source;
    let disc = ctx.disc;
    let enc = ctx.encoder;
    ensure!(!data.is_empty(), "no target images");
    let res = source.resolution();
    ensure!(
        data.resolution() == res,
        "target images are {}px, generator renders {res}px",
        data.resolution()
    );
    ensure!(
        enc.spec().resolution == res,
        "encoder expects {}px images, generator renders {res}px",
        enc.spec().resolution
    );
    ensure!(
        disc.extractor.resolution == res,
        "discriminator expects {}px images, generator renders {res}px",
        disc.extractor.resolution
    );

    let losses = &cfg.losses;
    let one_shot = cfg.mode == AdaptMode::OneShot;
    let use_local = one_shot && losses.lambda_local != 0.0;
    let use_scc = one_shot && losses.lambda_scc != 0.0;

    let options = ModuleOptions {
        default_alpha: cfg.alpha,
        ..cfg.module.clone()
    };
    let mut module = MAModule::create_with(source, &cfg.domain, options);
    let mut head_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ HEAD_STREAM);
    let mut head = ClassifierHead::new(&mut head_rng, disc.feature_dim(), &cfg.head, disc)?;
    let initial_head = head.clone();
    let mut z_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ Z_STREAM);
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DATA_STREAM);

    // The extractor is frozen, so real features can be computed once.
    let refs: Vec<&ImageTensor> = data.images.iter().collect();
    let real_feats = disc.disc_features_batch(&refs)?;
    let flipped_feats = match cfg.augmentation {
        Augmentation::Xflip => {
            let flipped: Vec<ImageTensor> = data.images.iter().map(|i| i.flip_x()).collect();
            let refs: Vec<&ImageTensor> = flipped.iter().collect();
            Some(disc.disc_features_batch(&refs)?)
        }
        Augmentation::None => None,
    };
    let d_f = disc.feature_dim();

    let mut one = if use_local || use_scc {
        let reference = reference.expect("one-shot runs carry a reference");
        let ref_tokens = {
            let mut g = Graph::<f32>::inference();
            let x = g.constant(stack(&[reference]));
            let t = enc.tokens_on(&mut g, x);
            g.value(t).clone()
        };
        let inverter = StyleInverter::new(source);
        let mut queue = InversionQueue::new(losses.queue_capacity);
        if use_scc && cfg.seed_queue_with_reference {
            let inv = invert_latent(source, enc, reference, None, &cfg.inversion)?;
            let mean = mean_latent(source, cfg.inversion.mean_samples, cfg.inversion.seed);
            let w_a: Vec<f64> = (0..source.num_layers())
                .flat_map(|_| mean.0.iter().map(|&v| v as f64))
                .collect();
            queue.push(w_a, inv.flat())?;
        }
        Some(OneShotState {
            ref_tokens,
            inverter,
            queue,
        })
    } else {
        None
    };

    let prefix = module_prefix(0);
    let trainable = format!("{prefix}.");
    let head_trainable = format!("{HEAD_PREFIX}.");
    let (b1, b2) = cfg.betas;
    let mut opt_g = Adam::new(cfg.lr, b1, b2, 1e-8);
    let mut opt_d = Adam::new(cfg.head_lr, b1, b2, 1e-8);
    let steps = cfg.steps();
    let batch = cfg.batch_size;
    let d_z = source.config.z_dim;

    let mut log_file = match &cfg.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::fs::File::create(dir.join("adapt_log.jsonl"))?)
        }
        None => None,
    };
    let mut last_ckpt: Option<PathBuf> = None;
    let mut logs = Vec::with_capacity(steps);

    for step in 0..steps {
        let z = randn(&mut z_rng, &[batch, d_z]);
        let picks: Vec<(usize, bool)> = (0..batch)
            .map(|_| {
                let i = data_rng.gen_range(0..data.len());
                let flip = flipped_feats.is_some() && data_rng.gen_bool(0.5);
                (i, flip)
            })
            .collect();

        // Generator side: only the module is trainable.
        let mut g = Graph::<f32>::training(&[&trainable]);
        let zv = g.constant(z);
        let w_s = source.map_on(&mut g, zv);
        let s_s = source.styles_on(&mut g, w_s);
        let styles = adapted_styles_from(&mut g, &[(&module, cfg.alpha)], None, zv, w_s, &s_s);
        let fake = source.synthesize_on(&mut g, &styles, NoiseMode::Off);
        let feats = disc.features_on(&mut g, fake);
        let fake_feats = g.value(feats).clone();
        let logits = head.forward(&mut g, feats);
        let adv = adv_g_on(&mut g, logits);
        let mut total = adv;
        let mut parts = [0.0f64; 3];

        let needs_tokens = losses.lambda_ss != 0.0 || use_local;
        let fake_tokens = needs_tokens.then(|| enc.tokens_on(&mut g, fake));
        if losses.lambda_ss != 0.0 {
            let src_img = source.synthesize_on(&mut g, &s_s, NoiseMode::Off);
            let src_tokens = enc.tokens_on(&mut g, src_img);
            let l = l_ss_tokens_on(&mut g, src_tokens, fake_tokens.expect("tokens"), losses.ss_norm);
            parts[0] = g.value(l).item() as f64;
            total = weighted_add(&mut g, total, l, losses.lambda_ss);
        }
        if let Some(os) = one.as_mut() {
            if use_local {
                let r = g.constant(os.ref_tokens.clone());
                let l = l_local_on(&mut g, fake_tokens.expect("tokens"), r);
                parts[1] = g.value(l).item() as f64;
                total = weighted_add(&mut g, total, l, losses.lambda_local);
            }
            if use_scc {
                let wa = os.inverter.invert_on(&mut g, &s_s);
                let wb = os.inverter.invert_on(&mut g, &styles);
                let n = g.shape(wa)[1];
                let (va, vb) = (g.value(wa).clone(), g.value(wb).clone());
                for (ra, rb) in va.data().chunks(n).zip(vb.data().chunks(n)) {
                    os.queue.push(
                        ra.iter().map(|&v| v as f64).collect(),
                        rb.iter().map(|&v| v as f64).collect(),
                    )?;
                }
                let delta = os.queue.delta_w().expect("queue was just filled");
                let mask = scc_mask(&delta, losses.alpha_mask)?;
                let mask = g.constant(Tensor::new(
                    vec![1, n],
                    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
                ));
                let wa = g.detach(wa);
                let l = l_scc_on(&mut g, wa, wb, mask);
                parts[2] = g.value(l).item() as f64;
                total = weighted_add(&mut g, total, l, losses.lambda_scc);
            }
        }
        let adv_g = g.value(adv).item() as f64;
        let total_v = g.value(total).item() as f64;

        // Discriminator side: only the head is trainable; fakes are detached.
        let mut d = Graph::<f32>::training(&[&head_trainable]);
        let real_rows: Vec<f32> = picks
            .iter()
            .flat_map(|&(i, flip)| {
                let src = if flip { flipped_feats.as_ref().expect("xflip") } else { &real_feats };
                src.data()[i * d_f..(i + 1) * d_f].to_vec()
            })
            .collect();
        let rv = d.constant(Tensor::new(vec![batch, d_f], real_rows));
        let fv = d.constant(fake_feats);
        let lr = head.forward(&mut d, rv);
        let lf = head.forward(&mut d, fv);
        let loss_d = adv_d_on(&mut d, lr, lf);
        let adv_d = d.value(loss_d).item() as f64;

        if !total_v.is_finite() || !adv_d.is_finite() {
            return Err(DormError::TrainingDiverged {
                step,
                what: format!("non-finite loss (G {total_v}, D {adv_d})"),
                last_checkpoint: last_ckpt,
            });
        }
        let grads_g = g.parameter_grads(total);
        let grads_d = d.parameter_grads(loss_d);
        opt_g.apply(&mut module, &prefix, &grads_g);
        opt_d.apply(&mut head, HEAD_PREFIX, &grads_d);

        let entry = AdaptLog {
            step,
            adv_g,
            adv_d,
            l_ss: parts[0],
            l_local: parts[1],
            l_scc: parts[2],
            total: total_v,
        };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&entry)?)?;
        }
        logs.push(entry);

        if let Some(dir) = &cfg.out_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                let path = dir.join(format!("module_step{:06}.dormckpt", step + 1));
                finalize(&mut module, cfg, step + 1);
                module.to_checkpoint().save(&path)?;
                last_ckpt = Some(path);
            }
        }
    }

    finalize(&mut module, cfg, steps);
    let checkpoint = match &cfg.out_dir {
        Some(dir) => {
            let path = dir.join("module.dormckpt");
            module.to_checkpoint().save(&path)?;
            Some(path)
        }
        None => None,
    };
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ EVAL_STREAM);
    let eval = (0..cfg.eval_samples)
        .map(|_| {
            let z = LatentCode::sample(&mut eval_rng, d_z);
            let img = render_training_path(source, &module, cfg.alpha, &z)?;
            Ok((z, img))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AdaptOutcome {
        module,
        head,
        initial_head,
        logs,
        eval,
        checkpoint,
    })
}

fn weighted_add(g: &mut Graph<f32>, total: Var, term: Var, lambda: f64) -> Var {
    let t = if lambda == 1.0 { term } else { g.scale(term, lambda) };
    g.add(total, t)
}

fn finalize(module: &mut MAModule, cfg: &AdaptConfig, steps: usize) {
    module.default_alpha = cfg.alpha;
    module.provenance.config_hash = cfg.config_hash();
    module.provenance.steps = steps;
}
