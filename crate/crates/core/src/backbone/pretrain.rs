//! Adversarial pretraining of the source generator on a local dataset.

use std::io::Write;
use std::path::{Path, PathBuf};

use dorm_tensor::Var;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::discriminator::DISC_PREFIX;
use super::generator::SOURCE_PREFIX;
use super::{BackboneConfig, DiscriminatorState, NoiseMode, SourceGenerator};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::error::{ensure, DormError, Result};
use crate::image::{stack, ImageTensor};
use crate::nn::{randn, Adam, Graph, Parameters};

pub const SOURCE_KIND: &str = "source";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub backbone: BackboneConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub seed: u64,
    pub xflip: bool,
    /// Weight of the real-image gradient penalty (0 disables it).
    pub r1_gamma: f64,
    /// Apply the penalty every this many steps, scaled up to compensate.
    pub r1_interval: usize,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            steps: 20_000,
            batch_size: 4,
            lr: 0.0002,
            betas: (0.0, 0.99),
            seed: 0,
            xflip: false,
            r1_gamma: 0.0,
            r1_interval: 4,
            checkpoint_every: 0,
            out_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub step: usize,
    pub loss_g: f64,
    pub loss_d: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub generator: SourceGenerator,
    pub discriminator: DiscriminatorState,
    pub logs: Vec<PretrainLog>,
    pub checkpoint: Option<PathBuf>,
}

pub fn pretrain_source(dataset: &[ImageTensor], config: &PretrainConfig) -> Result<PretrainOutcome> {
    ensure!(!dataset.is_empty(), "pretraining dataset is empty");
    let bb = &config.backbone;
    ensure!(
        matches!(bb.resolution, 16 | 32 | 64),
        "pretraining resolution must be 16, 32 or 64, got {}",
        bb.resolution
    );
    ensure!(config.batch_size >= 1, "batch size must be at least 1");
    for img in dataset {
        ensure!(
            img.height() == bb.resolution && img.width() == bb.resolution,
            "dataset image is {}x{}, expected {r}x{r}",
            img.height(),
            img.width(),
            r = bb.resolution
        );
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut gen = SourceGenerator::new(&mut init_rng, bb.clone())?;
    let mut disc = DiscriminatorState::new(&mut init_rng, bb);
    let mut z_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5a5a_0001);
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5a5a_0002);
    let mut r1_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5a5a_0003);

    let (b1, b2) = config.betas;
    let mut opt_g = Adam::new(config.lr, b1, b2, 1e-8);
    let mut opt_d = Adam::new(config.lr, b1, b2, 1e-8);
    let mut logs = Vec::with_capacity(config.steps);
    let mut log_file = match &config.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::fs::File::create(dir.join("pretrain_log.jsonl"))?)
        }
        None => None,
    };
    let mut last_ckpt: Option<PathBuf> = None;

    for step in 0..config.steps {
        let z = randn(&mut z_rng, &[config.batch_size, bb.z_dim]);
        let reals: Vec<ImageTensor> = (0..config.batch_size)
            .map(|_| {
                let img = dataset.choose(&mut data_rng).expect("nonempty");
                if config.xflip && data_rng.gen_bool(0.5) {
                    img.flip_x()
                } else {
                    img.clone()
                }
            })
            .collect();

        // Generator step.
        let mut g = Graph::<f32>::training(&[&format!("{SOURCE_PREFIX}.")]);
        let zv = g.constant(z.clone());
        let fake = forward_generator(&gen, &mut g, zv);
        let fake_value = g.value(fake).clone();
        let logits = disc.logits_on(&mut g, fake);
        let neg = g.neg(logits);
        let sp = g.softplus(neg);
        let loss_g = g.mean(sp);
        let lg = g.value(loss_g).item() as f64;
        let grads_g = g.parameter_grads(loss_g);

        // Discriminator step on the same batch.
        let mut d = Graph::<f32>::training(&[&format!("{DISC_PREFIX}.")]);
        let real_refs: Vec<&ImageTensor> = reals.iter().collect();
        let rv = d.constant(stack(&real_refs));
        let fv = d.constant(fake_value);
        let lr_ = disc.logits_on(&mut d, rv);
        let lf = disc.logits_on(&mut d, fv);
        let nr = d.neg(lr_);
        let sr = d.softplus(nr);
        let sf = d.softplus(lf);
        let mr = d.mean(sr);
        let mf = d.mean(sf);
        let loss_d = d.add(mr, mf);
        let ld = d.value(loss_d).item() as f64;
        let r1_due = config.r1_gamma > 0.0 && step % config.r1_interval.max(1) == 0;
        let loss_d = if r1_due {
            let pen = r1_estimate(&disc, &mut d, rv, &mut r1_rng);
            let w = config.r1_gamma / 2.0 * config.r1_interval.max(1) as f64;
            let pen = d.scale(pen, w);
            d.add(loss_d, pen)
        } else {
            loss_d
        };

        if !lg.is_finite() || !ld.is_finite() {
            return Err(DormError::TrainingDiverged {
                step,
                what: format!("non-finite loss (G {lg}, D {ld})"),
                last_checkpoint: last_ckpt,
            });
        }
        let grads_d = d.parameter_grads(loss_d);
        opt_g.apply(&mut gen, SOURCE_PREFIX, &grads_g);
        opt_d.apply(&mut disc, DISC_PREFIX, &grads_d);

        let entry = PretrainLog {
            step,
            loss_g: lg,
            loss_d: ld,
        };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&entry)?)?;
        }
        logs.push(entry);

        if let Some(dir) = &config.out_dir {
            if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
                let path = dir.join(format!("source_step{:06}.dormckpt", step + 1));
                save_source(&gen, &disc, Some(config.seed), &path)?;
                last_ckpt = Some(path);
            }
        }
    }

    gen.frozen = true;
    disc.frozen_extractor = true;
    let checkpoint = match &config.out_dir {
        Some(dir) => {
            let path = dir.join("source.dormckpt");
            save_source(&gen, &disc, Some(config.seed), &path)?;
            Some(path)
        }
        None => None,
    };
    Ok(PretrainOutcome {
        generator: gen,
        discriminator: disc,
        logs,
        checkpoint,
    })
}

/// Stochastic estimate of `E‖∇ₓ D(x)‖²` on real images using only first-order
/// autodiff: for `ε ~ N(0, I)`, `E[(ε·∇D)²] = ‖∇D‖²`, and `ε·∇D` is taken as a
/// central difference along `ε`.
fn r1_estimate(disc: &DiscriminatorState, d: &mut Graph<f32>, reals: Var, rng: &mut ChaCha8Rng) -> Var {
    const H: f64 = 1e-2;
    let shape = d.shape(reals).to_vec();
    let eps = d.constant(randn(rng, &shape).map(|v| v * H as f32));
    let plus = d.add(reals, eps);
    let minus = d.sub(reals, eps);
    let lp = disc.logits_on(d, plus);
    let lm = disc.logits_on(d, minus);
    let diff = d.sub(lp, lm);
    let dir = d.scale(diff, 1.0 / (2.0 * H));
    let sq = d.square(dir);
    d.mean(sq)
}

fn forward_generator(gen: &SourceGenerator, g: &mut Graph<f32>, z: Var) -> Var {
    let w = gen.map_on(g, z);
    let styles = gen.styles_on(g, w);
    gen.synthesize_on(g, &styles, NoiseMode::Off)
}

/// One checkpoint holding both the generator (`source.*`) and discriminator (`disc.*`).
pub fn source_checkpoint(gen: &SourceGenerator, disc: &DiscriminatorState, seed: Option<u64>) -> Checkpoint {
    let mut tensors = gen.named_tensors(SOURCE_PREFIX);
    tensors.extend(disc.named_tensors(DISC_PREFIX));
    let mut meta = CheckpointMeta::new(
        SOURCE_KIND,
        serde_json::to_value(&gen.config).expect("config serializes"),
    );
    meta.seed = seed;
    meta.extra
        .insert("source_hash".into(), gen.content_hash().into());
    Checkpoint::new(meta, tensors)
}

pub fn save_source(
    gen: &SourceGenerator,
    disc: &DiscriminatorState,
    seed: Option<u64>,
    path: &Path,
) -> Result<()> {
    source_checkpoint(gen, disc, seed).save(path)
}

/// Rebuild a frozen generator and discriminator from a `source` checkpoint.
pub fn source_from_checkpoint(ckpt: &Checkpoint) -> Result<(SourceGenerator, DiscriminatorState)> {
    ckpt.expect_kind(SOURCE_KIND)?;
    let config: BackboneConfig = serde_json::from_value(ckpt.meta.config.clone())
        .map_err(|e| DormError::IncompatibleCheckpoint(format!("bad backbone config: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut gen = SourceGenerator::new(&mut rng, config.clone())
        .map_err(|e| DormError::IncompatibleCheckpoint(e.to_string()))?;
    let mut disc = DiscriminatorState::new(&mut rng, &config);
    gen.load_tensors(SOURCE_PREFIX, &ckpt.tensors)
        .map_err(DormError::IncompatibleCheckpoint)?;
    disc.load_tensors(DISC_PREFIX, &ckpt.tensors)
        .map_err(DormError::IncompatibleCheckpoint)?;
    gen.frozen = true;
    disc.frozen_extractor = true;
    Ok((gen, disc))
}

pub fn load_source(path: &Path) -> Result<(SourceGenerator, DiscriminatorState)> {
    source_from_checkpoint(&Checkpoint::load(path)?)
}
