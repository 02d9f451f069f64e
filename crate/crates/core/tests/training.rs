mod common;

use std::collections::BTreeMap;

use common::{random_image, tiny_disc, tiny_source};
use dorm_core::backbone::{IntermediateLatent, LatentCode, NoiseMode, SourceGenerator};
use dorm_core::data::FewShotDataset;
use dorm_core::encoder::Encoder;
use dorm_core::error::DormError;
use dorm_core::image::ImageTensor;
use dorm_core::losses::LossConfig;
use dorm_core::nn::{tensor_digest, Parameters};
use dorm_core::training::{
    adapt_few_shot, adapt_one_shot, classifier_forward, invert_latent, render_batch, render_training_path, run_ablation,
    AblationKind, AdaptConfig, ClassifierHead, EvalSetup, HeadConfig, HeadInit, InversionConfig, TrainingContext,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn digests(p: &impl Parameters, prefix: &str) -> BTreeMap<String, String> {
    p.named_tensors(prefix)
        .into_iter()
        .map(|(k, v)| (k, tensor_digest(&v)))
        .collect()
}

fn images(seed: u64, n: usize) -> Vec<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_image(&mut rng, 8)).collect()
}

fn small_config(steps: usize) -> AdaptConfig {
    AdaptConfig {
        head: HeadConfig {
            hidden: 16,
            ..HeadConfig::default()
        },
        ..AdaptConfig::default()
    }
    .with_steps(steps)
}

struct Fixture {
    source: SourceGenerator,
    disc: dorm_core::backbone::DiscriminatorState,
    encoder: Encoder,
}

impl Fixture {
    fn new() -> Self {
        Self {
            source: tiny_source(1),
            disc: tiny_disc(1),
            encoder: Encoder::default_for(8),
        }
    }

    fn ctx(&self) -> TrainingContext<'_> {
        TrainingContext {
            source: &self.source,
            disc: &self.disc,
            encoder: &self.encoder,
        }
    }
}

#[test]
fn frozen_tensors_stay_put_and_trainables_move() {
    let fx = Fixture::new();
    let data = FewShotDataset::from_images(images(2, 4)).unwrap();
    let before_src = digests(&fx.source, "source");
    let before_disc = digests(&fx.disc, "disc");
    let out = adapt_few_shot(fx.ctx(), &data, &small_config(40)).unwrap();
    assert_eq!(digests(&fx.source, "source"), before_src);
    assert_eq!(digests(&fx.disc, "disc"), before_disc);

    let fresh = dorm_core::dorm::MAModule::create(&fx.source, "target");
    let (a, b) = (digests(&fresh, "m"), digests(&out.module, "m"));
    assert_eq!(a.len(), b.len());
    for (name, d) in &a {
        assert_ne!(&b[name], d, "{name} was not updated");
    }
    let (a, b) = (digests(&out.initial_head, "h"), digests(&out.head, "h"));
    for (name, d) in &a {
        assert_ne!(&b[name], d, "{name} was not updated");
    }
}

#[test]
fn structure_loss_starts_at_zero() {
    let fx = Fixture::new();
    let data = FewShotDataset::from_images(images(3, 3)).unwrap();
    let out = adapt_few_shot(fx.ctx(), &data, &small_config(5)).unwrap();
    assert_eq!(out.logs.len(), 5);
    assert!(out.logs[0].l_ss.abs() < 1e-6, "{}", out.logs[0].l_ss);
    assert!(out.logs.iter().all(|l| l.l_local == 0.0 && l.l_scc == 0.0));
}

#[test]
fn runs_are_deterministic() {
    let fx = Fixture::new();
    let data = FewShotDataset::from_images(images(4, 3)).unwrap();
    let cfg = small_config(8);
    let a = adapt_few_shot(fx.ctx(), &data, &cfg).unwrap();
    let b = adapt_few_shot(fx.ctx(), &data, &cfg).unwrap();
    assert_eq!(a.logs, b.logs);
    assert_eq!(a.module, b.module);
    let c = adapt_few_shot(fx.ctx(), &data, &AdaptConfig { seed: 9, ..cfg }).unwrap();
    assert_ne!(a.logs, c.logs);
}

#[test]
fn one_shot_without_extra_losses_matches_few_shot() {
    let fx = Fixture::new();
    let img = images(5, 1).remove(0);
    let cfg = AdaptConfig {
        losses: LossConfig {
            lambda_local: 0.0,
            lambda_scc: 0.0,
            ..LossConfig::default()
        },
        ..small_config(12)
    };
    let one = adapt_one_shot(fx.ctx(), &img, &cfg).unwrap();
    let few = adapt_few_shot(fx.ctx(), &FewShotDataset::from_images(vec![img]).unwrap(), &cfg).unwrap();
    assert_eq!(one.logs, few.logs);
    assert_eq!(one.module.affines, few.module.affines);
}

#[test]
fn one_shot_with_all_losses_trains() {
    let fx = Fixture::new();
    let img = images(6, 1).remove(0);
    let cfg = AdaptConfig {
        inversion: InversionConfig {
            steps: 20,
            mean_samples: 32,
            ..InversionConfig::default()
        },
        ..small_config(10)
    };
    let out = adapt_one_shot(fx.ctx(), &img, &cfg).unwrap();
    assert_eq!(out.logs.len(), 10);
    for l in &out.logs {
        assert!(l.total.is_finite());
        assert!(l.l_local > 0.0);
        assert!(l.l_scc >= 0.0 && l.l_scc.is_finite());
    }
}

#[test]
fn eval_samples_follow_the_training_path() {
    let fx = Fixture::new();
    let data = FewShotDataset::from_images(images(7, 2)).unwrap();
    let cfg = AdaptConfig {
        eval_samples: 3,
        ..small_config(6)
    };
    let out = adapt_few_shot(fx.ctx(), &data, &cfg).unwrap();
    assert_eq!(out.eval.len(), 3);
    for (z, img) in &out.eval {
        let again = render_training_path(&fx.source, &out.module, cfg.alpha, z).unwrap();
        assert_eq!(&again, img);
    }
    let zs: Vec<LatentCode> = out.eval.iter().map(|(z, _)| z.clone()).collect();
    let batch = render_batch(&fx.source, Some((&out.module, cfg.alpha)), &zs).unwrap();
    for (b, (_, img)) in batch.iter().zip(&out.eval) {
        assert!(common::max_abs_diff(b.pixels().data(), img.pixels().data()) < 1e-5);
    }
    let plain = render_batch(&fx.source, None, &zs[..1]).unwrap();
    assert_eq!(plain[0], fx.source.generate(&zs[0], NoiseMode::Off).unwrap());
}

fn render_w(source: &SourceGenerator, w: &IntermediateLatent) -> ImageTensor {
    source.synthesize(&source.styles(w).unwrap(), NoiseMode::Off).unwrap()
}

#[test]
fn inversion_from_the_true_latent_stays_exact() {
    let fx = Fixture::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = fx.source.map_latent(&LatentCode::sample(&mut rng, 8)).unwrap();
    let target = render_w(&fx.source, &w);
    let init = vec![w; fx.source.num_layers()];
    let cfg = InversionConfig {
        steps: 500,
        ..InversionConfig::default()
    };
    let res = invert_latent(&fx.source, &fx.encoder, &target, Some(&init), &cfg).unwrap();
    assert!(res.mse < 1e-6, "{}", res.mse);
}

#[test]
fn inversion_from_the_mean_reduces_error() {
    let fx = Fixture::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = fx.source.map_latent(&LatentCode::sample(&mut rng, 8)).unwrap();
    let target = render_w(&fx.source, &w);
    let start = InversionConfig {
        steps: 0,
        mean_samples: 200,
        ..InversionConfig::default()
    };
    let before = invert_latent(&fx.source, &fx.encoder, &target, None, &start).unwrap();
    let after = invert_latent(
        &fx.source,
        &fx.encoder,
        &target,
        None,
        &InversionConfig { steps: 300, ..start },
    )
    .unwrap();
    assert!(after.mse < 0.5 * before.mse, "{} -> {}", before.mse, after.mse);
    assert_eq!(after.w_plus.len(), fx.source.num_layers());
}

#[test]
fn inversion_rejects_wrong_sizes() {
    let fx = Fixture::new();
    let img = ImageTensor::constant(16, [0.0; 3]);
    assert!(matches!(
        invert_latent(&fx.source, &fx.encoder, &img, None, &InversionConfig::default()),
        Err(DormError::InvalidInput(_))
    ));
    let img = ImageTensor::constant(8, [0.0; 3]);
    let short = vec![IntermediateLatent(vec![0.0; 8])];
    assert!(invert_latent(&fx.source, &fx.encoder, &img, Some(&short), &InversionConfig::default()).is_err());
}

#[test]
fn ablation_reports_every_cell_and_records_failures() {
    let fx = Fixture::new();
    let data = FewShotDataset::from_images(images(10, 3)).unwrap();
    let eval = EvalSetup {
        holdout: images(11, 6),
        samples: 6,
        seed: 1,
    };
    let dir = tempfile::tempdir().unwrap();
    let base = AdaptConfig {
        out_dir: Some(dir.path().to_path_buf()),
        eval_samples: 0,
        ..small_config(3)
    };

    let r = run_ablation(fx.ctx(), &data, &base, AblationKind::AlphaSweep, &eval).unwrap();
    assert_eq!(r.rows.len(), 5);
    assert!(r.rows.iter().all(|row| row.desk_fid.is_some()));
    assert!(r.source_fid.is_finite());
    assert!(dir.path().join("alpha-sweep").join("alpha_0.2").join("module.dormckpt").exists());
    let text = r.to_string();
    assert!(text.contains("alpha=0.005"));

    let r = run_ablation(fx.ctx(), &data, &base, AblationKind::TargetMappingOff, &eval).unwrap();
    assert_eq!(r.rows.len(), 2);
    assert!(r.fid("full").is_some() && r.fid("target-mapping-off").is_some());

    // A source-initialized head only exists at depth 1.
    let base = AdaptConfig {
        head: HeadConfig {
            depth: 1,
            init: HeadInit::FromSource,
            ..base.head
        },
        ..base
    };
    let r = run_ablation(fx.ctx(), &data, &base, AblationKind::HeadDepth, &eval).unwrap();
    assert_eq!(r.rows.len(), 3);
    assert!(r.fid("depth=1").is_some());
    for v in ["depth=2", "depth=3"] {
        let row = r.get(v).unwrap();
        assert!(row.desk_fid.is_none() && row.error.is_some(), "{row:?}");
    }
}

#[test]
fn ablation_kinds_parse() {
    for k in AblationKind::ALL {
        assert_eq!(k.name().parse::<AblationKind>().unwrap(), k);
    }
    assert!("everything".parse::<AblationKind>().is_err());
}

#[test]
fn huge_learning_rate_diverges() {
    let fx = Fixture::new();
    let data = FewShotDataset::from_images(images(12, 2)).unwrap();
    let cfg = AdaptConfig {
        lr: 1e30,
        head_lr: 1e30,
        ..small_config(20)
    };
    match adapt_few_shot(fx.ctx(), &data, &cfg) {
        Err(DormError::TrainingDiverged { step, .. }) => assert!(step > 0),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.logs.len())),
    }
}

#[test]
fn zeroed_head_is_undecided() {
    let fx = Fixture::new();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut head = ClassifierHead::new(&mut rng, fx.disc.feature_dim(), &HeadConfig::default(), &fx.disc).unwrap();
    let last = head.layers.last_mut().unwrap();
    last.weight = last.weight.map(|_| 0.0);
    last.bias = last.bias.map(|_| 0.0);
    for img in images(14, 3) {
        assert_eq!(classifier_forward(&fx.disc, &head, &img).unwrap(), 0.5);
    }
}

#[test]
fn writes_log_and_checkpoints() {
    let fx = Fixture::new();
    let data = FewShotDataset::from_images(images(15, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = AdaptConfig {
        out_dir: Some(dir.path().to_path_buf()),
        checkpoint_every: 2,
        ..small_config(4)
    };
    let out = adapt_few_shot(fx.ctx(), &data, &cfg).unwrap();
    let log = std::fs::read_to_string(dir.path().join("adapt_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(dir.path().join("module_step000002.dormckpt").exists());
    assert!(dir.path().join("module_step000004.dormckpt").exists());
    let path = out.checkpoint.unwrap();
    let ckpt = dorm_core::checkpoint::Checkpoint::load(&path).unwrap();
    let back = dorm_core::dorm::MAModule::from_checkpoint(&ckpt).unwrap();
    assert_eq!(back, out.module);
    assert_eq!(back.provenance.steps, 4);
    assert_eq!(back.provenance.config_hash, cfg.config_hash());
}

#[test]
fn rejects_mismatched_data() {
    let fx = Fixture::new();
    let data = FewShotDataset::from_images(vec![ImageTensor::constant(16, [0.0; 3])]).unwrap();
    assert!(matches!(
        adapt_few_shot(fx.ctx(), &data, &small_config(2)),
        Err(DormError::InvalidInput(_))
    ));
    let data = FewShotDataset::from_images(images(16, 1)).unwrap();
    let bad = AdaptConfig {
        alpha: 1.5,
        ..small_config(2)
    };
    assert!(adapt_few_shot(fx.ctx(), &data, &bad).is_err());
}
