mod common;

use common::*;
use dorm_core::backbone::{source_checkpoint, LatentCode, NoiseMode, StyleVector};
use dorm_core::checkpoint::{Checkpoint, CheckpointMeta};
use dorm_core::dorm::{
    combine_styles, combine_styles_multi, generate, AffineSubset, DomainBank, DormGenerator, MAModule, MixSpec,
    ModuleOptions, BANK_FILE,
};
use dorm_core::nn::Parameters;
use dorm_core::training::render_training_path;
use dorm_core::DormError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A module whose weights have been nudged away from the copy-init.
fn trained_module(source: &dorm_core::backbone::SourceGenerator, name: &str, seed: u64) -> MAModule {
    let mut m = MAModule::create(source, name);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    m.visit_mut("", &mut |_, t| {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    });
    m
}

fn bank_with(source: &dorm_core::backbone::SourceGenerator, modules: Vec<MAModule>) -> DomainBank {
    let mut bank = DomainBank::new(source.content_hash());
    for m in modules {
        bank.insert(m).unwrap();
    }
    bank
}

#[test]
fn blend_endpoints_and_arithmetic() {
    let s_s = StyleVector(vec![0.0, 1.0]);
    let s_t = StyleVector(vec![1.0, 0.0]);
    assert_eq!(combine_styles(&s_s, &s_t, 0.0).unwrap(), s_s);
    assert_eq!(combine_styles(&s_s, &s_t, 1.0).unwrap(), s_t);
    let mid = combine_styles(&s_s, &s_t, 0.2).unwrap();
    assert!(max_abs_diff(&mid.0, &[0.2, 0.8]) < 1e-7);
    assert!(combine_styles(&s_s, &s_t, 1.5).is_err());

    let zero = StyleVector(vec![0.0, 0.0]);
    let t2 = StyleVector(vec![0.0, 1.0]);
    let multi = combine_styles_multi(&zero, &[(&s_t, 0.3), (&t2, 0.3)]).unwrap();
    assert!(max_abs_diff(&multi.0, &[0.3, 0.3]) < 1e-7);
    assert_eq!(combine_styles_multi(&s_s, &[]).unwrap(), s_s);
    assert!(combine_styles_multi(&zero, &[(&s_t, 0.7), (&t2, 0.4)]).is_err());
    assert!(combine_styles_multi(&zero, &[(&s_t, 0.7), (&t2, 0.3)]).is_ok());
}

#[test]
fn fresh_module_copies_source_exactly() {
    let source = tiny_source(1);
    let m = MAModule::create(&source, "fresh");
    assert_eq!(m.provenance.source_hash, source.content_hash());
    let bank = bank_with(&source, vec![m]);
    let dg = DormGenerator::new(&source, &bank).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let z = LatentCode::sample(&mut rng, 8);
        let src = source.generate(&z, NoiseMode::Off).unwrap();
        for alpha in [0.0, 0.005, 0.2, 0.5, 1.0] {
            assert_eq!(dg.generate(&MixSpec::single("fresh", alpha), &z, None).unwrap(), src);
        }
        assert_eq!(dg.generate(&MixSpec::default(), &z, None).unwrap(), src);
    }
}

#[test]
fn trained_module_generation_matches_training_path() {
    let source = tiny_source(3);
    let m = trained_module(&source, "sketch", 4);
    let bank = bank_with(&source, vec![m.clone()]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for alpha in [0.2, 0.5, 1.0] {
        let z = LatentCode::sample(&mut rng, 8);
        let a = generate(&source, &bank, &MixSpec::single("sketch", alpha), &z, None).unwrap();
        let b = render_training_path(&source, &m, alpha, &z).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, source.generate(&z, NoiseMode::Off).unwrap());
    }
}

#[test]
fn override_replaces_weights() {
    let source = tiny_source(3);
    let bank = bank_with(&source, vec![trained_module(&source, "a", 1)]);
    let z = LatentCode::sample(&mut ChaCha8Rng::seed_from_u64(0), 8);
    let dg = DormGenerator::new(&source, &bank).unwrap();
    let direct = dg.generate(&MixSpec::single("a", 0.05), &z, None).unwrap();
    let overridden = dg.generate(&MixSpec::single("a", 0.9), &z, Some(0.05)).unwrap();
    assert_eq!(direct, overridden);
}

#[test]
fn mix_validation_errors() {
    let source = tiny_source(3);
    let bank = bank_with(&source, vec![trained_module(&source, "a", 1), trained_module(&source, "b", 2)]);
    let dg = DormGenerator::new(&source, &bank).unwrap();
    let z = LatentCode::sample(&mut ChaCha8Rng::seed_from_u64(0), 8);
    let over: MixSpec = "a=0.7,b=0.4".parse().unwrap();
    assert!(matches!(dg.generate(&over, &z, None), Err(DormError::InvalidInput(_))));
    let unknown: MixSpec = "c=0.1".parse().unwrap();
    assert!(matches!(dg.generate(&unknown, &z, None), Err(DormError::NotFound(_))));
    let negative: MixSpec = "a=-0.1".parse().unwrap();
    assert!(dg.generate(&negative, &z, None).is_err());
    assert!("a0.5".parse::<MixSpec>().is_err());
    let ok: MixSpec = "a=0.5, b=0.5".parse().unwrap();
    assert_eq!(ok.to_string(), "a=0.5,b=0.5");
    dg.generate(&ok, &z, None).unwrap();
}

#[test]
fn mismatched_source_is_rejected() {
    let source = tiny_source(3);
    let other = tiny_source(4);
    let bank = bank_with(&source, vec![trained_module(&source, "a", 1)]);
    assert!(matches!(DormGenerator::new(&other, &bank), Err(DormError::IncompatibleCheckpoint(_))));
    let mut b2 = DomainBank::new(source.content_hash());
    assert!(b2.insert(MAModule::create(&other, "x")).is_err());
    assert!(b2.insert(MAModule::create(&source, "")).is_err());
    b2.insert(MAModule::create(&source, "x")).unwrap();
    assert!(b2.insert(MAModule::create(&source, "x")).is_err());
}

#[test]
fn affine_subsets_leave_other_layers_on_the_source_style() {
    let source = tiny_source(6);
    let layers = source.layers();
    let low = MAModule::create_with(
        &source,
        "low",
        ModuleOptions {
            affines: AffineSubset::LowOnly,
            ..Default::default()
        },
    );
    let high = MAModule::create_with(
        &source,
        "high",
        ModuleOptions {
            affines: AffineSubset::HighOnly,
            ..Default::default()
        },
    );
    for (l, info) in layers.iter().enumerate() {
        assert_eq!(low.affines[l].is_some(), info.resolution <= 8);
        assert_eq!(high.affines[l].is_some(), info.resolution > 8);
    }
    let no_map = MAModule::create_with(
        &source,
        "nomap",
        ModuleOptions {
            target_mapping: false,
            ..Default::default()
        },
    );
    assert!(no_map.mapping.is_none());
    let bank = bank_with(&source, vec![no_map]);
    let z = LatentCode::sample(&mut ChaCha8Rng::seed_from_u64(1), 8);
    assert_eq!(
        generate(&source, &bank, &MixSpec::single("nomap", 0.3), &z, None).unwrap(),
        source.generate(&z, NoiseMode::Off).unwrap()
    );
}

#[test]
fn bank_roundtrip_is_bitwise() {
    let source = tiny_source(7);
    let bank = bank_with(
        &source,
        vec![trained_module(&source, "sketch", 1), trained_module(&source, "baby", 2), trained_module(&source, "sunglasses", 3)],
    );
    let dir = tempfile::tempdir().unwrap();
    bank.save(dir.path()).unwrap();
    let loaded = DomainBank::load(dir.path()).unwrap();
    assert_eq!(loaded, bank);
    assert_eq!(loaded.bank_hash(), bank.bank_hash());
    assert_eq!(loaded.names(), vec!["baby", "sketch", "sunglasses"]);
    for name in bank.names() {
        assert_eq!(loaded.get(name).unwrap().named_tensors(""), bank.get(name).unwrap().named_tensors(""));
    }
}

#[test]
fn tampered_bank_fails_integrity() {
    let source = tiny_source(7);
    let bank = bank_with(&source, vec![trained_module(&source, "sketch", 1)]);
    let dir = tempfile::tempdir().unwrap();
    bank.save(dir.path()).unwrap();
    let file = dir.path().join("module_000.dormckpt");
    let mut bytes = std::fs::read(&file).unwrap();
    let last = bytes.len() - 3;
    bytes[last] ^= 0x40;
    std::fs::write(&file, bytes).unwrap();
    assert!(matches!(DomainBank::load(dir.path()), Err(DormError::Checksum(_))));
}

#[test]
fn bank_index_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(DomainBank::load(dir.path()), Err(DormError::NotFound(_))));
    std::fs::write(dir.path().join(BANK_FILE), b"{ not json").unwrap();
    assert!(matches!(DomainBank::load(dir.path()), Err(DormError::CorruptCheckpoint(_))));
    std::fs::write(
        dir.path().join(BANK_FILE),
        br#"{"format_version": 99, "source_hash": "x", "domains": []}"#,
    )
    .unwrap();
    assert!(matches!(DomainBank::load(dir.path()), Err(DormError::VersionMismatch { found: 99, .. })));
}

#[test]
fn module_checkpoint_roundtrip_keeps_options() {
    let source = tiny_source(8);
    let mut m = MAModule::create_with(
        &source,
        "hi",
        ModuleOptions {
            affines: AffineSubset::HighOnly,
            target_mapping: false,
            default_alpha: 0.05,
        },
    );
    m.provenance.steps = 12;
    let back = MAModule::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().to_bytes().unwrap()).unwrap()).unwrap();
    assert_eq!(back, m);
    assert!(back.check_compatible(&source, &source.content_hash()).is_ok());
    assert!(back.check_compatible(&tiny_source(9), &tiny_source(9).content_hash()).is_err());
}

#[test]
fn ten_domain_bank_is_smaller_than_ten_generators() {
    let source = tiny_source(10);
    let bank = bank_with(&source, (0..10).map(|i| trained_module(&source, &format!("d{i}"), i)).collect());
    let generator_only = Checkpoint::new(
        CheckpointMeta::new("source", serde_json::json!({})),
        source.named_tensors("source"),
    );
    let generator_bytes = generator_only.to_bytes().unwrap().len();
    assert!(source_checkpoint(&source, &tiny_disc(10), None).to_bytes().unwrap().len() > generator_bytes);
    assert!(bank.storage_bytes().unwrap() < 10 * generator_bytes);
}
