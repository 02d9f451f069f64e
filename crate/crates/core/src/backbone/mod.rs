//! Desk-scale style-based generator and discriminator.

mod discriminator;
mod generator;
mod mapping;
mod pretrain;
mod synthesis;

pub use discriminator::{DiscriminatorState, FeatureExtractor};
pub use generator::SourceGenerator;
pub use mapping::MappingNetwork;
pub use pretrain::{
    load_source, pretrain_source, save_source, source_checkpoint, source_from_checkpoint,
    PretrainConfig, PretrainLog, PretrainOutcome, SOURCE_KIND,
};
pub use synthesis::{modulate_demodulate, LayerInfo, LayerKind, SynthLayer, SynthesisNetwork};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub resolution: usize,
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_depth: usize,
    pub mapping_lr_mul: f32,
    /// Channels at 4x4; halved at every doubling of resolution.
    pub base_channels: usize,
    pub min_channels: usize,
    pub disc_feature_dim: usize,
    pub demod_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            z_dim: 64,
            w_dim: 64,
            mapping_depth: 2,
            mapping_lr_mul: 1.0,
            base_channels: 128,
            min_channels: 16,
            disc_feature_dim: 128,
            demod_eps: 1e-8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.resolution >= 8 && self.resolution.is_power_of_two(),
            "resolution must be a power of two >= 8, got {}",
            self.resolution
        );
        ensure!(self.z_dim > 0 && self.w_dim > 0, "latent sizes must be positive");
        ensure!(self.mapping_depth >= 1, "mapping depth must be at least 1");
        ensure!(self.base_channels > 0 && self.min_channels > 0, "channel counts must be positive");
        ensure!(self.mapping_lr_mul > 0.0, "mapping lr multiplier must be positive");
        Ok(())
    }

    pub fn channels_at(&self, resolution: usize) -> usize {
        let doublings = (resolution / 4).trailing_zeros();
        (self.base_channels >> doublings).max(self.min_channels)
    }

    /// Resolutions of the synthesis blocks, 4 up to the output size.
    pub fn block_resolutions(&self) -> Vec<usize> {
        let mut out = vec![4];
        while *out.last().expect("nonempty") < self.resolution {
            let next = out.last().expect("nonempty") * 2;
            out.push(next);
        }
        out
    }
}

/// Input latent `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode(pub Vec<f32>);

/// Intermediate latent `w` produced by a mapping network.
#[derive(Clone, Debug, PartialEq)]
pub struct IntermediateLatent(pub Vec<f32>);

/// Per-layer channel-wise style `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleVector(pub Vec<f32>);

impl LatentCode {
    pub fn sample(rng: &mut impl rand::Rng, dim: usize) -> Self {
        Self(crate::nn::randn(rng, &[dim]).into_data())
    }

    /// The latent every command and endpoint derives from a user-facing seed.
    pub fn from_seed(seed: u64, dim: usize) -> Self {
        use rand::SeedableRng;
        Self::sample(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed), dim)
    }

    /// `(1 − t)·self + t·other`, exact at both ends.
    pub fn lerp(&self, other: &Self, t: f32) -> Self {
        if t == 0.0 {
            return self.clone();
        }
        if t == 1.0 {
            return other.clone();
        }
        Self(self.0.iter().zip(&other.0).map(|(a, b)| (1.0 - t) * a + t * b).collect())
    }
}

/// Per-pixel noise injection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseMode {
    #[default]
    Off,
    Seeded(u64),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_schedule_halves() {
        let c = BackboneConfig::default();
        assert_eq!(c.block_resolutions(), vec![4, 8, 16, 32]);
        let ch: Vec<usize> = c.block_resolutions().iter().map(|&r| c.channels_at(r)).collect();
        assert_eq!(ch, vec![128, 64, 32, 16]);
        let big = BackboneConfig { resolution: 64, ..c };
        assert_eq!(big.channels_at(64), 16);
    }

    #[test]
    fn rejects_odd_resolution() {
        let c = BackboneConfig { resolution: 24, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
