//! Few-shot and one-shot adaptation, latent inversion and ablations.

mod ablation;
mod adapt;
mod head;
mod invert;

pub use ablation::{run_ablation, AblationKind, AblationReport, AblationRow, EvalSetup};
pub use adapt::{
    adapt_few_shot, adapt_one_shot, render_batch, render_training_path, AdaptLog, AdaptOutcome, TrainingContext,
};
pub use head::{classifier_forward, ClassifierHead, HeadConfig, HeadInit, HEAD_PREFIX};
pub use invert::{invert_latent, mean_latent, InversionConfig, InversionResult, StyleInverter};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dorm::ModuleOptions;
use crate::error::{ensure, Result};
use crate::losses::LossConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMode {
    #[default]
    FewShot,
    OneShot,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Augmentation {
    #[default]
    None,
    Xflip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub domain: String,
    /// Re-modulation strength used during training and stored as the module default.
    pub alpha: f32,
    pub batch_size: usize,
    /// Real images seen by the discriminator; steps = budget / batch size.
    pub real_image_budget: usize,
    pub lr: f64,
    pub head_lr: f64,
    pub betas: (f64, f64),
    pub losses: LossConfig,
    pub mode: AdaptMode,
    pub seed: u64,
    pub augmentation: Augmentation,
    pub head: HeadConfig,
    pub module: ModuleOptions,
    pub inversion: InversionConfig,
    /// Invert the one-shot reference once and use it to seed the target latent queue.
    pub seed_queue_with_reference: bool,
    /// Images rendered through the training forward path after the last step.
    pub eval_samples: usize,
    pub checkpoint_every: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            domain: "target".into(),
            alpha: 0.2,
            batch_size: 4,
            real_image_budget: 20_000,
            lr: 0.002,
            head_lr: 0.002,
            betas: (0.0, 0.99),
            losses: LossConfig::default(),
            mode: AdaptMode::FewShot,
            seed: 0,
            augmentation: Augmentation::None,
            head: HeadConfig::default(),
            module: ModuleOptions::default(),
            inversion: InversionConfig::default(),
            seed_queue_with_reference: true,
            eval_samples: 4,
            checkpoint_every: 0,
            out_dir: None,
        }
    }
}

impl AdaptConfig {
    pub fn steps(&self) -> usize {
        self.real_image_budget / self.batch_size.max(1)
    }

    /// Budget for an exact number of steps at the current batch size.
    pub fn with_steps(mut self, steps: usize) -> Self {
        self.real_image_budget = steps * self.batch_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, "batch size must be at least 1");
        ensure!(
            self.real_image_budget >= self.batch_size,
            "real image budget {} is smaller than the batch size {}",
            self.real_image_budget,
            self.batch_size
        );
        ensure!(
            (0.0..=1.0).contains(&self.alpha),
            "alpha must lie in [0, 1], got {}",
            self.alpha
        );
        ensure!(self.lr > 0.0 && self.head_lr > 0.0, "learning rates must be positive");
        ensure!(!self.domain.is_empty(), "domain name must not be empty");
        self.losses.validate()?;
        self.head.validate()?;
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}
