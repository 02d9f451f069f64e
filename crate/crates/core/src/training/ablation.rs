use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adapt::{adapt_few_shot, render_batch, TrainingContext};
use super::AdaptConfig;
use crate::backbone::LatentCode;
use crate::data::FewShotDataset;
use crate::dorm::AffineSubset;
use crate::error::{ensure, DormError, Result};
use crate::image::ImageTensor;
use crate::metrics::{desk_fid, FeatureStats};

/// Re-modulation weights swept by [`AblationKind::AlphaSweep`].
pub const ALPHA_GRID: [f32; 5] = [0.5, 0.2, 0.05, 0.005, 0.001];
pub const HEAD_DEPTHS: [usize; 3] = [1, 2, 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationKind {
    TargetMappingOff,
    LowAffinesOff,
    HighAffinesOff,
    AlphaSweep,
    HeadDepth,
}

impl AblationKind {
    pub const ALL: [AblationKind; 5] = [
        Self::TargetMappingOff,
        Self::LowAffinesOff,
        Self::HighAffinesOff,
        Self::AlphaSweep,
        Self::HeadDepth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::TargetMappingOff => "target-mapping-off",
            Self::LowAffinesOff => "low-affines-off",
            Self::HighAffinesOff => "high-affines-off",
            Self::AlphaSweep => "alpha-sweep",
            Self::HeadDepth => "head-depth",
        }
    }

    /// Variant labels and their configs, derived from `base`.
    pub fn variants(self, base: &AdaptConfig) -> Vec<(String, AdaptConfig)> {
        let with = |f: &dyn Fn(&mut AdaptConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Self::TargetMappingOff => vec![
                ("full".into(), base.clone()),
                (self.name().into(), with(&|c| c.module.target_mapping = false)),
            ],
            Self::LowAffinesOff => vec![
                ("full".into(), base.clone()),
                (self.name().into(), with(&|c| c.module.affines = AffineSubset::HighOnly)),
            ],
            Self::HighAffinesOff => vec![
                ("full".into(), base.clone()),
                (self.name().into(), with(&|c| c.module.affines = AffineSubset::LowOnly)),
            ],
            Self::AlphaSweep => ALPHA_GRID
                .iter()
                .map(|&a| {
                    (
                        format!("alpha={a}"),
                        with(&|c| {
                            c.alpha = a;
                            c.module.default_alpha = a;
                        }),
                    )
                })
                .collect(),
            Self::HeadDepth => HEAD_DEPTHS
                .iter()
                .map(|&d| (format!("depth={d}"), with(&|c| c.head.depth = d)))
                .collect(),
        }
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationKind {
    type Err = DormError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| DormError::InvalidInput(format!("unknown ablation kind {s:?}")))
    }
}

/// Holdout images and sampling settings for scoring each variant.
#[derive(Clone, Debug)]
pub struct EvalSetup {
    pub holdout: Vec<ImageTensor>,
    pub samples: usize,
    pub seed: u64,
}

impl EvalSetup {
    pub fn latents(&self, z_dim: usize) -> Vec<LatentCode> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.samples).map(|_| LatentCode::sample(&mut rng, z_dim)).collect()
    }

    pub fn holdout_stats(&self, encoder: &crate::encoder::Encoder) -> Result<FeatureStats> {
        ensure!(self.holdout.len() >= 2, "holdout needs at least two images");
        FeatureStats::of_images(encoder, &self.holdout.iter().collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub config_hash: String,
    pub desk_fid: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub kind: AblationKind,
    /// Desk-FID of the unadapted source generator on the same holdout.
    pub source_fid: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn get(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn fid(&self, variant: &str) -> Option<f64> {
        self.get(variant).and_then(|r| r.desk_fid)
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ablation {}", self.kind)?;
        writeln!(f, "{:<22} {:>12}", "variant", "desk-fid")?;
        writeln!(f, "{:<22} {:>12.4}", "source", self.source_fid)?;
        for r in &self.rows {
            match (r.desk_fid, &r.error) {
                (Some(v), _) => writeln!(f, "{:<22} {:>12.4}", r.variant, v)?,
                (None, Some(e)) => writeln!(f, "{:<22} {:>12}  {e}", r.variant, "failed")?,
                (None, None) => writeln!(f, "{:<22} {:>12}", r.variant, "-")?,
            }
        }
        Ok(())
    }
}

/// Train every variant of `kind` and score it by desk-FID against the holdout.
///
/// A failing cell is recorded in its row and the remaining cells still run.
pub fn run_ablation(
    ctx: TrainingContext<'_>,
    data: &FewShotDataset,
    base: &AdaptConfig,
    kind: AblationKind,
    eval: &EvalSetup,
) -> Result<AblationReport> {
    base.validate()?;
    ensure!(eval.samples >= 2, "need at least two evaluation samples");
    let holdout = eval.holdout_stats(ctx.encoder)?;
    let zs = eval.latents(ctx.source.config.z_dim);
    let score = |imgs: Vec<ImageTensor>| -> Result<f64> {
        let refs: Vec<&ImageTensor> = imgs.iter().collect();
        desk_fid(&FeatureStats::of_images(ctx.encoder, &refs)?, &holdout)
    };
    let source_fid = score(render_batch(ctx.source, None, &zs)?)?;

    let mut rows = Vec::new();
    for (variant, mut cfg) in kind.variants(base) {
        if let Some(dir) = &base.out_dir {
            cfg.out_dir = Some(dir.join(format!("{kind}")).join(variant.replace('=', "_")));
        }
        let config_hash = cfg.config_hash();
        let result = (|| -> Result<f64> {
            if let Some(dir) = &cfg.out_dir {
                std::fs::create_dir_all(dir)?;
            }
            let out = adapt_few_shot(ctx, data, &cfg)?;
            score(render_batch(ctx.source, Some((&out.module, cfg.alpha)), &zs)?)
        })();
        let row = match result {
            Ok(v) => AblationRow {
                variant,
                config_hash,
                desk_fid: Some(v),
                error: None,
            },
            Err(e) => AblationRow {
                variant,
                config_hash,
                desk_fid: None,
                error: Some(e.to_string()),
            },
        };
        rows.push(row);
    }
    Ok(AblationReport { kind, source_fid, rows })
}
