use dorm_tensor::{Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backbone::{LayerInfo, MappingNetwork, SourceGenerator};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::error::{ensure, DormError, Result};
use crate::nn::{join, EqLinear, Graph, Parameters};

pub const MODULE_KIND: &str = "ma_module";

/// Resolution at or below which a layer counts as low-resolution.
pub const LOW_RES_MAX: usize = 8;

/// Which synthesis layers get a trainable target affine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AffineSubset {
    #[default]
    All,
    /// Only layers at resolution <= 8; high-resolution layers keep the source style.
    LowOnly,
    /// Only layers above resolution 8.
    HighOnly,
}

impl AffineSubset {
    pub fn covers(self, layer: &LayerInfo) -> bool {
        match self {
            AffineSubset::All => true,
            AffineSubset::LowOnly => layer.resolution <= LOW_RES_MAX,
            AffineSubset::HighOnly => layer.resolution > LOW_RES_MAX,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_hash: String,
    pub config_hash: String,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModuleOptions {
    pub affines: AffineSubset,
    /// When false the frozen source mapping stands in for `f_t`.
    pub target_mapping: bool,
    pub default_alpha: f32,
}

impl Default for ModuleOptions {
    fn default() -> Self {
        Self {
            affines: AffineSubset::All,
            target_mapping: true,
            default_alpha: 0.2,
        }
    }
}

/// One domain's mapping + affine module: `f_t` and the per-layer `A_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct MAModule {
    pub domain_name: String,
    pub default_alpha: f32,
    pub options: ModuleOptions,
    /// `None` when the target mapping is disabled.
    pub mapping: Option<MappingNetwork>,
    /// `None` for layers outside the affine subset; those reuse `s_s`.
    pub affines: Vec<Option<EqLinear>>,
    pub provenance: Provenance,
}

impl MAModule {
    /// Fresh module copied from the source's `f_s` and `A_s`.
    pub fn create(source: &SourceGenerator, domain_name: &str) -> Self {
        Self::create_with(source, domain_name, ModuleOptions::default())
    }

    pub fn create_with(source: &SourceGenerator, domain_name: &str, options: ModuleOptions) -> Self {
        let layers = source.layers();
        let affines = source
            .affines
            .iter()
            .zip(&layers)
            .map(|(a, l)| options.affines.covers(l).then(|| a.clone()))
            .collect();
        Self {
            domain_name: domain_name.to_string(),
            default_alpha: options.default_alpha,
            mapping: options.target_mapping.then(|| source.mapping.clone()),
            affines,
            provenance: Provenance {
                source_hash: source.content_hash(),
                ..Default::default()
            },
            options,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.affines.len()
    }

    /// Target styles for a batch; `w_s` and `s_s` are the source path's values for the same `z`.
    pub fn target_styles_on<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        prefix: &str,
        z: Var,
        w_s: Var,
        s_s: &[Var],
    ) -> Vec<Var> {
        let w_t = match &self.mapping {
            Some(m) => m.forward(g, &join(prefix, "mapping"), z),
            None => w_s,
        };
        self.affines
            .iter()
            .enumerate()
            .map(|(l, a)| match a {
                Some(a) => a.forward(g, &format!("{prefix}.affine.{l}"), w_t),
                None => s_s[l],
            })
            .collect()
    }

    pub fn check_compatible(&self, source: &SourceGenerator, source_hash: &str) -> Result<()> {
        if self.provenance.source_hash != source_hash {
            return Err(DormError::IncompatibleCheckpoint(format!(
                "module `{}` was built for source {}, loaded source is {}",
                self.domain_name,
                short(&self.provenance.source_hash),
                short(source_hash)
            )));
        }
        let ok_layers = self.affines.len() == source.num_layers()
            && self
                .affines
                .iter()
                .zip(&source.affines)
                .all(|(t, s)| t.as_ref().map_or(true, |t| t.weight.shape() == s.weight.shape()));
        if !ok_layers {
            return Err(DormError::IncompatibleCheckpoint(format!(
                "module `{}` does not match the source layer layout",
                self.domain_name
            )));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = CheckpointMeta::new(
            MODULE_KIND,
            json!({
                "options": self.options,
                "layers": self.affines.len(),
                "affine_shapes": self.affines.iter().map(|a| a.as_ref().map(|a| a.weight.shape().to_vec())).collect::<Vec<_>>(),
                "mapping_shapes": self.mapping.as_ref().map(|m| m.layers.iter().map(|l| l.weight.shape().to_vec()).collect::<Vec<_>>()),
                "lr_mul": self.mapping.as_ref().and_then(|m| m.layers.first()).map(|l| l.lr_mul),
            }),
        );
        meta.domain = Some(self.domain_name.clone());
        meta.extra.insert("default_alpha".into(), json!(self.default_alpha));
        meta.extra.insert("provenance".into(), json!(self.provenance));
        Checkpoint::new(meta, self.named_tensors(""))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(MODULE_KIND)?;
        let bad = |m: &str| DormError::IncompatibleCheckpoint(format!("module checkpoint: {m}"));
        let cfg = &ckpt.meta.config;
        let options: ModuleOptions = serde_json::from_value(cfg["options"].clone())
            .map_err(|e| bad(&format!("options: {e}")))?;
        let affine_shapes: Vec<Option<Vec<usize>>> =
            serde_json::from_value(cfg["affine_shapes"].clone()).map_err(|e| bad(&e.to_string()))?;
        let mapping_shapes: Option<Vec<Vec<usize>>> =
            serde_json::from_value(cfg["mapping_shapes"].clone()).map_err(|e| bad(&e.to_string()))?;
        let lr_mul = cfg["lr_mul"].as_f64().unwrap_or(1.0) as f32;
        let linear = |shape: &[usize], lr_mul: f32| -> Result<EqLinear> {
            ensure!(shape.len() == 2, "linear weight must be rank 2");
            Ok(EqLinear {
                weight: Tensor::zeros(shape.to_vec()),
                bias: Tensor::zeros(vec![shape[0]]),
                lr_mul,
            })
        };
        let mapping = match mapping_shapes {
            Some(shapes) => Some(MappingNetwork {
                layers: shapes.iter().map(|s| linear(s, lr_mul)).collect::<Result<_>>()?,
            }),
            None => None,
        };
        let affines = affine_shapes
            .iter()
            .map(|s| s.as_ref().map(|s| linear(s, 1.0)).transpose())
            .collect::<Result<_>>()?;
        let provenance: Provenance = ckpt
            .meta
            .extra
            .get("provenance")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| bad(&format!("provenance: {e}")))?
            .ok_or_else(|| bad("missing provenance"))?;
        let default_alpha = ckpt
            .meta
            .extra
            .get("default_alpha")
            .and_then(|v| v.as_f64())
            .unwrap_or(options.default_alpha as f64) as f32;
        let mut module = Self {
            domain_name: ckpt.meta.domain.clone().ok_or_else(|| bad("missing domain name"))?,
            default_alpha,
            options,
            mapping,
            affines,
            provenance,
        };
        module
            .load_tensors("", &ckpt.tensors)
            .map_err(|e| bad(&e))?;
        Ok(module)
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

impl Parameters for MAModule {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<f32>)) {
        if let Some(m) = &self.mapping {
            m.visit(&join(prefix, "mapping"), f);
        }
        for (l, a) in self.affines.iter().enumerate() {
            if let Some(a) = a {
                a.visit(&join(prefix, &format!("affine.{l}")), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
        if let Some(m) = &mut self.mapping {
            m.visit_mut(&join(prefix, "mapping"), f);
        }
        for (l, a) in self.affines.iter_mut().enumerate() {
            if let Some(a) = a {
                a.visit_mut(&join(prefix, &format!("affine.{l}")), f);
            }
        }
    }
}
