//! Domain re-modulation: target modules, style blending, the domain bank and
//! multi-domain generation.

mod bank;
mod module;

pub use bank::{DomainBank, BANK_FILE};
pub use module::{AffineSubset, MAModule, ModuleOptions, Provenance, LOW_RES_MAX, MODULE_KIND};

use std::fmt;
use std::str::FromStr;

use dorm_tensor::{Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{LatentCode, NoiseMode, SourceGenerator, StyleVector};
use crate::error::{ensure, invalid, DormError, Result};
use crate::image::{unstack, ImageTensor};
use crate::nn::{Graph, Parameters};

/// Slack allowed on `Σ w ≤ 1` so that e.g. `0.7 + 0.3` is accepted.
pub const WEIGHT_SUM_TOLERANCE: f32 = 1e-6;

/// `s = s_s + Σ_k w_k (s_t_k − s_s)` on a graph. A single entry with weight 1
/// returns `s_t` itself and zero weights are skipped, so both endpoints are exact.
pub fn combine_on<T: Scalar>(g: &mut Graph<T>, s_s: Var, targets: &[(Var, f64)]) -> Var {
    if let [(s_t, w)] = targets {
        if *w == 1.0 {
            return *s_t;
        }
    }
    let mut acc = s_s;
    for &(s_t, w) in targets.iter().filter(|t| t.1 != 0.0) {
        let d = g.sub(s_t, s_s);
        let d = g.scale(d, w);
        acc = g.add(acc, d);
    }
    acc
}

/// `s = α·s_t + (1−α)·s_s`.
pub fn combine_styles(s_s: &StyleVector, s_t: &StyleVector, alpha: f32) -> Result<StyleVector> {
    ensure!(
        (0.0..=1.0).contains(&alpha),
        "alpha must lie in [0, 1], got {alpha}"
    );
    combine_styles_multi(s_s, &[(s_t, alpha)])
}

/// `s = (1 − Σ w_k)·s_s + Σ w_k·s_t_k`.
pub fn combine_styles_multi(s_s: &StyleVector, contributions: &[(&StyleVector, f32)]) -> Result<StyleVector> {
    check_weights(contributions.iter().map(|c| c.1))?;
    for (s_t, _) in contributions {
        ensure!(
            s_t.0.len() == s_s.0.len(),
            "style lengths differ ({} vs {})",
            s_t.0.len(),
            s_s.0.len()
        );
    }
    let row = |s: &StyleVector| Tensor::new(vec![1, s.0.len()], s.0.clone());
    let mut g = Graph::<f32>::inference();
    let ss = g.constant(row(s_s));
    let targets: Vec<(Var, f64)> = contributions
        .iter()
        .map(|(s_t, w)| (g.constant(row(s_t)), *w as f64))
        .collect();
    let s = combine_on(&mut g, ss, &targets);
    Ok(StyleVector(g.value(s).data().to_vec()))
}

fn check_weights(weights: impl Iterator<Item = f32>) -> Result<()> {
    let mut sum = 0.0f32;
    for w in weights {
        ensure!(w.is_finite() && w >= 0.0, "mix weights must be finite and >= 0, got {w}");
        sum += w;
    }
    ensure!(
        sum <= 1.0 + WEIGHT_SUM_TOLERANCE,
        "mix weights sum to {sum}, which exceeds 1"
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixEntry {
    pub domain: String,
    pub weight: f32,
}

/// Weighted set of domains to activate. An empty mix is the pure source.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub entries: Vec<MixEntry>,
    /// Optional per-layer multiplier on every weight (defaults to all ones).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_scale: Option<Vec<f32>>,
}

impl MixSpec {
    pub fn single(domain: &str, weight: f32) -> Self {
        Self {
            entries: vec![MixEntry {
                domain: domain.to_string(),
                weight,
            }],
            layer_scale: None,
        }
    }

    pub fn weight_sum(&self) -> f32 {
        self.entries.iter().map(|e| e.weight).sum()
    }

    /// Check weights and names; unknown names are a not-found error.
    pub fn validate(&self, bank: &DomainBank) -> Result<()> {
        check_weights(self.entries.iter().map(|e| e.weight))?;
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            ensure!(seen.insert(&e.domain), "domain `{}` listed twice", e.domain);
            if bank.get(&e.domain).is_none() {
                return Err(DormError::NotFound(format!("domain `{}`", e.domain)));
            }
        }
        if let Some(scale) = &self.layer_scale {
            ensure!(
                scale.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)),
                "layer scales must lie in [0, 1]"
            );
        }
        Ok(())
    }
}

impl fmt::Display for MixSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .entries
            .iter()
            .map(|e| format!("{}={}", e.domain, e.weight))
            .collect();
        f.write_str(&parts.join(","))
    }
}

/// Parses `name=weight,name=weight`.
impl FromStr for MixSpec {
    type Err = DormError;

    fn from_str(s: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, w) = part
                .split_once('=')
                .ok_or_else(|| invalid(format!("expected name=weight, got `{part}`")))?;
            let weight: f32 = w
                .trim()
                .parse()
                .map_err(|_| invalid(format!("bad weight `{w}` for `{name}`")))?;
            entries.push(MixEntry {
                domain: name.trim().to_string(),
                weight,
            });
        }
        Ok(Self {
            entries,
            layer_scale: None,
        })
    }
}

/// Source generator plus a bank that has been checked against it.
#[derive(Clone, Copy, Debug)]
pub struct DormGenerator<'a> {
    pub source: &'a SourceGenerator,
    pub bank: &'a DomainBank,
}

impl<'a> DormGenerator<'a> {
    pub fn new(source: &'a SourceGenerator, bank: &'a DomainBank) -> Result<Self> {
        let hash = source.content_hash();
        if bank.source_hash() != hash {
            return Err(DormError::IncompatibleCheckpoint(format!(
                "bank was built for source {}, loaded source is {}",
                &bank.source_hash()[..12.min(bank.source_hash().len())],
                &hash[..12]
            )));
        }
        for m in bank.modules() {
            m.check_compatible(source, &hash)?;
        }
        Ok(Self { source, bank })
    }

    /// Render one image for `mix`; `alpha_override` replaces every entry's weight.
    pub fn generate(&self, mix: &MixSpec, z: &LatentCode, alpha_override: Option<f32>) -> Result<ImageTensor> {
        let mix = match alpha_override {
            Some(a) => MixSpec {
                entries: mix
                    .entries
                    .iter()
                    .map(|e| MixEntry {
                        domain: e.domain.clone(),
                        weight: a,
                    })
                    .collect(),
                layer_scale: mix.layer_scale.clone(),
            },
            None => mix.clone(),
        };
        mix.validate(self.bank)?;
        self.source.check_latent(z)?;
        if let Some(scale) = &mix.layer_scale {
            ensure!(
                scale.len() == self.source.num_layers(),
                "layer scale has {} entries for {} layers",
                scale.len(),
                self.source.num_layers()
            );
        }
        let modules: Vec<(&MAModule, f32)> = mix
            .entries
            .iter()
            .map(|e| (self.bank.get(&e.domain).expect("validated"), e.weight))
            .collect();
        let mut g = Graph::<f32>::inference();
        let zv = g.constant(Tensor::new(vec![1, z.0.len()], z.0.clone()));
        let img = render_on(&mut g, self.source, &modules, mix.layer_scale.as_deref(), zv);
        let img = g.value(img).clone();
        Ok(unstack(&img).remove(0))
    }
}

/// The full adapted forward pass `g(combine(A_s(f_s(z)), A_t(f_t(z))))` for a batch of `z`.
///
/// Module `k` is bound under the prefix `ma{k}`.
pub fn render_on<T: Scalar>(
    g: &mut Graph<T>,
    source: &SourceGenerator,
    modules: &[(&MAModule, f32)],
    layer_scale: Option<&[f32]>,
    z: Var,
) -> Var {
    let styles = adapted_styles_on(g, source, modules, layer_scale, z);
    source.synthesize_on(g, &styles, NoiseMode::Off)
}

pub fn adapted_styles_on<T: Scalar>(
    g: &mut Graph<T>,
    source: &SourceGenerator,
    modules: &[(&MAModule, f32)],
    layer_scale: Option<&[f32]>,
    z: Var,
) -> Vec<Var> {
    let w_s = source.map_on(g, z);
    let s_s = source.styles_on(g, w_s);
    adapted_styles_from(g, modules, layer_scale, z, w_s, &s_s)
}

/// As [`adapted_styles_on`] with the source latent `w_s` and styles `s_s` already computed.
pub fn adapted_styles_from<T: Scalar>(
    g: &mut Graph<T>,
    modules: &[(&MAModule, f32)],
    layer_scale: Option<&[f32]>,
    z: Var,
    w_s: Var,
    s_s: &[Var],
) -> Vec<Var> {
    let targets: Vec<Vec<Var>> = modules
        .iter()
        .enumerate()
        .map(|(k, (m, _))| m.target_styles_on(g, &module_prefix(k), z, w_s, s_s))
        .collect();
    (0..s_s.len())
        .map(|l| {
            let scale = layer_scale.map_or(1.0, |s| s[l]);
            let pairs: Vec<(Var, f64)> = targets
                .iter()
                .zip(modules)
                .map(|(t, (_, w))| (t[l], (*w * scale) as f64))
                .collect();
            combine_on(g, s_s[l], &pairs)
        })
        .collect()
}

pub fn module_prefix(k: usize) -> String {
    format!("ma{k}")
}

/// Convenience wrapper around [`DormGenerator`].
pub fn generate(
    source: &SourceGenerator,
    bank: &DomainBank,
    mix: &MixSpec,
    z: &LatentCode,
    alpha_override: Option<f32>,
) -> Result<ImageTensor> {
    DormGenerator::new(source, bank)?.generate(mix, z, alpha_override)
}
