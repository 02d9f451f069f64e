use dorm_tensor::{Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::DiscriminatorState;
use crate::error::{ensure, Result};
use crate::image::ImageTensor;
use crate::nn::{join, EqLinear, Graph, Parameters, LRELU_SLOPE};

pub const HEAD_PREFIX: &str = "head";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadInit {
    /// Random equalized-lr initialization.
    #[default]
    Scratch,
    /// Copy the pretraining logit layer (depth 1 only).
    FromSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub depth: usize,
    pub hidden: usize,
    pub init: HeadInit,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            hidden: 256,
            init: HeadInit::Scratch,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (1..=3).contains(&self.depth),
            "classifier depth must be 1, 2 or 3, got {}",
            self.depth
        );
        ensure!(self.hidden >= 1, "hidden width must be positive");
        ensure!(
            self.init == HeadInit::Scratch || self.depth == 1,
            "initializing from the source head needs depth 1"
        );
        Ok(())
    }
}

/// Target-domain classifier `φ`: an MLP over discriminator features.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub layers: Vec<EqLinear>,
}

impl ClassifierHead {
    pub fn new(rng: &mut impl Rng, feature_dim: usize, cfg: &HeadConfig, disc: &DiscriminatorState) -> Result<Self> {
        cfg.validate()?;
        if cfg.init == HeadInit::FromSource {
            ensure!(
                disc.head.fan_in() == feature_dim,
                "source head expects {} features, got {feature_dim}",
                disc.head.fan_in()
            );
            return Ok(Self {
                layers: vec![disc.head.clone()],
            });
        }
        let mut layers = Vec::with_capacity(cfg.depth);
        let mut fan_in = feature_dim;
        for i in 0..cfg.depth {
            let fan_out = if i + 1 == cfg.depth { 1 } else { cfg.hidden };
            layers.push(EqLinear::new(rng, fan_in, fan_out, 0.0, 1.0));
            fan_in = fan_out;
        }
        Ok(Self { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    /// `[B, d_f] -> [B, 1]` logits.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, feats: Var) -> Var {
        let mut x = feats;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, &join(HEAD_PREFIX, &i.to_string()), x);
            if i + 1 < self.layers.len() {
                x = g.leaky_relu(x, LRELU_SLOPE);
            }
        }
        x
    }

    /// Logits for precomputed feature rows.
    pub fn logits(&self, feats: &Tensor<f32>) -> Vec<f32> {
        let mut g = Graph::<f32>::inference();
        let f = g.constant(feats.clone());
        let y = self.forward(&mut g, f);
        g.value(y).data().to_vec()
    }
}

impl Parameters for ClassifierHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<f32>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// `p = σ(φ(d(x)))`.
pub fn classifier_forward(disc: &DiscriminatorState, head: &ClassifierHead, x: &ImageTensor) -> Result<f64> {
    ensure!(
        head.feature_dim() == disc.feature_dim(),
        "head expects {} features, discriminator produces {}",
        head.feature_dim(),
        disc.feature_dim()
    );
    let f = disc.disc_features(x)?;
    let logit = head.logits(&Tensor::new(vec![1, f.len()], f))[0] as f64;
    Ok(sigmoid(logit))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
