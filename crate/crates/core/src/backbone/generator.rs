use dorm_tensor::{Scalar, Tensor, Var};
use rand::Rng;

use super::{
    BackboneConfig, IntermediateLatent, LatentCode, LayerInfo, MappingNetwork, NoiseMode,
    StyleVector, SynthesisNetwork,
};
use crate::error::{ensure, Result};
use crate::image::{unstack, ImageTensor};
use crate::nn::{join, EqLinear, Graph, Parameters};

/// Pretrained source generator: mapping `f_s`, per-layer affines `A_s` and synthesis `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceGenerator {
    pub config: BackboneConfig,
    pub mapping: MappingNetwork,
    pub affines: Vec<EqLinear>,
    pub synthesis: SynthesisNetwork,
    /// Set once pretraining is over; adaptation never takes this by `&mut`.
    pub frozen: bool,
}

pub(crate) const SOURCE_PREFIX: &str = "source";

impl SourceGenerator {
    pub fn new(rng: &mut impl Rng, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mapping = MappingNetwork::new(rng, &config);
        let affines = LayerInfo::all(&config)
            .iter()
            .map(|l| EqLinear::new(rng, config.w_dim, l.in_channels, 1.0, 1.0))
            .collect();
        let synthesis = SynthesisNetwork::new(rng, &config);
        Ok(Self {
            config,
            mapping,
            affines,
            synthesis,
            frozen: false,
        })
    }

    pub fn layers(&self) -> Vec<LayerInfo> {
        self.synthesis.layers.iter().map(|l| l.info).collect()
    }

    pub fn num_layers(&self) -> usize {
        self.affines.len()
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub(crate) fn check_latent(&self, z: &LatentCode) -> Result<()> {
        ensure!(
            z.0.len() == self.config.z_dim,
            "latent has {} entries, expected {}",
            z.0.len(),
            self.config.z_dim
        );
        ensure!(z.0.iter().all(|v| v.is_finite()), "latent contains non-finite values");
        Ok(())
    }

    /// `w = f_s(z)`.
    pub fn map_latent(&self, z: &LatentCode) -> Result<IntermediateLatent> {
        self.check_latent(z)?;
        let w = self
            .mapping
            .eval(&Tensor::new(vec![1, z.0.len()], z.0.clone()));
        Ok(IntermediateLatent(w.into_data()))
    }

    /// `s = A_s[layer](w)`.
    pub fn affine(&self, w: &IntermediateLatent, layer: usize) -> Result<StyleVector> {
        ensure!(
            layer < self.affines.len(),
            "layer {layer} out of range (generator has {})",
            self.affines.len()
        );
        ensure!(
            w.0.len() == self.config.w_dim,
            "intermediate latent has {} entries, expected {}",
            w.0.len(),
            self.config.w_dim
        );
        Ok(StyleVector(eval_linear(&self.affines[layer], &w.0)))
    }

    /// Every layer's style for one `w`.
    pub fn styles(&self, w: &IntermediateLatent) -> Result<Vec<StyleVector>> {
        (0..self.num_layers()).map(|l| self.affine(w, l)).collect()
    }

    /// Render one image from explicit per-layer styles.
    pub fn synthesize(&self, styles: &[StyleVector], noise: NoiseMode) -> Result<ImageTensor> {
        ensure!(
            styles.len() == self.num_layers(),
            "got {} styles for {} layers",
            styles.len(),
            self.num_layers()
        );
        for (s, l) in styles.iter().zip(self.layers()) {
            ensure!(
                s.0.len() == l.in_channels,
                "style for layer {} has {} entries, expected {}",
                l.index,
                s.0.len(),
                l.in_channels
            );
        }
        let mut g = Graph::<f32>::inference();
        let vars: Vec<Var> = styles
            .iter()
            .map(|s| g.constant(Tensor::new(vec![1, s.0.len()], s.0.clone())))
            .collect();
        let img = self.synthesis.forward(&mut g, &join(SOURCE_PREFIX, "synthesis"), &vars, noise);
        let img = g.value(img).clone();
        Ok(unstack(&img).remove(0))
    }

    /// Pure source image `g(A_s(f_s(z)))`.
    pub fn generate(&self, z: &LatentCode, noise: NoiseMode) -> Result<ImageTensor> {
        self.check_latent(z)?;
        let mut g = Graph::<f32>::inference();
        let zv = g.constant(Tensor::new(vec![1, z.0.len()], z.0.clone()));
        let w = self.map_on(&mut g, zv);
        let styles = self.styles_on(&mut g, w);
        let img = self.synthesize_on(&mut g, &styles, noise);
        let img = g.value(img).clone();
        Ok(unstack(&img).remove(0))
    }

    pub fn map_on<T: Scalar>(&self, g: &mut Graph<T>, z: Var) -> Var {
        self.mapping.forward(g, &join(SOURCE_PREFIX, "mapping"), z)
    }

    pub fn affine_on<T: Scalar>(&self, g: &mut Graph<T>, layer: usize, w: Var) -> Var {
        self.affines[layer].forward(g, &format!("{SOURCE_PREFIX}.affine.{layer}"), w)
    }

    pub fn styles_on<T: Scalar>(&self, g: &mut Graph<T>, w: Var) -> Vec<Var> {
        (0..self.num_layers()).map(|l| self.affine_on(g, l, w)).collect()
    }

    pub fn synthesize_on<T: Scalar>(&self, g: &mut Graph<T>, styles: &[Var], noise: NoiseMode) -> Var {
        self.synthesis
            .forward(g, &join(SOURCE_PREFIX, "synthesis"), styles, noise)
    }
}

pub(crate) fn eval_linear(layer: &EqLinear, x: &[f32]) -> Vec<f32> {
    let mut g = Graph::<f32>::inference();
    let xv = g.constant(Tensor::new(vec![1, x.len()], x.to_vec()));
    let y = layer.forward(&mut g, "l", xv);
    g.value(y).data().to_vec()
}

impl Parameters for SourceGenerator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<f32>)) {
        self.mapping.visit(&join(prefix, "mapping"), f);
        for (i, a) in self.affines.iter().enumerate() {
            a.visit(&join(prefix, &format!("affine.{i}")), f);
        }
        self.synthesis.visit(&join(prefix, "synthesis"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
        self.mapping.visit_mut(&join(prefix, "mapping"), f);
        for (i, a) in self.affines.iter_mut().enumerate() {
            a.visit_mut(&join(prefix, &format!("affine.{i}")), f);
        }
        self.synthesis.visit_mut(&join(prefix, "synthesis"), f);
    }
}
