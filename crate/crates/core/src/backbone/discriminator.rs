use dorm_tensor::{Scalar, Tensor, Var};
use rand::Rng;

use super::BackboneConfig;
use crate::error::{ensure, Result};
use crate::image::{stack, ImageTensor};
use crate::nn::{join, EqConv, EqLinear, Graph, Parameters, LRELU_SLOPE};

/// Discriminator backbone `d`: image -> feature vector of length `disc_feature_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub resolution: usize,
    pub from_rgb: EqConv,
    /// Per resolution above 4: a 3x3 conv followed by a stride-2 3x3 conv.
    pub blocks: Vec<(EqConv, EqConv)>,
    pub final_conv: EqConv,
    pub fc: EqLinear,
}

impl FeatureExtractor {
    pub fn new(rng: &mut impl Rng, cfg: &BackboneConfig) -> Self {
        let top = cfg.channels_at(cfg.resolution);
        let from_rgb = EqConv::new(rng, 3, top, 1, 1);
        let mut blocks = Vec::new();
        let mut res = cfg.resolution;
        while res > 4 {
            let c = cfg.channels_at(res);
            let next = cfg.channels_at(res / 2);
            blocks.push((EqConv::new(rng, c, c, 3, 1), EqConv::new(rng, c, next, 3, 2)));
            res /= 2;
        }
        let c4 = cfg.channels_at(4);
        Self {
            resolution: cfg.resolution,
            from_rgb,
            blocks,
            final_conv: EqConv::new(rng, c4, c4, 3, 1),
            fc: EqLinear::new(rng, c4 * 16, cfg.disc_feature_dim, 0.0, 1.0),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.fc.fan_out()
    }

    /// `[B, 3, H, W] -> [B, d_f]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, name: &str, x: Var) -> Var {
        let mut h = self.from_rgb.forward(g, &join(name, "from_rgb"), x);
        for (i, (a, b)) in self.blocks.iter().enumerate() {
            h = a.forward(g, &join(name, &format!("block{i}.conv")), h);
            h = b.forward(g, &join(name, &format!("block{i}.down")), h);
        }
        h = self.final_conv.forward(g, &join(name, "final_conv"), h);
        let shape = g.shape(h).to_vec();
        let flat = g.reshape(h, &[shape[0], shape[1] * shape[2] * shape[3]]);
        let f = self.fc.forward(g, &join(name, "fc"), flat);
        g.leaky_relu(f, LRELU_SLOPE)
    }
}

impl Parameters for FeatureExtractor {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<f32>)) {
        self.from_rgb.visit(&join(prefix, "from_rgb"), f);
        for (i, (a, b)) in self.blocks.iter().enumerate() {
            a.visit(&join(prefix, &format!("block{i}.conv")), f);
            b.visit(&join(prefix, &format!("block{i}.down")), f);
        }
        self.final_conv.visit(&join(prefix, "final_conv"), f);
        self.fc.visit(&join(prefix, "fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
        self.from_rgb.visit_mut(&join(prefix, "from_rgb"), f);
        for (i, (a, b)) in self.blocks.iter_mut().enumerate() {
            a.visit_mut(&join(prefix, &format!("block{i}.conv")), f);
            b.visit_mut(&join(prefix, &format!("block{i}.down")), f);
        }
        self.final_conv.visit_mut(&join(prefix, "final_conv"), f);
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }
}

/// Source discriminator: feature extractor plus the logit layer used during pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorState {
    pub extractor: FeatureExtractor,
    pub head: EqLinear,
    /// Pretraining-only logit term on the batch's feature spread, which lets
    /// the discriminator notice collapsed fake batches.
    pub batch_std: EqLinear,
    pub frozen_extractor: bool,
}

pub(crate) const DISC_PREFIX: &str = "disc";

impl DiscriminatorState {
    pub fn new(rng: &mut impl Rng, cfg: &BackboneConfig) -> Self {
        let extractor = FeatureExtractor::new(rng, cfg);
        let head = EqLinear::new(rng, cfg.disc_feature_dim, 1, 0.0, 1.0);
        let batch_std = EqLinear::new(rng, 1, 1, 0.0, 1.0);
        Self {
            extractor,
            head,
            batch_std,
            frozen_extractor: false,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.feature_dim()
    }

    pub fn features_on<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        self.extractor.forward(g, &join(DISC_PREFIX, "extractor"), x)
    }

    /// Full pretraining discriminator: logits `[B, 1]`. The batch is one
    /// group for the feature-spread term.
    pub fn logits_on<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let f = self.features_on(g, x);
        let logits = self.head.forward(g, &join(DISC_PREFIX, "head"), f);
        let batch = g.shape(f)[0];
        let mean = g.mean_axes(f, &[0], true);
        let dev = g.sub(f, mean);
        let var = g.square(dev);
        let var = g.mean_axes(var, &[0], true);
        let var = g.add_scalar(var, 1e-8);
        let std = g.sqrt(var);
        let spread = g.mean_axes(std, &[1], true);
        let ones = g.constant(Tensor::ones(vec![batch, 1]));
        let spread = g.mul(ones, spread);
        let extra = self.batch_std.forward(g, &join(DISC_PREFIX, "batch_std"), spread);
        g.add(logits, extra)
    }

    fn check_images(&self, images: &[&ImageTensor]) -> Result<()> {
        ensure!(!images.is_empty(), "no images given");
        for img in images {
            ensure!(
                img.height() == self.extractor.resolution && img.width() == self.extractor.resolution,
                "image is {}x{}, discriminator expects {r}x{r}",
                img.height(),
                img.width(),
                r = self.extractor.resolution
            );
        }
        Ok(())
    }

    /// `d(x)` for one image.
    pub fn disc_features(&self, x: &ImageTensor) -> Result<Vec<f32>> {
        Ok(self.disc_features_batch(&[x])?.into_data())
    }

    /// `d(x)` for a batch, `[B, d_f]`.
    pub fn disc_features_batch(&self, images: &[&ImageTensor]) -> Result<Tensor<f32>> {
        self.check_images(images)?;
        let mut g = Graph::<f32>::inference();
        let x = g.constant(stack(images));
        let f = self.features_on(&mut g, x);
        Ok(g.value(f).clone())
    }
}

impl Parameters for DiscriminatorState {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<f32>)) {
        self.extractor.visit(&join(prefix, "extractor"), f);
        self.head.visit(&join(prefix, "head"), f);
        self.batch_std.visit(&join(prefix, "batch_std"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
        self.extractor.visit_mut(&join(prefix, "extractor"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
        self.batch_std.visit_mut(&join(prefix, "batch_std"), f);
    }
}
