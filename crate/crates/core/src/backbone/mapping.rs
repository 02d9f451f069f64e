use dorm_tensor::{Scalar, Tensor, Var};
use rand::Rng;

use super::BackboneConfig;
use crate::nn::{join, EqLinear, Graph, Parameters, LRELU_SLOPE};

/// Mapping network `z -> w`: a stack of fully connected layers, each followed
/// by a leaky rectifier.
#[derive(Clone, Debug, PartialEq)]
pub struct MappingNetwork {
    pub layers: Vec<EqLinear>,
}

impl MappingNetwork {
    pub fn new(rng: &mut impl Rng, cfg: &BackboneConfig) -> Self {
        let layers = (0..cfg.mapping_depth)
            .map(|i| {
                let fan_in = if i == 0 { cfg.z_dim } else { cfg.w_dim };
                EqLinear::new(rng, fan_in, cfg.w_dim, 0.0, cfg.mapping_lr_mul)
            })
            .collect();
        Self { layers }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, name: &str, z: Var) -> Var {
        let mut x = z;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, &join(name, &i.to_string()), x);
            x = g.leaky_relu(x, LRELU_SLOPE);
        }
        x
    }

    /// Convenience batch evaluation outside of any training graph.
    pub fn eval(&self, z: &Tensor<f32>) -> Tensor<f32> {
        let mut g = Graph::<f32>::inference();
        let zv = g.constant(z.clone());
        let w = self.forward(&mut g, "m", zv);
        g.value(w).clone()
    }
}

impl Parameters for MappingNetwork {
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
