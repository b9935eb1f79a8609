use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::DiscriminatorConfig;
use super::generator::LayerApplier;
use super::layers::{discriminator_layout, LayerDescriptor};
use super::params::ParamStore;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Conditional patch discriminator over `concat(source, candidate)`.
#[derive(Clone, Debug)]
pub struct Discriminator<T: Scalar = f32> {
    config: DiscriminatorConfig,
    layout: Vec<LayerDescriptor>,
    by_id: BTreeMap<String, LayerDescriptor>,
    params: ParamStore<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn build(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = discriminator_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParamStore::init_from_layout(&layout, &mut rng);
        Ok(Self::assemble(config, layout, params))
    }

    pub fn from_params(config: DiscriminatorConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let layout = discriminator_layout(&config);
        params.check_layout(&layout)?;
        Ok(Self::assemble(config, layout, params))
    }

    fn assemble(config: DiscriminatorConfig, layout: Vec<LayerDescriptor>, params: ParamStore<T>) -> Self {
        let by_id = layout.iter().map(|d| (d.layer_id.clone(), d.clone())).collect();
        Self { config, layout, by_id, params }
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn describe_layers(&self) -> &[LayerDescriptor] {
        &self.layout
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Discriminator<U> {
        Discriminator {
            config: self.config.clone(),
            layout: self.layout.clone(),
            by_id: self.by_id.clone(),
            params: self.params.cast(),
        }
    }

    /// Logit grid `[B, 1, G, G]` with `G = resolution/8 - 1`.
    pub fn forward_graph<'a>(&'a self, g: &mut Graph<'a, T>, source: Var, candidate: Var) -> Result<Var> {
        let r = self.config.image_resolution;
        for v in [source, candidate] {
            let s = g.shape(v);
            if s.len() != 4 || s[1..] != [3, r, r] || s[0] != g.shape(source)[0] {
                return Err(Error::Shape {
                    context: "discriminator input".into(),
                    expected: format!("[B, 3, {r}, {r}]"),
                    actual: format!("{s:?}"),
                });
            }
        }
        let mut ap = LayerApplier { g, layout: &self.by_id, params: &self.params, lora: None };
        let mut h = ap.g.concat1(&[source, candidate])?;
        for i in 0..3 {
            h = ap.conv(&format!("d.{i}"), h)?;
            if i > 0 {
                h = ap.instance_norm(&format!("d.{i}.norm"), h)?;
            }
            h = ap.g.leaky_relu(h, LEAKY_SLOPE);
        }
        ap.conv("d.3", h)
    }

    pub fn forward(&self, source: &Tensor<T>, candidate: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let (s, c) = (g.input_ref(source), g.input_ref(candidate));
        let y = self.forward_graph(&mut g, s, c)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DISCRIMINATOR_GRID_SHRINK;

    #[test]
    fn logit_grid_has_documented_extent() {
        let cfg = DiscriminatorConfig { base_channels: 8, image_resolution: 32 };
        let d = Discriminator::<f32>::build(cfg.clone(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[1, 3, 32, 32], 0.5, &mut rng);
        let y = Tensor::randn(&[1, 3, 32, 32], 0.5, &mut rng);
        let out = d.forward(&x, &y).unwrap();
        let g = 32 / 8 - DISCRIMINATOR_GRID_SHRINK;
        assert_eq!(out.shape(), &[1, 1, g, g]);
        assert_eq!(cfg.logit_grid(), g);
    }

    #[test]
    fn logits_depend_on_both_inputs() {
        let d = Discriminator::<f32>::build(DiscriminatorConfig { base_channels: 8, image_resolution: 32 }, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[1, 3, 32, 32], 0.5, &mut rng);
        let y = Tensor::randn(&[1, 3, 32, 32], 0.5, &mut rng);
        let y2 = Tensor::randn(&[1, 3, 32, 32], 0.5, &mut rng);
        let x2 = Tensor::randn(&[1, 3, 32, 32], 0.5, &mut rng);
        let base = d.forward(&x, &y).unwrap();
        assert_ne!(base, d.forward(&x, &y2).unwrap());
        assert_ne!(base, d.forward(&x2, &y).unwrap());
    }

    #[test]
    fn rebuild_with_seed_is_bit_identical() {
        let cfg = DiscriminatorConfig::micro();
        let a = Discriminator::<f32>::build(cfg.clone(), 11).unwrap();
        let b = Discriminator::<f32>::build(cfg, 11).unwrap();
        assert_eq!(a.params().checksum(), b.params().checksum());
    }

    #[test]
    fn resolution_must_divide_by_8() {
        let err = Discriminator::<f32>::build(DiscriminatorConfig { base_channels: 8, image_resolution: 36 }, 0);
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
