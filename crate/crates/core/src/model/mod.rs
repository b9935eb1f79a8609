//! Generator and discriminator definitions.

mod config;
mod discriminator;
mod generator;
mod layers;
mod params;

pub use config::{
    DiscriminatorConfig, GeneratorConfig, TbPosition, TbSandwich, DISCRIMINATOR_GRID_SHRINK, DOWNSAMPLING_STEPS,
};
pub use discriminator::{Discriminator, LEAKY_SLOPE};
pub use generator::{Generator, Stage};
pub use layers::{
    discriminator_layout, generator_layout, param_name, AttnRole, LayerDescriptor, LayerGroup, LayerKind,
};
pub use params::{ParamStore, INIT_STD};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Scalar, Tensor};

/// Draws a `[batch, noise_dim]` standard-normal noise batch.
pub fn sample_noise<T: Scalar, R: Rng + ?Sized>(batch: usize, noise_dim: usize, rng: &mut R) -> Tensor<T> {
    let data = (0..batch * noise_dim)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(v)
        })
        .collect();
    Tensor::new(&[batch, noise_dim], data).expect("noise shape")
}
