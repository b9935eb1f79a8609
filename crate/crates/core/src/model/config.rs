use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where the transformer block sits among the ResNet blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TbPosition {
    BeforeRb1,
    AfterRb1,
    AfterRb2,
    AfterRb3,
}

impl TbPosition {
    /// Number of ResNet blocks that run before the transformer block.
    pub fn index(self) -> usize {
        match self {
            TbPosition::BeforeRb1 => 0,
            TbPosition::AfterRb1 => 1,
            TbPosition::AfterRb2 => 2,
            TbPosition::AfterRb3 => 3,
        }
    }
}

/// How the feature map is halved around the transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TbSandwich {
    /// Strided conv before, transposed conv after.
    ConvTranspose,
    /// 2x2 max pool before, max unpool after (parameter-free).
    PoolUnpool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub num_resnet_blocks: usize,
    pub num_transformer_blocks: usize,
    pub tb_position: TbPosition,
    pub tb_sandwich: TbSandwich,
    pub attention_dim: usize,
    /// Hidden width of the gated feed-forward (the first projection emits twice this).
    pub ffn_inner: usize,
    pub text_embed_dim: usize,
    pub noise_dim: usize,
    pub use_cross_attention: bool,
    pub image_resolution: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            num_resnet_blocks: 3,
            num_transformer_blocks: 1,
            tb_position: TbPosition::AfterRb2,
            tb_sandwich: TbSandwich::ConvTranspose,
            attention_dim: 256,
            ffn_inner: 1024,
            text_embed_dim: 128,
            noise_dim: 16,
            use_cross_attention: true,
            image_resolution: 256,
        }
    }
}

/// Number of stride-2 convolutions in the downsampling stack.
pub const DOWNSAMPLING_STEPS: usize = 3;

impl GeneratorConfig {
    /// The small configuration used by gradient checks and desk-scale runs.
    pub fn micro() -> Self {
        Self {
            base_channels: 8,
            attention_dim: 32,
            ffn_inner: 64,
            text_embed_dim: 16,
            noise_dim: 8,
            image_resolution: 16,
            ..Self::default()
        }
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels * 4
    }

    /// Spatial reduction factor of the feature map seen by the ResNet blocks.
    pub fn bottleneck_div(&self) -> usize {
        1 << DOWNSAMPLING_STEPS
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.base_channels == 0 {
            return fail("base_channels must be positive".into());
        }
        if self.num_resnet_blocks < 1 {
            return fail("num_resnet_blocks must be >= 1".into());
        }
        if self.num_transformer_blocks > 2 {
            return fail(format!(
                "num_transformer_blocks must be 0, 1 or 2 (got {})",
                self.num_transformer_blocks
            ));
        }
        if self.tb_position.index() > self.num_resnet_blocks {
            return fail(format!(
                "tb_position {:?} requires at least {} ResNet blocks (have {})",
                self.tb_position,
                self.tb_position.index(),
                self.num_resnet_blocks
            ));
        }
        if self.attention_dim != self.bottleneck_channels() {
            return fail(format!(
                "attention_dim ({}) must equal the bottleneck channel count 4*base_channels ({})",
                self.attention_dim,
                self.bottleneck_channels()
            ));
        }
        if self.ffn_inner == 0 || self.text_embed_dim == 0 {
            return fail("ffn_inner and text_embed_dim must be positive".into());
        }
        let div = if self.num_transformer_blocks > 0 { self.bottleneck_div() * 2 } else { self.bottleneck_div() };
        if self.image_resolution == 0 || !self.image_resolution.is_multiple_of(div) {
            return fail(format!(
                "image_resolution ({}) must be a positive multiple of {div}",
                self.image_resolution
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub image_resolution: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { base_channels: 64, image_resolution: 256 }
    }
}

/// The logit grid is `resolution / 8 - DISCRIMINATOR_GRID_SHRINK` cells wide.
pub const DISCRIMINATOR_GRID_SHRINK: usize = 1;

impl DiscriminatorConfig {
    pub fn micro() -> Self {
        Self { base_channels: 8, image_resolution: 16 }
    }

    pub fn for_generator(gen: &GeneratorConfig, base_channels: usize) -> Self {
        Self { base_channels, image_resolution: gen.image_resolution }
    }

    pub fn logit_grid(&self) -> usize {
        self.image_resolution / 8 - DISCRIMINATOR_GRID_SHRINK
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_resolution == 0 || !self.image_resolution.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "discriminator image_resolution ({}) must be divisible by 8",
                self.image_resolution
            )));
        }
        if self.image_resolution < 16 {
            return Err(Error::Config("discriminator image_resolution must be at least 16".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("discriminator base_channels must be positive".into()));
        }
        Ok(())
    }
}
