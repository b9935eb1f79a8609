//! Introspectable layer descriptions. Descriptor lists are a pure function of the model
//! configuration; parameter allocation, accounting and LoRA injection all read them.

use serde::{Deserialize, Serialize};

use super::config::{DiscriminatorConfig, GeneratorConfig, TbSandwich, DOWNSAMPLING_STEPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    TransposeConv,
    Linear,
    Norm,
    AttentionProj,
}

/// Parameter groups used by freezing ablations and crucial-layer selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerGroup {
    /// Down/upsampling convolutions.
    SL,
    /// ResNet-block convolutions.
    RB,
    /// Transformer-block projections and feed-forward.
    TB,
    #[serde(rename = "other")]
    Other,
}

impl LayerGroup {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SL" => Some(Self::SL),
            "RB" => Some(Self::RB),
            "TB" => Some(Self::TB),
            "OTHER" => Some(Self::Other),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnRole {
    Query,
    Key,
    Value,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub layer_id: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: Option<(usize, usize)>,
    pub stride: usize,
    pub padding: usize,
    pub group: LayerGroup,
    /// Downsampling factor (relative to the input image) of the feature map this layer
    /// reads; `None` for layers applied once per sample to a vector.
    pub feature_div: Option<usize>,
    pub attention: Option<AttnRole>,
    /// Tokens appended to the image tokens as attention context (the text token).
    pub context_tokens: usize,
}

impl LayerDescriptor {
    fn base(id: String, kind: LayerKind, cin: usize, cout: usize, group: LayerGroup) -> Self {
        Self {
            layer_id: id,
            kind,
            in_channels: cin,
            out_channels: cout,
            kernel: None,
            stride: 1,
            padding: 0,
            group,
            feature_div: None,
            attention: None,
            context_tokens: 0,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(id: String, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, group: LayerGroup, div: usize) -> Self {
        Self {
            kernel: Some((k, k)),
            stride,
            padding: pad,
            feature_div: Some(div),
            ..Self::base(id, LayerKind::Conv, cin, cout, group)
        }
    }

    fn tconv(id: String, cin: usize, cout: usize, k: usize, group: LayerGroup, div: usize) -> Self {
        Self {
            kernel: Some((k, k)),
            stride: 2,
            padding: k / 2,
            feature_div: Some(div),
            ..Self::base(id, LayerKind::TransposeConv, cin, cout, group)
        }
    }

    fn norm(id: String, c: usize, div: Option<usize>) -> Self {
        Self { feature_div: div, ..Self::base(id, LayerKind::Norm, c, c, LayerGroup::Other) }
    }

    fn linear(id: String, cin: usize, cout: usize, group: LayerGroup, div: Option<usize>) -> Self {
        Self { feature_div: div, ..Self::base(id, LayerKind::Linear, cin, cout, group) }
    }

    /// Shapes of the layer's parameters, in storage order (`weight`, `bias`).
    ///
    /// Storage layouts: conv `[out, in, kh, kw]`, transposed conv `[in, out, kh, kw]`,
    /// linear `[out, in]`, norm `[c]`.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (i, o) = (self.in_channels, self.out_channels);
        match self.kind {
            LayerKind::Conv => {
                let (kh, kw) = self.kernel.unwrap_or((1, 1));
                vec![("weight", vec![o, i, kh, kw]), ("bias", vec![o])]
            }
            LayerKind::TransposeConv => {
                let (kh, kw) = self.kernel.unwrap_or((1, 1));
                vec![("weight", vec![i, o, kh, kw]), ("bias", vec![o])]
            }
            LayerKind::Linear | LayerKind::AttentionProj => vec![("weight", vec![o, i]), ("bias", vec![o])],
            LayerKind::Norm => vec![("weight", vec![i]), ("bias", vec![i])],
        }
    }

    /// The shape as listed in layer tables: `[in, out, kh, kw]` or `[out, in]` for linears.
    pub fn listed_shape(&self) -> Vec<usize> {
        match (self.kind, self.kernel) {
            (LayerKind::Conv | LayerKind::TransposeConv, Some((kh, kw))) => {
                vec![self.in_channels, self.out_channels, kh, kw]
            }
            _ => vec![self.out_channels, self.in_channels],
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    pub fn is_factorizable(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Conv | LayerKind::TransposeConv | LayerKind::Linear | LayerKind::AttentionProj
        )
    }
}

pub fn param_name(layer_id: &str, field: &str) -> String {
    format!("{layer_id}.{field}")
}

fn transformer_block(out: &mut Vec<LayerDescriptor>, cfg: &GeneratorConfig, t: usize) {
    let c = cfg.bottleneck_channels();
    let d = cfg.attention_dim;
    let div = cfg.bottleneck_div();
    let tb_div = div * 2;
    let ctx = usize::from(cfg.use_cross_attention);
    let id = |s: &str| format!("tb.{t}.{s}");
    if cfg.tb_sandwich == TbSandwich::ConvTranspose {
        out.push(LayerDescriptor::conv(id("down"), c, c, 3, 2, 1, LayerGroup::Other, div));
    }
    out.push(LayerDescriptor::norm(id("norm1"), d, Some(tb_div)));
    if cfg.use_cross_attention {
        out.push(LayerDescriptor::linear(id("text_proj"), cfg.text_embed_dim, d, LayerGroup::Other, None));
    }
    for (name, role) in [("q", AttnRole::Query), ("k", AttnRole::Key), ("v", AttnRole::Value)] {
        out.push(LayerDescriptor {
            feature_div: Some(tb_div),
            attention: Some(role),
            context_tokens: ctx,
            ..LayerDescriptor::base(id(name), LayerKind::AttentionProj, d, d, LayerGroup::TB)
        });
    }
    out.push(LayerDescriptor::norm(id("norm2"), d, Some(tb_div)));
    out.push(LayerDescriptor::linear(id("ff1"), d, 2 * cfg.ffn_inner, LayerGroup::TB, Some(tb_div)));
    out.push(LayerDescriptor::linear(id("ff2"), cfg.ffn_inner, d, LayerGroup::TB, Some(tb_div)));
    if cfg.tb_sandwich == TbSandwich::ConvTranspose {
        out.push(LayerDescriptor::tconv(id("up"), c, c, 3, LayerGroup::Other, tb_div));
    }
}

/// Channel widths along the downsampling stack: `[3, C, 2C, 4C, 4C]`.
fn stack_widths(cfg: &GeneratorConfig) -> Vec<usize> {
    let c = cfg.base_channels;
    vec![3, c, 2 * c, 4 * c, 4 * c]
}

/// Ordered generator layout. Order matches the forward pass.
pub fn generator_layout(cfg: &GeneratorConfig) -> Vec<LayerDescriptor> {
    let mut out = Vec::new();
    let widths = stack_widths(cfg);
    let c = cfg.bottleneck_channels();
    let div = cfg.bottleneck_div();

    // downsampling: one 7x7 stem then strided 3x3 convs
    for i in 0..=DOWNSAMPLING_STEPS {
        let (k, s, pad) = if i == 0 { (7, 1, 3) } else { (3, 2, 1) };
        let in_div = if i == 0 { 1 } else { 1 << (i - 1) };
        out.push(LayerDescriptor::conv(format!("down.{i}"), widths[i], widths[i + 1], k, s, pad, LayerGroup::SL, in_div));
        out.push(LayerDescriptor::norm(format!("down.{i}.norm"), widths[i + 1], Some(in_div * s)));
    }
    if cfg.noise_dim > 0 {
        out.push(LayerDescriptor::linear("noise_proj".into(), cfg.noise_dim, c, LayerGroup::Other, None));
    }
    for p in 0..=cfg.num_resnet_blocks {
        if p == cfg.tb_position.index() {
            for t in 0..cfg.num_transformer_blocks {
                transformer_block(&mut out, cfg, t);
            }
        }
        if p < cfg.num_resnet_blocks {
            for j in 1..=2 {
                out.push(LayerDescriptor::conv(format!("rb.{p}.conv{j}"), c, c, 3, 1, 1, LayerGroup::RB, div));
                out.push(LayerDescriptor::norm(format!("rb.{p}.norm{j}"), c, Some(div)));
            }
        }
    }
    // upsampling mirrors the downsampling stack
    for i in 0..DOWNSAMPLING_STEPS {
        let (cin, cout) = (widths[DOWNSAMPLING_STEPS + 1 - i], widths[DOWNSAMPLING_STEPS - i]);
        let in_div = div >> i;
        out.push(LayerDescriptor::tconv(format!("up.{i}"), cin, cout, 3, LayerGroup::SL, in_div));
        out.push(LayerDescriptor::norm(format!("up.{i}.norm"), cout, Some(in_div / 2)));
    }
    out.push(LayerDescriptor::conv(format!("up.{DOWNSAMPLING_STEPS}"), widths[1], 3, 7, 1, 3, LayerGroup::SL, 1));
    out
}

/// Four strided convolutions over the channel concatenation of source and candidate.
pub fn discriminator_layout(cfg: &DiscriminatorConfig) -> Vec<LayerDescriptor> {
    let c = cfg.base_channels;
    let widths = [6, c, 2 * c, 4 * c];
    let mut out = Vec::new();
    for i in 0..3 {
        out.push(LayerDescriptor::conv(format!("d.{i}"), widths[i], widths[i + 1], 4, 2, 1, LayerGroup::Other, 1 << i));
        if i > 0 {
            out.push(LayerDescriptor::norm(format!("d.{i}.norm"), widths[i + 1], Some(1 << (i + 1))));
        }
    }
    out.push(LayerDescriptor::conv("d.3".into(), 4 * c, 1, 4, 1, 1, LayerGroup::Other, 8));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn layer_ids_are_unique() {
        for cfg in [GeneratorConfig::default(), GeneratorConfig { num_transformer_blocks: 2, ..Default::default() }] {
            let layout = generator_layout(&cfg);
            let ids: HashSet<_> = layout.iter().map(|d| d.layer_id.clone()).collect();
            assert_eq!(ids.len(), layout.len());
        }
    }

    #[test]
    fn default_stem_is_listed_as_3_64_7_7() {
        let layout = generator_layout(&GeneratorConfig::default());
        assert_eq!(layout[0].listed_shape(), vec![3, 64, 7, 7]);
        let last = layout.last().unwrap();
        assert_eq!(last.listed_shape(), vec![64, 3, 7, 7]);
    }

    #[test]
    fn tb_position_moves_the_block() {
        let pos = |p| {
            let cfg = GeneratorConfig { tb_position: p, ..GeneratorConfig::micro() };
            generator_layout(&cfg).iter().position(|d| d.layer_id == "tb.0.q").unwrap()
        };
        use crate::model::TbPosition::*;
        assert!(pos(BeforeRb1) < pos(AfterRb1));
        assert!(pos(AfterRb1) < pos(AfterRb2));
        assert!(pos(AfterRb2) < pos(AfterRb3));
    }
}
