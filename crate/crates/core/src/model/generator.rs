use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{GeneratorConfig, TbSandwich, DOWNSAMPLING_STEPS};
use super::layers::{generator_layout, param_name, LayerDescriptor, LayerKind};
use super::params::ParamStore;
use crate::autograd::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::lora::{lora_a_name, lora_b_name};
use crate::tensor::{Scalar, Tensor};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Applies parameterized layers by id, adding low-rank deltas where factors are present.
pub(crate) struct LayerApplier<'g, 'a, T: Scalar> {
    pub g: &'g mut Graph<'a, T>,
    pub layout: &'a BTreeMap<String, LayerDescriptor>,
    pub params: &'a ParamStore<T>,
    pub lora: Option<&'a ParamStore<T>>,
}

impl<'g, 'a, T: Scalar> LayerApplier<'g, 'a, T> {
    fn desc(&self, id: &str) -> Result<&'a LayerDescriptor> {
        self.layout
            .get(id)
            .ok_or_else(|| Error::Config(format!("layer {id} is not part of this model")))
    }

    fn weight_bias(&mut self, id: &str) -> Result<(Var, Var)> {
        let w = self.params.get(&param_name(id, "weight"))?;
        let b = self.params.get(&param_name(id, "bias"))?;
        Ok((self.g.param(&param_name(id, "weight"), w), self.g.param(&param_name(id, "bias"), b)))
    }

    fn factors(&mut self, id: &str) -> Result<Option<(Var, Var)>> {
        let Some(lora) = self.lora else { return Ok(None) };
        let (an, bn) = (lora_a_name(id), lora_b_name(id));
        if !lora.contains(&an) {
            return Ok(None);
        }
        let a = self.g.param(&an, lora.get(&an)?);
        let b = self.g.param(&bn, lora.get(&bn)?);
        Ok(Some((a, b)))
    }

    fn geom(d: &LayerDescriptor) -> ConvGeom {
        let out_pad = if d.kind == LayerKind::TransposeConv { d.stride - 1 } else { 0 };
        ConvGeom { stride: d.stride, pad: d.padding, out_pad }
    }

    /// Conv or transposed conv, plus `1x1(B) ∘ kxk(A)` when factors are attached.
    pub fn conv(&mut self, id: &str, x: Var) -> Result<Var> {
        let d = self.desc(id)?;
        let geom = Self::geom(d);
        let (w, b) = self.weight_bias(id)?;
        let transpose = d.kind == LayerKind::TransposeConv;
        let y = if transpose {
            self.g.conv_transpose2d(x, w, Some(b), geom)?
        } else {
            self.g.conv2d(x, w, Some(b), geom)?
        };
        let Some((a, bf)) = self.factors(id)? else { return Ok(y) };
        // A is stored [in, r, kh, kw]; B is stored [r, out, 1, 1].
        let low = if transpose {
            self.g.conv_transpose2d(x, a, None, geom)?
        } else {
            let a_conv = self.g.swap01(a);
            self.g.conv2d(x, a_conv, None, geom)?
        };
        let b_conv = self.g.swap01(bf);
        let delta = self.g.conv2d(low, b_conv, None, ConvGeom::new(1, 0))?;
        self.g.add(y, delta)
    }

    /// Linear over the last axis, plus `B A x` when factors are attached.
    pub fn linear(&mut self, id: &str, x: Var) -> Result<Var> {
        let (w, b) = self.weight_bias(id)?;
        let y = self.g.linear(x, w, Some(b))?;
        let Some((a, bf)) = self.factors(id)? else { return Ok(y) };
        let low = self.g.linear(x, a, None)?;
        let delta = self.g.linear(low, bf, None)?;
        self.g.add(y, delta)
    }

    pub fn instance_norm(&mut self, id: &str, x: Var) -> Result<Var> {
        let (w, b) = self.weight_bias(id)?;
        self.g.instance_norm(x, w, b, NORM_EPS)
    }

    pub fn layer_norm(&mut self, id: &str, x: Var) -> Result<Var> {
        let (w, b) = self.weight_bias(id)?;
        self.g.layer_norm(x, w, b, NORM_EPS)
    }
}

/// One step of the generator's forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Downsampling conv, norm and ReLU at the given depth.
    Down(usize),
    /// Projected noise added per channel.
    Noise,
    Resnet(usize),
    Transformer(usize),
    /// Upsampling transposed conv, norm and ReLU.
    Up(usize),
    /// Final conv and tanh.
    Output,
}

impl Stage {
    pub fn name(&self) -> String {
        match self {
            Stage::Down(i) => format!("down.{i}"),
            Stage::Noise => "noise_proj".into(),
            Stage::Resnet(p) => format!("rb.{p}"),
            Stage::Transformer(t) => format!("tb.{t}"),
            Stage::Up(i) => format!("up.{i}"),
            Stage::Output => format!("up.{DOWNSAMPLING_STEPS}"),
        }
    }

    pub fn owns(&self, layer_id: &str) -> bool {
        let name = self.name();
        layer_id == name || layer_id.strip_prefix(&name).is_some_and(|rest| rest.starts_with('.'))
    }
}

/// The image-to-image generator: downsampling stack, ResNet blocks with transformer
/// block(s) at the configured position, upsampling stack, tanh.
#[derive(Clone, Debug)]
pub struct Generator<T: Scalar = f32> {
    config: GeneratorConfig,
    layout: Vec<LayerDescriptor>,
    by_id: BTreeMap<String, LayerDescriptor>,
    params: ParamStore<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn build(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = generator_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParamStore::init_from_layout(&layout, &mut rng);
        Ok(Self::assemble(config, layout, params))
    }

    /// Wraps existing parameters, checking them against the configuration's layout.
    pub fn from_params(config: GeneratorConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let layout = generator_layout(&config);
        params.check_layout(&layout)?;
        Ok(Self::assemble(config, layout, params))
    }

    fn assemble(config: GeneratorConfig, layout: Vec<LayerDescriptor>, params: ParamStore<T>) -> Self {
        let by_id = layout.iter().map(|d| (d.layer_id.clone(), d.clone())).collect();
        Self { config, layout, by_id, params }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn describe_layers(&self) -> &[LayerDescriptor] {
        &self.layout
    }

    pub fn layer(&self, id: &str) -> Option<&LayerDescriptor> {
        self.by_id.get(id)
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn cast<U: Scalar>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            layout: self.layout.clone(),
            by_id: self.by_id.clone(),
            params: self.params.cast(),
        }
    }

    fn check_inputs(&self, x: &[usize], z: &[usize], c: &[usize]) -> Result<()> {
        let r = self.config.image_resolution;
        let shape = |ctx: &str, e: Vec<usize>, a: &[usize]| Error::Shape {
            context: ctx.into(),
            expected: format!("{e:?}"),
            actual: format!("{a:?}"),
        };
        if x.len() != 4 || x[1..] != [3, r, r] {
            let b = x.first().copied().unwrap_or(1);
            return Err(shape("generator input image", vec![b, 3, r, r], x));
        }
        let b = x[0];
        if z != [b, self.config.noise_dim] {
            return Err(shape("generator noise", vec![b, self.config.noise_dim], z));
        }
        if c != [b, self.config.text_embed_dim] {
            return Err(shape("generator text embedding", vec![b, self.config.text_embed_dim], c));
        }
        Ok(())
    }

    /// Records the forward pass on `g`. `lora` holds optional low-rank factors keyed by
    /// layer id. `x: [B,3,R,R]`, `z: [B,noise_dim]`, `c: [B,text_embed_dim]`.
    pub fn forward_graph<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        lora: Option<&'a ParamStore<T>>,
        x: Var,
        z: Var,
        c: Var,
    ) -> Result<Var> {
        self.check_inputs(g.shape(x), g.shape(z), g.shape(c))?;
        let stages = self.stages();
        self.run_stages(g, lora, &stages, x, z, c)
    }

    /// The forward pass as an ordered list of stages; each stage consumes the feature map
    /// produced by the previous one. Layer ids belong to the stage whose name they extend.
    pub fn stages(&self) -> Vec<Stage> {
        let cfg = &self.config;
        let mut out: Vec<Stage> = (0..=DOWNSAMPLING_STEPS).map(Stage::Down).collect();
        if cfg.noise_dim > 0 {
            out.push(Stage::Noise);
        }
        for p in 0..=cfg.num_resnet_blocks {
            if p == cfg.tb_position.index() {
                out.extend((0..cfg.num_transformer_blocks).map(Stage::Transformer));
            }
            if p < cfg.num_resnet_blocks {
                out.push(Stage::Resnet(p));
            }
        }
        out.extend((0..DOWNSAMPLING_STEPS).map(Stage::Up));
        out.push(Stage::Output);
        out
    }

    /// Index into [`Generator::stages`] of the stage that applies `layer_id`.
    pub fn stage_of(&self, layer_id: &str) -> Option<usize> {
        self.stages().iter().position(|s| s.owns(layer_id))
    }

    fn run_stages<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        lora: Option<&'a ParamStore<T>>,
        stages: &[Stage],
        mut h: Var,
        z: Var,
        c: Var,
    ) -> Result<Var> {
        let cfg = &self.config;
        let batch = g.shape(c)[0];
        let mut ap = LayerApplier { g, layout: &self.by_id, params: &self.params, lora };
        let text = ap.g.reshape(c, &[batch, 1, cfg.text_embed_dim])?;
        for stage in stages {
            h = match *stage {
                Stage::Down(i) => {
                    let y = ap.conv(&format!("down.{i}"), h)?;
                    let y = ap.instance_norm(&format!("down.{i}.norm"), y)?;
                    ap.g.relu(y)
                }
                Stage::Noise => {
                    let nz = ap.linear("noise_proj", z)?;
                    ap.g.add_channel(h, nz)?
                }
                Stage::Resnet(p) => {
                    let mut r = ap.conv(&format!("rb.{p}.conv1"), h)?;
                    r = ap.instance_norm(&format!("rb.{p}.norm1"), r)?;
                    r = ap.g.relu(r);
                    r = ap.conv(&format!("rb.{p}.conv2"), r)?;
                    r = ap.instance_norm(&format!("rb.{p}.norm2"), r)?;
                    ap.g.add(h, r)?
                }
                Stage::Transformer(t) => transformer_block(&mut ap, cfg, t, h, text)?,
                Stage::Up(i) => {
                    let y = ap.conv(&format!("up.{i}"), h)?;
                    let y = ap.instance_norm(&format!("up.{i}.norm"), y)?;
                    ap.g.relu(y)
                }
                Stage::Output => {
                    let y = ap.conv(&format!("up.{DOWNSAMPLING_STEPS}"), h)?;
                    ap.g.tanh(y)
                }
            };
        }
        Ok(h)
    }

    /// Inference values entering every stage (the first is `x` itself), followed by the
    /// final output.
    pub fn stage_inputs(
        &self,
        lora: Option<&ParamStore<T>>,
        x: &Tensor<T>,
        z: &Tensor<T>,
        c: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>> {
        self.check_inputs(x.shape(), z.shape(), c.shape())?;
        let mut g = Graph::inference();
        let (zv, cv) = (g.input_ref(z), g.input_ref(c));
        let mut h = g.input_ref(x);
        let mut out = vec![x.clone()];
        for stage in self.stages() {
            h = self.run_stages(&mut g, lora, std::slice::from_ref(&stage), h, zv, cv)?;
            out.push(g.value(h).clone());
        }
        Ok(out)
    }

    /// Runs the stages from index `start` on `h`, the value entering that stage.
    pub fn forward_from(
        &self,
        lora: Option<&ParamStore<T>>,
        start: usize,
        h: &Tensor<T>,
        z: &Tensor<T>,
        c: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let stages = self.stages();
        if start > stages.len() {
            return Err(Error::Config(format!("stage {start} out of range (generator has {})", stages.len())));
        }
        let mut g = Graph::inference();
        let (hv, zv, cv) = (g.input_ref(h), g.input_ref(z), g.input_ref(c));
        let y = self.run_stages(&mut g, lora, &stages[start..], hv, zv, cv)?;
        Ok(g.value(y).clone())
    }

    /// Inference forward with optional low-rank factors.
    pub fn forward_with(&self, lora: Option<&ParamStore<T>>, x: &Tensor<T>, z: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let (xv, zv, cv) = (g.input_ref(x), g.input_ref(z), g.input_ref(c));
        let y = self.forward_graph(&mut g, lora, xv, zv, cv)?;
        Ok(g.value(y).clone())
    }

    pub fn forward(&self, x: &Tensor<T>, z: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with(None, x, z, c)
    }
}

fn transformer_block<T: Scalar>(
    ap: &mut LayerApplier<'_, '_, T>,
    cfg: &GeneratorConfig,
    t: usize,
    h: Var,
    text: Var,
) -> Result<Var> {
    let id = |s: &str| format!("tb.{t}.{s}");
    let (small, pooled) = match cfg.tb_sandwich {
        TbSandwich::ConvTranspose => (ap.conv(&id("down"), h)?, None),
        TbSandwich::PoolUnpool => {
            let p = ap.g.max_pool2(h)?;
            (p, Some(p))
        }
    };
    let (hs, ws) = (ap.g.shape(small)[2], ap.g.shape(small)[3]);
    let mut tok = ap.g.to_tokens(small)?;

    let a = ap.layer_norm(&id("norm1"), tok)?;
    let q = ap.linear(&id("q"), a)?;
    let context = if cfg.use_cross_attention {
        let text_tok = ap.linear(&id("text_proj"), text)?;
        ap.g.concat1(&[a, text_tok])?
    } else {
        a
    };
    let k = ap.linear(&id("k"), context)?;
    let v = ap.linear(&id("v"), context)?;
    let scores = ap.g.bmm(q, k, true)?;
    let scores = ap.g.scale(scores, 1.0 / (cfg.attention_dim as f64).sqrt());
    let probs = ap.g.softmax(scores);
    let attended = ap.g.bmm(probs, v, false)?;
    tok = ap.g.add(tok, attended)?;

    let f = ap.layer_norm(&id("norm2"), tok)?;
    let u = ap.linear(&id("ff1"), f)?;
    let value = ap.g.slice_last(u, 0, cfg.ffn_inner)?;
    let gate = ap.g.slice_last(u, cfg.ffn_inner, cfg.ffn_inner)?;
    let gate = ap.g.gelu(gate);
    let hidden = ap.g.mul(value, gate)?;
    let ff = ap.linear(&id("ff2"), hidden)?;
    tok = ap.g.add(tok, ff)?;

    let m = ap.g.from_tokens(tok, hs, ws)?;
    let restored = match pooled {
        None => ap.conv(&id("up"), m)?,
        Some(p) => ap.g.max_unpool2(m, p)?,
    };
    ap.g.add(h, restored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerGroup;
    use rand::SeedableRng;

    fn inputs(cfg: &GeneratorConfig, batch: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = cfg.image_resolution;
        (
            Tensor::randn(&[batch, 3, r, r], 0.5, &mut rng),
            Tensor::randn(&[batch, cfg.noise_dim], 1.0, &mut rng),
            Tensor::randn(&[batch, cfg.text_embed_dim], 1.0, &mut rng),
        )
    }

    #[test]
    fn default_layout_matches_listed_shapes() {
        let gen = Generator::<f32>::build(GeneratorConfig::default(), 0).unwrap();
        let layers = gen.describe_layers();
        let sl: Vec<_> = layers.iter().filter(|d| d.group == LayerGroup::SL).collect();
        assert_eq!(sl.len(), 8);
        let listed: Vec<_> = sl.iter().map(|d| d.listed_shape()).collect();
        assert_eq!(listed[..4], [vec![3, 64, 7, 7], vec![64, 128, 3, 3], vec![128, 256, 3, 3], vec![256, 256, 3, 3]]);
        assert_eq!(listed[4..], [vec![256, 256, 3, 3], vec![256, 128, 3, 3], vec![128, 64, 3, 3], vec![64, 3, 7, 7]]);
        assert_eq!(sl[1].stride, 2);
        for id in ["tb.0.q", "tb.0.k", "tb.0.v"] {
            assert_eq!(gen.layer(id).unwrap().listed_shape(), vec![256, 256]);
        }
        assert_eq!(gen.layer("tb.0.ff1").unwrap().listed_shape(), vec![2048, 256]);
        assert_eq!(gen.layer("tb.0.ff2").unwrap().listed_shape(), vec![256, 1024]);
        let rb_convs = layers.iter().filter(|d| d.group == LayerGroup::RB && d.kind == LayerKind::Conv).count();
        assert_eq!(rb_convs, 6);
    }

    #[test]
    fn no_transformer_blocks_means_no_tb_layers() {
        let cfg = GeneratorConfig { num_transformer_blocks: 0, ..GeneratorConfig::micro() };
        let gen = Generator::<f32>::build(cfg, 0).unwrap();
        assert!(gen.describe_layers().iter().all(|d| d.group != LayerGroup::TB));
    }

    #[test]
    fn builds_are_deterministic() {
        let a = Generator::<f32>::build(GeneratorConfig::micro(), 7).unwrap();
        let b = Generator::<f32>::build(GeneratorConfig::micro(), 7).unwrap();
        let c = Generator::<f32>::build(GeneratorConfig::micro(), 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params().checksum(), c.params().checksum());
    }

    #[test]
    fn forward_preserves_shape_and_range() {
        let cfg = GeneratorConfig { image_resolution: 32, ..GeneratorConfig::micro() };
        let gen = Generator::<f32>::build(cfg.clone(), 1).unwrap();
        let (x, z, c) = inputs(&cfg, 2, 2);
        let y = gen.forward(&x, &z, &c).unwrap();
        assert_eq!(y.shape(), &[2, 3, 32, 32]);
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(gen.forward(&x, &z, &c).unwrap().data(), y.data());
    }

    #[test]
    fn shape_errors_report_expected_and_actual() {
        let cfg = GeneratorConfig::micro();
        let gen = Generator::<f32>::build(cfg.clone(), 1).unwrap();
        let (_, z, c) = inputs(&cfg, 1, 2);
        let bad = Tensor::zeros(&[1, 3, 8, 8]);
        let msg = gen.forward(&bad, &z, &c).unwrap_err().to_string();
        assert!(msg.contains("[1, 3, 16, 16]") && msg.contains("[1, 3, 8, 8]"), "{msg}");
    }

    #[test]
    fn text_is_ignored_without_cross_attention() {
        let cfg = GeneratorConfig { use_cross_attention: false, ..GeneratorConfig::micro() };
        let gen = Generator::<f32>::build(cfg.clone(), 3).unwrap();
        let (x, z, c1) = inputs(&cfg, 2, 4);
        let (_, _, c2) = inputs(&cfg, 2, 5);
        assert_eq!(gen.forward(&x, &z, &c1).unwrap(), gen.forward(&x, &z, &c2).unwrap());

        let cfg = GeneratorConfig::micro();
        let gen = Generator::<f32>::build(cfg, 3).unwrap();
        assert_ne!(gen.forward(&x, &z, &c1).unwrap(), gen.forward(&x, &z, &c2).unwrap());
    }

    #[test]
    fn distinct_noise_gives_distinct_outputs() {
        let cfg = GeneratorConfig::micro();
        let gen = Generator::<f32>::build(cfg.clone(), 3).unwrap();
        let (x, z1, c) = inputs(&cfg, 1, 6);
        let (_, z2, _) = inputs(&cfg, 1, 7);
        assert_ne!(gen.forward(&x, &z1, &c).unwrap(), gen.forward(&x, &z2, &c).unwrap());
    }

    #[test]
    fn pool_unpool_sandwich_runs_without_sandwich_convs() {
        let cfg = GeneratorConfig { tb_sandwich: TbSandwich::PoolUnpool, ..GeneratorConfig::micro() };
        let gen = Generator::<f32>::build(cfg.clone(), 3).unwrap();
        assert!(gen.layer("tb.0.down").is_none());
        let (x, z, c) = inputs(&cfg, 1, 8);
        assert_eq!(gen.forward(&x, &z, &c).unwrap().shape(), x.shape());
    }

    #[test]
    fn every_tb_position_and_count_runs() {
        use crate::model::TbPosition::*;
        for pos in [BeforeRb1, AfterRb1, AfterRb2, AfterRb3] {
            for n in 0..=2 {
                let cfg = GeneratorConfig { tb_position: pos, num_transformer_blocks: n, ..GeneratorConfig::micro() };
                let gen = Generator::<f32>::build(cfg.clone(), 1).unwrap();
                let (x, z, c) = inputs(&cfg, 1, 9);
                assert_eq!(gen.forward(&x, &z, &c).unwrap().shape(), x.shape());
            }
        }
    }

    #[test]
    fn staged_evaluation_matches_the_full_pass() {
        let cfg = GeneratorConfig::micro();
        let gen = Generator::<f64>::build(cfg.clone(), 2).unwrap();
        let (x, z, c) = inputs(&cfg, 2, 10);
        let (x, z, c) = (x.cast::<f64>(), z.cast::<f64>(), c.cast::<f64>());
        let full = gen.forward(&x, &z, &c).unwrap();
        let inputs = gen.stage_inputs(None, &x, &z, &c).unwrap();
        assert_eq!(inputs.len(), gen.stages().len() + 1);
        assert_eq!(inputs.last().unwrap(), &full);
        for (k, input) in inputs.iter().take(gen.stages().len()).enumerate() {
            assert_eq!(gen.forward_from(None, k, input, &z, &c).unwrap(), full, "stage {k}");
        }
        for d in gen.describe_layers() {
            assert!(gen.stage_of(&d.layer_id).is_some(), "{} has no stage", d.layer_id);
        }
        assert_eq!(gen.stage_of("up.3"), Some(gen.stages().len() - 1));
        assert_eq!(gen.stage_of("rb.1.norm2").map(|i| gen.stages()[i]), Some(Stage::Resnet(1)));
    }
}
