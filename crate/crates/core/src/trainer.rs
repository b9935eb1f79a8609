//! Conditional GAN training: L1 reconstruction plus an adversarial term, with alternating
//! discriminator and generator updates.
//!
//! The same loop serves base-model training on several concepts, LoRA fine-tuning, group
//! freezing ablations and autoencoder pretraining; they differ only in which parameters
//! are trainable and whether a discriminator takes part.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{GradMode, Graph, Var};
use crate::dataio::{Checkpoint, ConceptRecord};
use crate::error::{Error, Result};
use crate::lora::{inject_lora, AdaptedGenerator, RankSpec};
use crate::model::{
    param_name, sample_noise, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, LayerGroup, ParamStore,
};
use crate::rank_search::RankTrial;
use crate::selection::Embedder;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_LR: f64 = 2e-4;
pub const DEFAULT_BETAS: (f64, f64) = (0.5, 0.999);
pub const DEFAULT_LAMBDA_L1: f64 = 100.0;
pub const DEFAULT_EPOCHS: usize = 100;
const ADAM_EPS: f64 = 1e-8;

// Stream offsets so that shuffling, noise and initialization never share a generator.
const SHUFFLE_STREAM: u64 = 0x5348_5546;
const NOISE_STREAM: u64 = 0x4e4f_4953;
const DISC_STREAM: u64 = 0x4449_5343;
const LORA_STREAM: u64 = 0x4c4f_5241;
const EVAL_STREAM: u64 = 0x4556_414c;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanMode {
    #[default]
    BceLogits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_l1: f64,
    pub gan_mode: GanMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_l1: DEFAULT_LAMBDA_L1, gan_mode: GanMode::BceLogits }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l1 >= 0.0 && self.lambda_l1.is_finite()) {
            return Err(Error::Config(format!("lambda_l1 must be finite and >= 0, got {}", self.lambda_l1)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Base,
    Finetune,
    Autoencoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub freeze_groups: BTreeSet<LayerGroup>,
    pub disable_cross_attention: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            adam_betas: DEFAULT_BETAS,
            epochs: DEFAULT_EPOCHS,
            batch_size: 1,
            seed: 0,
            mode: TrainMode::Base,
            freeze_groups: BTreeSet::new(),
            disable_cross_attention: false,
        }
    }
}

impl TrainConfig {
    /// `allow_zero_epochs` permits a no-op run (used to export an identity delta).
    pub fn validate(&self, allow_zero_epochs: bool) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!("adam betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        if self.epochs == 0 && !allow_zero_epochs {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------------------
// Loss terms

/// Numerically stable `log(sigmoid(x))`.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Mean absolute difference.
pub fn l1_term<T: Scalar>(generated: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if generated.shape() != target.shape() {
        return Err(Error::Shape {
            context: "l1_term".into(),
            expected: format!("{:?}", target.shape()),
            actual: format!("{:?}", generated.shape()),
        });
    }
    let sum: f64 = generated.data().iter().zip(target.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).sum();
    Ok(sum / generated.len().max(1) as f64)
}

/// `-mean log σ(real) - mean log(1 - σ(fake))`.
pub fn gan_loss_discriminator<T: Scalar>(real_logits: &Tensor<T>, fake_logits: &Tensor<T>) -> f64 {
    let r: f64 = real_logits.data().iter().map(|v| log_sigmoid(v.as_f64())).sum::<f64>() / real_logits.len() as f64;
    let f: f64 = fake_logits.data().iter().map(|v| log_sigmoid(-v.as_f64())).sum::<f64>() / fake_logits.len() as f64;
    -r - f
}

/// Non-saturating generator loss `-mean log σ(fake)`.
pub fn gan_loss_generator<T: Scalar>(fake_logits: &Tensor<T>) -> f64 {
    -fake_logits.data().iter().map(|v| log_sigmoid(v.as_f64())).sum::<f64>() / fake_logits.len() as f64
}

fn l1_graph<T: Scalar>(g: &mut Graph<'_, T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

fn mean_log_sigmoid<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, negate: bool) -> Var {
    let x = if negate { g.scale(logits, -1.0) } else { logits };
    let l = g.log_sigmoid(x);
    g.mean(l)
}

/// The value of the conditional objective `λ·L1 + mean log D(x, y) + mean log(1 - D(x, G))`
/// recorded on `g` (the quantity the discriminator maximizes and the generator minimizes).
pub fn objective_graph<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    gen: &'a Generator<T>,
    lora: Option<&'a ParamStore<T>>,
    disc: &'a Discriminator<T>,
    batch: &'a Batch<T>,
    z: &'a Tensor<T>,
    lambda_l1: f64,
) -> Result<Var> {
    let (x, y, c, zv) = (g.input_ref(&batch.x), g.input_ref(&batch.target), g.input_ref(&batch.c), g.input_ref(z));
    let fake = gen.forward_graph(g, lora, x, zv, c)?;
    let l1 = l1_graph(g, y, fake)?;
    let real_logits = disc.forward_graph(g, x, y)?;
    let fake_logits = disc.forward_graph(g, x, fake)?;
    let real_term = mean_log_sigmoid(g, real_logits, false);
    let fake_term = mean_log_sigmoid(g, fake_logits, true);
    let weighted = g.scale(l1, lambda_l1);
    let adv = g.add(real_term, fake_term)?;
    g.add(weighted, adv)
}

// ---------------------------------------------------------------------------------------
// Optimizer

/// Adam with bias correction; moments are kept per parameter name.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    t: i32,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, betas: (f64, f64)) -> Self {
        Self { lr, beta1: betas.0, beta2: betas.1, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn reset(&mut self) {
        self.t = 0;
        self.m.clear();
        self.v.clear();
    }

    /// Advances the step counter; call once per optimizer step before `update`.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    /// Applies the update to every gradient whose name is in `store`; returns the squared
    /// norm of the applied change.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> f64 {
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t.max(1));
        let c2 = 1.0 - b2.powi(self.t.max(1));
        let mut moved = 0.0;
        for (name, grad) in grads {
            let Ok(p) = store.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape()));
            for (((pi, gi), mi), vi) in
                p.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut())
            {
                let gf = gi.as_f64();
                let mf = b1 * mi.as_f64() + (1.0 - b1) * gf;
                let vf = b2 * vi.as_f64() + (1.0 - b2) * gf * gf;
                *mi = T::from_f64_lossy(mf);
                *vi = T::from_f64_lossy(vf);
                let step = self.lr * (mf / c1) / ((vf / c2).sqrt() + ADAM_EPS);
                let old = *pi;
                *pi = T::from_f64_lossy(old.as_f64() - step);
                let d = pi.as_f64() - old.as_f64();
                moved += d * d;
            }
        }
        moved
    }
}

// ---------------------------------------------------------------------------------------
// Models under training

/// A generator as trained: dense, or a frozen base with adapters.
#[derive(Clone, Debug)]
pub enum GenModel<T: Scalar = f32> {
    Dense(Generator<T>),
    Adapted(AdaptedGenerator<T>),
}

impl<T: Scalar> GenModel<T> {
    pub fn base(&self) -> &Generator<T> {
        match self {
            GenModel::Dense(g) => g,
            GenModel::Adapted(a) => a.base(),
        }
    }

    pub fn lora(&self) -> Option<&ParamStore<T>> {
        match self {
            GenModel::Dense(_) => None,
            GenModel::Adapted(a) => Some(a.factors()),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, z: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
        self.base().forward_with(self.lora(), x, z, c)
    }

    fn trainable_store(&mut self) -> &mut ParamStore<T> {
        match self {
            GenModel::Dense(g) => g.params_mut(),
            GenModel::Adapted(a) => a.factors_mut(),
        }
    }
}

/// Parameter names of the generator outside the given groups.
pub fn unfrozen_names<T: Scalar>(gen: &Generator<T>, frozen: &BTreeSet<LayerGroup>) -> BTreeSet<String> {
    gen.describe_layers()
        .iter()
        .filter(|d| !frozen.contains(&d.group))
        .flat_map(|d| d.param_shapes().into_iter().map(|(f, _)| param_name(&d.layer_id, f)))
        .collect()
}

/// One training batch: sources, targets and per-sample text embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T: Scalar = f32> {
    pub x: Tensor<T>,
    pub target: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn size(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn cast<U: Scalar>(&self) -> Batch<U> {
        Batch { x: self.x.cast(), target: self.target.cast(), c: self.c.cast() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub d_loss: Option<f64>,
    pub g_gan: Option<f64>,
    pub g_l1: f64,
    pub g_total: f64,
    pub grad_norm_g: f64,
    pub grad_norm_d: Option<f64>,
    /// Euclidean norm of the change applied to generator-side trainables.
    pub update_norm_g: f64,
}

fn grad_norm<T: Scalar>(grads: &BTreeMap<String, Tensor<T>>) -> f64 {
    grads.values().map(Tensor::sum_sq).sum::<f64>().sqrt()
}

/// Discriminator loss and gradients on a detached generator output.
pub fn discriminator_grads<T: Scalar>(
    disc: &Discriminator<T>,
    batch: &Batch<T>,
    fake: &Tensor<T>,
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    let mut g = Graph::new(GradMode::All);
    let (x, y, f) = (g.input_ref(&batch.x), g.input_ref(&batch.target), g.input_ref(fake));
    let real_logits = disc.forward_graph(&mut g, x, y)?;
    let fake_logits = disc.forward_graph(&mut g, x, f)?;
    let r = mean_log_sigmoid(&mut g, real_logits, false);
    let fk = mean_log_sigmoid(&mut g, fake_logits, true);
    let sum = g.add(r, fk)?;
    let loss = g.scale(sum, -1.0);
    let value = g.value(loss).data()[0].as_f64();
    Ok((value, g.backward(loss)?.into_params()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenLoss {
    pub gan: Option<f64>,
    pub l1: f64,
    pub total: f64,
}

/// Generator loss `gan + λ·L1` (or `λ·L1` alone without a discriminator) and gradients
/// for the `trainable` parameter names.
#[allow(clippy::too_many_arguments)]
pub fn generator_grads<T: Scalar>(
    gen: &Generator<T>,
    lora: Option<&ParamStore<T>>,
    disc: Option<&Discriminator<T>>,
    trainable: &BTreeSet<String>,
    batch: &Batch<T>,
    z: &Tensor<T>,
    lambda_l1: f64,
) -> Result<(GenLoss, BTreeMap<String, Tensor<T>>)> {
    let mut g = Graph::new(GradMode::Only(trainable.clone()));
    let (x, y, c, zv) = (g.input_ref(&batch.x), g.input_ref(&batch.target), g.input_ref(&batch.c), g.input_ref(z));
    let fake = gen.forward_graph(&mut g, lora, x, zv, c)?;
    let l1 = l1_graph(&mut g, fake, y)?;
    let weighted = g.scale(l1, lambda_l1);
    let (loss, gan) = match disc {
        Some(d) => {
            let logits = d.forward_graph(&mut g, x, fake)?;
            let t = mean_log_sigmoid(&mut g, logits, false);
            let gan = g.scale(t, -1.0);
            (g.add(gan, weighted)?, Some(gan))
        }
        None => (weighted, None),
    };
    let parts = GenLoss {
        gan: gan.map(|v| g.value(v).data()[0].as_f64()),
        l1: g.value(l1).data()[0].as_f64(),
        total: g.value(loss).data()[0].as_f64(),
    };
    let grads = if trainable.is_empty() { BTreeMap::new() } else { g.backward(loss)?.into_params() };
    Ok((parts, grads))
}

/// Mutable training state: models, trainable set and optimizers.
#[derive(Clone, Debug)]
pub struct TrainState<T: Scalar = f32> {
    pub model: GenModel<T>,
    pub disc: Option<Discriminator<T>>,
    pub loss: LossConfig,
    trainable: BTreeSet<String>,
    opt_g: Adam<T>,
    opt_d: Adam<T>,
    noise_rng: ChaCha8Rng,
    steps: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(
        model: GenModel<T>,
        disc: Option<Discriminator<T>>,
        trainable: BTreeSet<String>,
        train: &TrainConfig,
        loss: LossConfig,
    ) -> Result<Self> {
        loss.validate()?;
        let known: BTreeSet<&String> = match &model {
            GenModel::Dense(g) => g.params().names().collect(),
            GenModel::Adapted(a) => a.factors().names().collect(),
        };
        if let Some(bad) = trainable.iter().find(|n| !known.contains(n)) {
            return Err(Error::Config(format!("trainable parameter {bad} does not exist in the model")));
        }
        Ok(Self {
            model,
            disc,
            loss,
            trainable,
            opt_g: Adam::new(train.lr, train.adam_betas),
            opt_d: Adam::new(train.lr, train.adam_betas),
            noise_rng: ChaCha8Rng::seed_from_u64(train.seed ^ NOISE_STREAM),
            steps: 0,
        })
    }

    pub fn trainable(&self) -> &BTreeSet<String> {
        &self.trainable
    }

    pub fn trainable_param_count(&self) -> usize {
        let store = match &self.model {
            GenModel::Dense(g) => g.params(),
            GenModel::Adapted(a) => a.factors(),
        };
        store.iter().filter(|(k, _)| self.trainable.contains(*k)).map(|(_, t)| t.len()).sum()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn reset_optimizers(&mut self) {
        self.opt_g.reset();
        self.opt_d.reset();
    }

    /// Raises adapter ranks in place, makes the new factors trainable and resets the
    /// optimizers.
    pub fn grow_ranks(&mut self, ranks: &BTreeMap<String, usize>, rng: &mut ChaCha8Rng) -> Result<()> {
        let GenModel::Adapted(a) = &mut self.model else {
            return Err(Error::Config("rank growth needs an adapted generator".into()));
        };
        a.grow_ranks(ranks, rng)?;
        self.trainable = a.trainable_names().into_iter().collect();
        self.reset_optimizers();
        Ok(())
    }

    /// One discriminator update followed by one generator update.
    pub fn training_step(&mut self, batch: &Batch<T>) -> Result<StepReport> {
        let step = self.steps;
        let noise_dim = self.model.base().config().noise_dim;
        let z: Tensor<T> = sample_noise(batch.size(), noise_dim, &mut self.noise_rng);

        let mut report = StepReport { step, ..Default::default() };
        if let Some(disc) = self.disc.as_mut() {
            let fake = self.model.forward(&batch.x, &z, &batch.c)?;
            let (d_loss, grads) = discriminator_grads(disc, batch, &fake)?;
            if !d_loss.is_finite() {
                return Err(Error::NonFinite { step, snapshot: format!("discriminator loss {d_loss}") });
            }
            self.opt_d.tick();
            self.opt_d.update(disc.params_mut(), &grads);
            report.d_loss = Some(d_loss);
            report.grad_norm_d = Some(grad_norm(&grads));
        }

        let (parts, grads) = generator_grads(
            self.model.base(),
            self.model.lora(),
            self.disc.as_ref(),
            &self.trainable,
            batch,
            &z,
            self.loss.lambda_l1,
        )?;
        if !parts.total.is_finite() {
            return Err(Error::NonFinite {
                step,
                snapshot: format!("generator gan {:?} l1 {} total {}", parts.gan, parts.l1, parts.total),
            });
        }
        self.opt_g.tick();
        let moved = self.opt_g.update(self.model.trainable_store(), &grads);
        report.g_gan = parts.gan;
        report.g_l1 = parts.l1;
        report.g_total = parts.total;
        report.grad_norm_g = grad_norm(&grads);
        report.update_norm_g = moved.sqrt();
        self.steps += 1;
        Ok(report)
    }
}

// ---------------------------------------------------------------------------------------
// Epoch loop

/// Index of one training pair across a list of concepts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct SampleRef {
    pub concept: usize,
    pub pair: usize,
}

/// Training pairs of every concept, in concept order.
pub fn training_samples(concepts: &[ConceptRecord]) -> Vec<SampleRef> {
    concepts
        .iter()
        .enumerate()
        .flat_map(|(ci, c)| c.splits.train.iter().map(move |&p| SampleRef { concept: ci, pair: p }))
        .collect()
}

/// Assembles a batch; in autoencoder mode the target is the source itself.
pub fn make_batch(concepts: &[ConceptRecord], samples: &[SampleRef], autoencoder: bool) -> Result<Batch<f32>> {
    let xs: Vec<_> = samples.iter().map(|s| &concepts[s.concept].pairs[s.pair].source).collect();
    let ys: Vec<_> = samples
        .iter()
        .map(|s| {
            let p = &concepts[s.concept].pairs[s.pair];
            if autoencoder {
                &p.source
            } else {
                &p.edited
            }
        })
        .collect();
    let text_dim = concepts[samples[0].concept].text_embedding.len();
    let c: Vec<f32> = samples.iter().flat_map(|s| concepts[s.concept].text_embedding.iter().copied()).collect();
    Ok(Batch { x: Tensor::stack(&xs)?, target: Tensor::stack(&ys)?, c: Tensor::new(&[samples.len(), text_dim], c)? })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpochLog {
    pub epoch: usize,
    pub iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g_gan: Option<f64>,
    pub g_l1: f64,
    pub g_total: f64,
    pub grad_norm_g: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_norm_d: Option<f64>,
    /// Wall-clock duration; kept out of the serialized metrics so reruns compare equal.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub iterations: u64,
    pub trainable_params: usize,
}

impl TrainLog {
    pub fn append_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        for e in &self.epochs {
            writeln!(f, "{}", serde_json::to_string(e)?).map_err(|err| Error::io(path, err))?;
        }
        Ok(())
    }
}

/// Runs `epochs` passes over `samples`, shuffling each epoch.
#[allow(clippy::too_many_arguments)]
pub fn run_epochs(
    state: &mut TrainState<f32>,
    concepts: &[ConceptRecord],
    samples: &[SampleRef],
    epochs: usize,
    batch_size: usize,
    shuffle: &mut ChaCha8Rng,
    autoencoder: bool,
    first_epoch: usize,
) -> Result<Vec<EpochLog>> {
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let mut logs = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let mut order = samples.to_vec();
        order.shuffle(shuffle);
        let started = Instant::now();
        let mut acc = EpochLog { epoch: first_epoch + e + 1, ..Default::default() };
        let (mut d_sum, mut gd_sum, mut gan_sum) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(batch_size) {
            let batch = make_batch(concepts, chunk, autoencoder)?;
            let r = state.training_step(&batch)?;
            acc.iterations += 1;
            gan_sum += r.g_gan.unwrap_or(0.0);
            acc.g_l1 += r.g_l1;
            acc.g_total += r.g_total;
            acc.grad_norm_g += r.grad_norm_g;
            d_sum += r.d_loss.unwrap_or(0.0);
            gd_sum += r.grad_norm_d.unwrap_or(0.0);
        }
        let n = acc.iterations as f64;
        acc.g_l1 /= n;
        acc.g_total /= n;
        acc.grad_norm_g /= n;
        if state.disc.is_some() {
            acc.d_loss = Some(d_sum / n);
            acc.g_gan = Some(gan_sum / n);
            acc.grad_norm_d = Some(gd_sum / n);
        }
        acc.seconds = started.elapsed().as_secs_f64();
        logs.push(acc);
    }
    Ok(logs)
}

fn fresh_discriminator(gen_cfg: &GeneratorConfig, disc_base: usize, seed: u64) -> Result<Discriminator<f32>> {
    Discriminator::build(DiscriminatorConfig::for_generator(gen_cfg, disc_base), seed ^ DISC_STREAM)
}

fn train_loop(
    state: &mut TrainState<f32>,
    concepts: &[ConceptRecord],
    samples: &[SampleRef],
    train: &TrainConfig,
    autoencoder: bool,
) -> Result<TrainLog> {
    let mut shuffle = ChaCha8Rng::seed_from_u64(train.seed ^ SHUFFLE_STREAM);
    let epochs = if train.epochs == 0 {
        Vec::new()
    } else {
        run_epochs(state, concepts, samples, train.epochs, train.batch_size, &mut shuffle, autoencoder, 0)?
    };
    let iterations = epochs.iter().map(|e| e.iterations as u64).sum();
    Ok(TrainLog { epochs, iterations, trainable_params: state.trainable_param_count() })
}

fn effective_config(gen_cfg: &GeneratorConfig, train: &TrainConfig) -> GeneratorConfig {
    let mut cfg = gen_cfg.clone();
    if train.disable_cross_attention {
        cfg.use_cross_attention = false;
    }
    cfg
}

fn check_concepts(concepts: &[ConceptRecord], gen_cfg: &GeneratorConfig) -> Result<()> {
    if concepts.is_empty() || concepts.iter().all(|c| c.splits.train.is_empty()) {
        return Err(Error::Config("training needs at least one concept with training pairs".into()));
    }
    for c in concepts {
        if c.resolution() != gen_cfg.image_resolution {
            return Err(Error::Config(format!(
                "concept {} has resolution {} but the generator expects {}",
                c.name,
                c.resolution(),
                gen_cfg.image_resolution
            )));
        }
        if c.text_embedding.len() != gen_cfg.text_embed_dim {
            return Err(Error::Config(format!(
                "concept {} text embedding has {} values, generator expects {}",
                c.name,
                c.text_embedding.len(),
                gen_cfg.text_embed_dim
            )));
        }
    }
    Ok(())
}

/// Trains generator and discriminator from scratch on the shuffled union of all concepts.
pub fn train_base(
    concepts: &[ConceptRecord],
    gen_cfg: &GeneratorConfig,
    disc_base_channels: usize,
    train: &TrainConfig,
    loss: &LossConfig,
) -> Result<(Checkpoint, TrainLog)> {
    train.validate(false)?;
    let cfg = effective_config(gen_cfg, train);
    check_concepts(concepts, &cfg)?;
    let gen = Generator::build(cfg.clone(), train.seed)?;
    let disc = fresh_discriminator(&cfg, disc_base_channels, train.seed)?;
    let trainable = unfrozen_names(&gen, &train.freeze_groups);
    let mut state = TrainState::new(GenModel::Dense(gen), Some(disc), trainable, train, loss.clone())?;
    let log = train_loop(&mut state, concepts, &training_samples(concepts), train, false)?;
    let GenModel::Dense(gen) = &state.model else { unreachable!("base training is dense") };
    Ok((Checkpoint::base(gen, state.disc.as_ref()), log))
}

/// Result of adapting a base model to one concept.
#[derive(Clone, Debug)]
pub struct Finetuned {
    pub model: GenModel<f32>,
    pub log: TrainLog,
}

impl Finetuned {
    /// Concept delta holding only adapter tensors (adapter fine-tunes only).
    pub fn delta(&self, concept: &ConceptRecord) -> Result<Checkpoint> {
        match &self.model {
            GenModel::Adapted(a) => Ok(Checkpoint::delta(a, &concept.name, &concept.prompt)),
            GenModel::Dense(_) => Err(Error::Config("dense fine-tunes have no adapter delta".into())),
        }
    }
}

fn finetune_with(
    base: &Checkpoint,
    concept: &ConceptRecord,
    model: GenModel<f32>,
    trainable: BTreeSet<String>,
    train: &TrainConfig,
    loss: &LossConfig,
) -> Result<Finetuned> {
    let gen_cfg = base.meta.generator.clone();
    check_concepts(std::slice::from_ref(concept), &gen_cfg)?;
    let disc_base = base.meta.discriminator.as_ref().map_or(64, |d| d.base_channels);
    let disc = fresh_discriminator(&gen_cfg, disc_base, train.seed)?;
    let mut state = TrainState::new(model, Some(disc), trainable, train, loss.clone())?;
    let log = train_loop(&mut state, std::slice::from_ref(concept), &training_samples(std::slice::from_ref(concept)), train, false)?;
    Ok(Finetuned { model: state.model, log })
}

/// Adapts the frozen base to `concept` by training only LoRA factors (plus a freshly
/// initialized discriminator, which is not part of the result).
pub fn finetune_concept(
    base: &Checkpoint,
    concept: &ConceptRecord,
    spec: &RankSpec,
    train: &TrainConfig,
    loss: &LossConfig,
) -> Result<Finetuned> {
    train.validate(true)?;
    let adapted = inject_lora(base.generator()?, spec, train.seed ^ LORA_STREAM)?;
    let trainable = adapted.trainable_names().into_iter().collect();
    finetune_with(base, concept, GenModel::Adapted(adapted), trainable, train, loss)
}

/// Fine-tunes every generator parameter (the reference point for adapter fine-tunes).
pub fn finetune_full(base: &Checkpoint, concept: &ConceptRecord, train: &TrainConfig, loss: &LossConfig) -> Result<Finetuned> {
    freeze_groups_ablation(base, concept, &BTreeSet::new(), train, loss)
}

/// Fine-tunes all generator parameters except those in `frozen`.
pub fn freeze_groups_ablation(
    base: &Checkpoint,
    concept: &ConceptRecord,
    frozen: &BTreeSet<LayerGroup>,
    train: &TrainConfig,
    loss: &LossConfig,
) -> Result<Finetuned> {
    train.validate(true)?;
    let gen = base.generator()?;
    let trainable = unfrozen_names(&gen, frozen);
    finetune_with(base, concept, GenModel::Dense(gen), trainable, train, loss)
}

/// Trains the generator to reproduce its input with the L1 loss alone.
pub fn pretrain_autoencoder(
    images: &ConceptRecord,
    gen_cfg: &GeneratorConfig,
    train: &TrainConfig,
) -> Result<(Checkpoint, TrainLog)> {
    train.validate(false)?;
    let cfg = effective_config(gen_cfg, train);
    check_concepts(std::slice::from_ref(images), &cfg)?;
    let gen = Generator::build(cfg, train.seed)?;
    let trainable = unfrozen_names(&gen, &train.freeze_groups);
    let loss = LossConfig { lambda_l1: 1.0, ..LossConfig::default() };
    let mut state = TrainState::new(GenModel::Dense(gen), None, trainable, train, loss)?;
    let concepts = std::slice::from_ref(images);
    let log = train_loop(&mut state, concepts, &training_samples(concepts), train, true)?;
    let GenModel::Dense(gen) = &state.model else { unreachable!("autoencoder is dense") };
    Ok((Checkpoint::base(gen, None), log))
}

// ---------------------------------------------------------------------------------------
// Evaluation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ids: Vec<String>,
    pub per_image_l1: Vec<f64>,
    pub mean_l1: f64,
    #[serde(skip)]
    pub outputs: Vec<Tensor<f32>>,
}

/// Generates outputs for the given pairs with noise drawn from `seed` and measures the
/// per-image L1 against the targets.
pub fn evaluate(model: &GenModel<f32>, concept: &ConceptRecord, indices: &[usize], seed: u64) -> Result<EvalResult> {
    if indices.is_empty() {
        return Err(Error::Config(format!("concept {} has no pairs to evaluate", concept.name)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_STREAM);
    let noise_dim = model.base().config().noise_dim;
    let mut per_image = Vec::with_capacity(indices.len());
    let mut outputs = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(8) {
        let (x, y) = concept.batch(chunk)?;
        let z: Tensor<f32> = sample_noise(chunk.len(), noise_dim, &mut rng);
        let out = model.forward(&x, &z, &concept.text_batch(chunk.len()))?;
        for b in 0..chunk.len() {
            let (o, t) = (out.index0(b), y.index0(b));
            per_image.push(l1_term(&o, &t)?);
            outputs.push(o);
        }
    }
    let mean_l1 = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(EvalResult {
        ids: indices.iter().map(|&i| concept.pairs[i].id.clone()).collect(),
        per_image_l1: per_image,
        mean_l1,
        outputs,
    })
}

// ---------------------------------------------------------------------------------------
// Rank search with real training

/// Score used by the rank search (lower is better).
pub enum SearchScorer {
    /// Mean L1 on the test split.
    L1,
    /// Fréchet distance between generated and reference test images.
    Frechet(Box<dyn Embedder>),
}

/// Trains adapters on one probe concept, growing ranks between rounds.
pub struct LoraSearchTrial {
    state: TrainState<f32>,
    concept: ConceptRecord,
    train: TrainConfig,
    scorer: SearchScorer,
    shuffle: ChaCha8Rng,
    grow_rng: ChaCha8Rng,
    epochs_done: usize,
    pub log: Vec<EpochLog>,
}

impl LoraSearchTrial {
    pub fn new(
        base: &Checkpoint,
        concept: ConceptRecord,
        thresholds: &BTreeMap<String, usize>,
        train: &TrainConfig,
        loss: &LossConfig,
        scorer: SearchScorer,
    ) -> Result<Self> {
        train.validate(false)?;
        let gen_cfg = base.meta.generator.clone();
        check_concepts(std::slice::from_ref(&concept), &gen_cfg)?;
        if concept.splits.test.len() < 2 && matches!(scorer, SearchScorer::Frechet(_)) {
            return Err(Error::Config(format!("concept {} needs at least 2 test pairs for the Fréchet score", concept.name)));
        }
        if concept.splits.test.is_empty() {
            return Err(Error::Config(format!("concept {} has an empty test split", concept.name)));
        }
        let ones = thresholds.keys().map(|k| (k.clone(), 1)).collect();
        let spec = RankSpec::new(ones, thresholds.clone())?;
        let adapted = inject_lora(base.generator()?, &spec, train.seed ^ LORA_STREAM)?;
        let trainable = adapted.trainable_names().into_iter().collect();
        let disc_base = base.meta.discriminator.as_ref().map_or(64, |d| d.base_channels);
        let disc = fresh_discriminator(&gen_cfg, disc_base, train.seed)?;
        let state = TrainState::new(GenModel::Adapted(adapted), Some(disc), trainable, train, loss.clone())?;
        Ok(Self {
            state,
            concept,
            train: train.clone(),
            scorer,
            shuffle: ChaCha8Rng::seed_from_u64(train.seed ^ SHUFFLE_STREAM),
            grow_rng: ChaCha8Rng::seed_from_u64(train.seed ^ LORA_STREAM ^ 1),
            epochs_done: 0,
            log: Vec::new(),
        })
    }

    pub fn model(&self) -> &GenModel<f32> {
        &self.state.model
    }

    fn score(&self) -> Result<f64> {
        let eval = evaluate(&self.state.model, &self.concept, &self.concept.splits.test, self.train.seed)?;
        match &self.scorer {
            SearchScorer::L1 => Ok(eval.mean_l1),
            SearchScorer::Frechet(embedder) => {
                let reference: Vec<Tensor<f32>> =
                    self.concept.splits.test.iter().map(|&i| self.concept.pairs[i].edited.clone()).collect();
                crate::metrics::fid_score(&eval.outputs, &reference, embedder.as_ref())
            }
        }
    }
}

impl RankTrial for LoraSearchTrial {
    fn run_round(&mut self, _round: usize, ranks: &BTreeMap<String, usize>, epochs: usize) -> Result<f64> {
        let current = match &self.state.model {
            GenModel::Adapted(a) => a.spec().ranks.clone(),
            GenModel::Dense(_) => unreachable!("search trains adapters"),
        };
        if &current != ranks {
            self.state.grow_ranks(ranks, &mut self.grow_rng)?;
        } else {
            self.state.reset_optimizers();
        }
        let concepts = std::slice::from_ref(&self.concept);
        let samples = training_samples(concepts);
        let logs = run_epochs(
            &mut self.state,
            concepts,
            &samples,
            epochs,
            self.train.batch_size,
            &mut self.shuffle,
            false,
            self.epochs_done,
        )?;
        self.epochs_done += epochs;
        self.log.extend(logs);
        self.score()
    }
}
