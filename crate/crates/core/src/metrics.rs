//! Fréchet distance between feature sets, and parameter / FLOP / training-cost accounting.
//!
//! FLOPs count one multiply-add as two operations and only include weight layers and the
//! attention matrix products; element-wise work (norms, activations, residual adds) is
//! ignored. Training cost uses the estimate backward ≈ 2 × forward.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{lora_param_count, RankSpec};
use crate::model::{
    discriminator_layout, generator_layout, AttnRole, DiscriminatorConfig, GeneratorConfig, LayerDescriptor,
    LayerGroup, LayerKind,
};
use crate::selection::Embedder;
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

/// Reference figures for side-by-side comparison: (parameters, FLOPs per image at 256²).
pub const PAPER_E2GAN: (f64, f64) = (7.1e6, 23.6e9);
pub const PAPER_PIX2PIX: (f64, f64) = (11.4e6, 56.9e9);
pub const PAPER_COMODGAN: (f64, f64) = (79.2e6, 98.2e9);
/// Reported adapter parameter count of the searched ranks.
pub const PAPER_SEARCHED_LORA_PARAMS: f64 = 0.092e6;
/// Reported share of generator weights trained during adaptation.
pub const PAPER_TRAINABLE_FRACTION: f64 = 0.0129;
/// Reported group sizes (TB, RB).
pub const PAPER_TB_RB_PARAMS: (f64, f64) = (1.58e6, 3.54e6);

const EIG_CLAMP: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub sample_count: usize,
}

impl GaussianSummary {
    /// Mean and unbiased covariance of the rows.
    pub fn from_samples(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Numerical(format!("need at least 2 samples for a covariance, got {n}")));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Numerical("samples have differing dimensions".into()));
        }
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let mut covariance = centered.transpose() * &centered / (n - 1) as f64;
        covariance = (&covariance + covariance.transpose()) * 0.5;
        Ok(Self { mean, covariance, sample_count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, f64, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let lo = eig.eigenvalues.min();
    let hi = eig.eigenvalues.max();
    let roots = eig.eigenvalues.map(|l| if l < EIG_CLAMP { 0.0 } else { l.sqrt() });
    let v = &eig.eigenvectors;
    (v * DMatrix::from_diagonal(&roots) * v.transpose(), lo, hi)
}

/// `|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})`, with the trace of the product root
/// computed from the symmetric matrix `S1^{1/2} S2 S1^{1/2}`.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Numerical(format!("dimension mismatch: {} vs {}", a.dim(), b.dim())));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let (root_a, lo_a, hi_a) = psd_sqrt(&a.covariance);
    let inner = &root_a * &b.covariance * &root_a;
    let eig = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let tr_root: f64 = eig.eigenvalues.iter().map(|&l| if l < EIG_CLAMP { 0.0 } else { l.sqrt() }).sum();
    let value = diff + a.covariance.trace() + b.covariance.trace() - 2.0 * tr_root;
    if !value.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite Fréchet distance; first covariance eigenvalues span [{lo_a:e}, {hi_a:e}]"
        )));
    }
    Ok(value.max(0.0))
}

pub fn fid_from_embeddings(generated: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    frechet_distance(&GaussianSummary::from_samples(generated)?, &GaussianSummary::from_samples(reference)?)
}

/// Embeds both image sets with `extractor` and compares their Gaussian fits.
pub fn fid_score(generated: &[Tensor<f32>], reference: &[Tensor<f32>], extractor: &dyn Embedder) -> Result<f64> {
    if generated.len() < 2 || reference.len() < 2 {
        return Err(Error::Numerical("each image set needs at least 2 images".into()));
    }
    let embed = |set: &[Tensor<f32>], tag: &str| -> Result<Vec<Vec<f64>>> {
        set.iter().enumerate().map(|(i, img)| extractor.embed(&format!("{tag}[{i}]"), img)).collect()
    };
    fid_from_embeddings(&embed(generated, "generated")?, &embed(reference, "reference")?)
}

/// Parameter totals per layer group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub sl: usize,
    pub rb: usize,
    pub tb: usize,
    pub other: usize,
}

impl GroupCounts {
    pub fn total(&self) -> usize {
        self.sl + self.rb + self.tb + self.other
    }

    pub fn get(&self, group: LayerGroup) -> usize {
        match group {
            LayerGroup::SL => self.sl,
            LayerGroup::RB => self.rb,
            LayerGroup::TB => self.tb,
            LayerGroup::Other => self.other,
        }
    }
}

pub fn count_params(layers: &[LayerDescriptor]) -> GroupCounts {
    let mut c = GroupCounts::default();
    for d in layers {
        let n = d.param_count();
        match d.group {
            LayerGroup::SL => c.sl += n,
            LayerGroup::RB => c.rb += n,
            LayerGroup::TB => c.tb += n,
            LayerGroup::Other => c.other += n,
        }
    }
    c
}

fn side(resolution: usize, d: &LayerDescriptor) -> Option<usize> {
    d.feature_div.map(|div| resolution / div)
}

/// FLOPs of one layer for a single image at `resolution`.
pub fn layer_flops(d: &LayerDescriptor, resolution: usize) -> u64 {
    let (i, o) = (d.in_channels as u64, d.out_channels as u64);
    match d.kind {
        LayerKind::Norm => 0,
        LayerKind::Conv => {
            let (kh, kw) = d.kernel.unwrap_or((1, 1));
            let s_in = side(resolution, d).unwrap_or(1);
            let out = (s_in + 2 * d.padding - kh) / d.stride + 1;
            2 * (out * out) as u64 * i * o * (kh * kw) as u64
        }
        LayerKind::TransposeConv => {
            // Every input pixel scatters a full kernel.
            let (kh, kw) = d.kernel.unwrap_or((1, 1));
            let s_in = side(resolution, d).unwrap_or(1) as u64;
            2 * s_in * s_in * i * o * (kh * kw) as u64
        }
        LayerKind::Linear => {
            let tokens = side(resolution, d).map_or(1, |s| (s * s) as u64);
            2 * tokens * i * o
        }
        LayerKind::AttentionProj => {
            let n = side(resolution, d).map_or(1, |s| (s * s) as u64);
            let m = n + d.context_tokens as u64;
            match d.attention {
                Some(AttnRole::Query) => {
                    // projection plus the score and value products of the block
                    2 * n * i * o + 2 * (2 * n * m * o)
                }
                _ => 2 * m * i * o,
            }
        }
    }
}

pub fn count_flops(layers: &[LayerDescriptor], resolution: usize) -> u64 {
    layers.iter().map(|d| layer_flops(d, resolution)).sum()
}

/// Extra forward FLOPs of the adapter paths described by `spec`.
pub fn lora_flops(spec: &RankSpec, layers: &[LayerDescriptor], resolution: usize) -> u64 {
    layers
        .iter()
        .filter_map(|d| spec.ranks.get(&d.layer_id).map(|&r| (d, r as u64)))
        .map(|(d, r)| {
            let (i, o) = (d.in_channels as u64, d.out_channels as u64);
            match d.kind {
                LayerKind::Conv | LayerKind::TransposeConv => {
                    let (kh, kw) = d.kernel.unwrap_or((1, 1));
                    let s_in = side(resolution, d).unwrap_or(1) as u64;
                    let k = (kh * kw) as u64;
                    if d.kind == LayerKind::Conv {
                        let s_out = (s_in + 2 * d.padding as u64 - kh as u64) / d.stride as u64 + 1;
                        2 * s_out * s_out * (i * r * k + r * o)
                    } else {
                        let s_out = s_in * d.stride as u64;
                        2 * s_in * s_in * i * r * k + 2 * s_out * s_out * r * o
                    }
                }
                _ => {
                    let n = side(resolution, d).map_or(1, |s| (s * s) as u64);
                    let m = if d.attention.is_some_and(|a| a != AttnRole::Query) { n + d.context_tokens as u64 } else { n };
                    2 * m * r * (i + o)
                }
            }
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainingMode<'a> {
    /// Every generator parameter is trained.
    Full,
    /// Only adapters with the given ranks are trained.
    Lora(&'a RankSpec),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub mode: String,
    pub total_params: u64,
    pub trainable_params: u64,
    pub flops_per_image: u64,
    pub stored_bytes_per_concept: u64,
    pub train_flops_total: u64,
    pub iteration_count: u64,
    pub group_params: GroupCounts,
}

/// `epochs × ⌈dataset_size / batch_size⌉`.
pub fn iteration_count(epochs: usize, dataset_size: usize, batch_size: usize) -> u64 {
    (epochs * dataset_size.div_ceil(batch_size.max(1))) as u64
}

/// Estimated training cost. A step runs the generator once and the discriminator twice
/// (real and generated pair) per image, each forward followed by a backward estimated at
/// twice its cost.
pub fn training_cost_report(
    train: &TrainConfig,
    gen_cfg: &GeneratorConfig,
    disc_cfg: &DiscriminatorConfig,
    mode: TrainingMode<'_>,
    dataset_size: usize,
) -> Result<CostReport> {
    let glayers = generator_layout(gen_cfg);
    let dlayers = discriminator_layout(disc_cfg);
    let res = gen_cfg.image_resolution;
    let groups = count_params(&glayers);
    let total = groups.total() as u64;
    let gen_flops = count_flops(&glayers, res);
    let disc_flops = count_flops(&dlayers, disc_cfg.image_resolution);
    let (label, trainable, stored, adapter_flops) = match mode {
        TrainingMode::Full => ("full".to_string(), total, 4 * total, 0),
        TrainingMode::Lora(spec) => {
            let p = lora_param_count(spec, &glayers)? as u64;
            // each layer also records its rank and threshold
            let overhead = 2 * spec.len() as u64;
            ("lora".to_string(), p, 4 * (p + overhead), lora_flops(spec, &glayers, res))
        }
    };
    let iterations = iteration_count(train.epochs, dataset_size, train.batch_size);
    let per_image_step = 3 * (gen_flops + adapter_flops + 2 * disc_flops);
    let images_per_step = train.batch_size.min(dataset_size.max(1)) as u64;
    Ok(CostReport {
        mode: label,
        total_params: total,
        trainable_params: trainable,
        flops_per_image: gen_flops + adapter_flops,
        stored_bytes_per_concept: stored,
        train_flops_total: iterations * per_image_step * images_per_step,
        iteration_count: iterations,
        group_params: groups,
    })
}
