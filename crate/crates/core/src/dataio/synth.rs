//! Procedural paired datasets for small-scale experiments.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{split_indices, text_embedding, ConceptRecord, PairedImage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HUE_SHIFT_DEGREES: f64 = 120.0;
pub const POSTERIZE_LEVELS: usize = 4;

/// Luma weights applied to RGB in `[0, 1]`.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthTask {
    Invert,
    HueShift,
    Blur,
    Posterize,
}

impl SynthTask {
    pub fn name(self) -> &'static str {
        match self {
            SynthTask::Invert => "invert",
            SynthTask::HueShift => "hue_shift",
            SynthTask::Blur => "blur",
            SynthTask::Posterize => "posterize",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "invert" => Ok(SynthTask::Invert),
            "hue_shift" => Ok(SynthTask::HueShift),
            "blur" => Ok(SynthTask::Blur),
            "posterize" => Ok(SynthTask::Posterize),
            other => Err(Error::Config(format!(
                "unknown synthetic task {other:?} (expected invert, hue_shift, blur or posterize)"
            ))),
        }
    }

    pub fn apply(self, image: &Tensor<f32>) -> Tensor<f32> {
        match self {
            SynthTask::Invert => image.map(|v| -v),
            SynthTask::HueShift => hue_shift(image, HUE_SHIFT_DEGREES),
            SynthTask::Blur => box_blur(image),
            SynthTask::Posterize => posterize(image, POSTERIZE_LEVELS),
        }
    }
}

/// Mean luma of a `[3, H, W]` image in `[-1, 1]`, measured on the `[0, 1]` scale.
pub fn mean_luminance(image: &Tensor<f32>) -> f64 {
    let plane = image.len() / 3;
    let d = image.data();
    (0..plane)
        .map(|i| (0..3).map(|c| LUMA[c] * (d[c * plane + i] as f64 + 1.0) / 2.0).sum::<f64>())
        .sum::<f64>()
        / plane as f64
}

fn yiq() -> Matrix3<f64> {
    Matrix3::new(
        LUMA[0], LUMA[1], LUMA[2], //
        0.595716, -0.274453, -0.321263, //
        0.211456, -0.522591, 0.311135,
    )
}

/// Rotates chroma in YIQ space by `degrees`, keeping luma fixed. Pixels pushed out of
/// gamut have their chroma scaled back toward grey at the same luma.
pub fn hue_shift(image: &Tensor<f32>, degrees: f64) -> Tensor<f32> {
    let fwd = yiq();
    let inv = fwd.try_inverse().expect("YIQ matrix is invertible");
    let (s, c) = degrees.to_radians().sin_cos();
    let plane = image.len() / 3;
    let mut out = image.clone();
    for i in 0..plane {
        let rgb = Vector3::from_fn(|ch, _| (image.data()[ch * plane + i] as f64 + 1.0) / 2.0);
        let v = fwd * rgb;
        let rotated = Vector3::new(v[0], c * v[1] - s * v[2], s * v[1] + c * v[2]);
        let y = v[0];
        let shifted = inv * rotated;
        let mut scale: f64 = 1.0;
        for ch in 0..3 {
            let d = shifted[ch] - y;
            if d > 0.0 {
                scale = scale.min((1.0 - y) / d);
            } else if d < 0.0 {
                scale = scale.min(-y / d);
            }
        }
        let scale = scale.max(0.0);
        for ch in 0..3 {
            let p = y + scale * (shifted[ch] - y);
            out.data_mut()[ch * plane + i] = (p.clamp(0.0, 1.0) * 2.0 - 1.0) as f32;
        }
    }
    out
}

/// 3x3 box blur with edge clamping.
pub fn box_blur(image: &Tensor<f32>) -> Tensor<f32> {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let mut out = image.clone();
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        acc += image.data()[(ch * h + yy) * w + xx];
                    }
                }
                out.data_mut()[(ch * h + y) * w + x] = acc / 9.0;
            }
        }
    }
    out
}

/// Quantizes every channel to `levels` evenly spaced values.
pub fn posterize(image: &Tensor<f32>, levels: usize) -> Tensor<f32> {
    let steps = (levels - 1) as f32;
    image.map(|v| {
        let p = (v + 1.0) / 2.0;
        (p * steps).round() / steps * 2.0 - 1.0
    })
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)]
}

/// A linear two-colour gradient with one to three rectangles or discs on top.
pub fn random_source(resolution: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let r = resolution;
    let (c0, c1) = (random_color(rng), random_color(rng));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    let mut img = Tensor::zeros(&[3, r, r]);
    for y in 0..r {
        for x in 0..r {
            let u = (x as f64 / r as f64 - 0.5) * dx + (y as f64 / r as f64 - 0.5) * dy;
            let t = (u + 0.75) / 1.5;
            for ch in 0..3 {
                img.data_mut()[(ch * r + y) * r + x] = (c0[ch] as f64 * (1.0 - t) + c1[ch] as f64 * t) as f32;
            }
        }
    }
    let shapes = rng.gen_range(1..=3);
    for _ in 0..shapes {
        let color = random_color(rng);
        let disc = rng.gen_bool(0.5);
        let cx = rng.gen_range(0.0..r as f64);
        let cy = rng.gen_range(0.0..r as f64);
        let half = rng.gen_range(r as f64 / 10.0..r as f64 / 3.0);
        for y in 0..r {
            for x in 0..r {
                let (fx, fy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if disc { fx * fx + fy * fy <= half * half } else { fx.abs() <= half && fy.abs() <= half };
                if inside {
                    for (ch, &v) in color.iter().enumerate() {
                        img.data_mut()[(ch * r + y) * r + x] = v;
                    }
                }
            }
        }
    }
    img
}

/// Generates `n` (source, edited) pairs for `task` at `resolution`.
pub fn synth_paired_task(task: SynthTask, n: usize, resolution: usize, seed: u64, text_dim: usize) -> Result<ConceptRecord> {
    if n < 2 {
        return Err(Error::Config(format!("synthetic dataset needs at least 2 pairs, got {n}")));
    }
    if resolution < 4 {
        return Err(Error::Config(format!("synthetic resolution {resolution} is too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..n)
        .map(|i| {
            let source = random_source(resolution, &mut rng);
            let edited = task.apply(&source);
            PairedImage { id: format!("{}-{i:04}", task.name()), source, edited }
        })
        .collect();
    Ok(ConceptRecord {
        name: task.name().to_string(),
        prompt: task.name().to_string(),
        text_embedding: text_embedding(task.name(), text_dim),
        pairs,
        splits: split_indices(n, seed),
    })
}
