use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Train / validation / test fractions; validation and test round down.
pub const VAL_FRACTION: f64 = 0.1;
pub const TEST_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub source: String,
    pub edited: String,
}

/// On-disk description of a paired concept dataset. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptDatasetManifest {
    pub concept_name: String,
    pub prompt_text: String,
    pub split_seed: u64,
    pub pairs: Vec<PairEntry>,
    /// Every pair is a training pair (no validation or test split); set on coreset
    /// manifests, whose held-out pairs live in the original dataset.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub train_only: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` with `seed` and carves off test, then validation, then training.
/// Each split is returned in ascending order.
pub fn split_indices(n: usize, seed: u64) -> Splits {
    let n_val = (n as f64 * VAL_FRACTION).floor() as usize;
    let n_test = (n as f64 * TEST_FRACTION).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Splits {
        test: sorted(&order[..n_test]),
        val: sorted(&order[n_test..n_test + n_val]),
        train: sorted(&order[n_test + n_val..]),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedImage {
    pub id: String,
    /// `[3, R, R]` in `[-1, 1]`.
    pub source: Tensor<f32>,
    pub edited: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptRecord {
    pub name: String,
    pub prompt: String,
    pub text_embedding: Vec<f32>,
    pub pairs: Vec<PairedImage>,
    pub splits: Splits,
}

impl ConceptRecord {
    pub fn resolution(&self) -> usize {
        self.pairs.first().map_or(0, |p| p.source.shape()[1])
    }

    /// Stacks the selected pairs into `[B, 3, R, R]` source and target batches.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let src: Vec<_> = indices.iter().map(|&i| &self.pairs[i].source).collect();
        let dst: Vec<_> = indices.iter().map(|&i| &self.pairs[i].edited).collect();
        Ok((Tensor::stack(&src)?, Tensor::stack(&dst)?))
    }

    /// `[B, text_dim]` copies of the prompt embedding.
    pub fn text_batch(&self, batch: usize) -> Tensor<f32> {
        let data = (0..batch).flat_map(|_| self.text_embedding.iter().copied()).collect();
        Tensor::new(&[batch, self.text_embedding.len()], data).expect("text batch shape")
    }

    /// Keeps only the pairs whose ids are listed, re-splitting the subset with all of it
    /// used for training.
    pub fn restrict_train(&self, ids: &[String]) -> Result<ConceptRecord> {
        let keep: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        let train: Vec<usize> = self.splits.train.iter().copied().filter(|&i| keep.contains(self.pairs[i].id.as_str())).collect();
        if train.len() != keep.len() {
            return Err(Error::Config(format!(
                "{} of {} selected ids are not training pairs of {}",
                keep.len() - train.len(),
                keep.len(),
                self.name
            )));
        }
        Ok(ConceptRecord { splits: Splits { train, ..self.splits.clone() }, ..self.clone() })
    }
}

/// Deterministic stand-in for a text encoder: a unit-variance Gaussian vector seeded by
/// the SHA-256 of the prompt.
pub fn text_embedding(prompt: &str, dim: usize) -> Vec<f32> {
    let digest = Sha256::digest(prompt.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    (0..dim)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        })
        .collect()
}

/// Decodes an image, resizes it bilinearly to `resolution` square and maps it to
/// `[3, R, R]` in `[-1, 1]`.
pub fn load_image(path: &Path, resolution: usize) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?
        .to_rgb8();
    let r = resolution as u32;
    let img = if img.dimensions() == (r, r) { img } else { image::imageops::resize(&img, r, r, FilterType::Triangle) };
    let mut data = vec![0.0f32; 3 * resolution * resolution];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * resolution + y as usize) * resolution + x as usize] = p.0[c] as f32 / 127.5 - 1.0;
        }
    }
    Tensor::new(&[3, resolution, resolution], data)
}

fn to_rgb8(image: &Tensor<f32>) -> Result<image::RgbImage> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape { context: "png export".into(), expected: "[3, H, W]".into(), actual: format!("{s:?}") });
    }
    let (h, w) = (s[1], s[2]);
    Ok(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let v = image.data()[(c * h + y as usize) * w + x as usize];
            ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    }))
}

/// Writes a `[3, H, W]` tensor in `[-1, 1]` as an 8-bit PNG.
pub fn write_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let img = to_rgb8(image)?;
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?;
    write_atomic(path, buf.get_ref())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadOptions {
    pub resolution: usize,
    pub text_dim: usize,
}

pub fn read_manifest(path: &Path) -> Result<ConceptDatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: ConceptDatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest { path: path.to_path_buf(), message: e.to_string() })?;
    if m.pairs.is_empty() {
        return Err(Error::Manifest { path: path.to_path_buf(), message: "no pairs".into() });
    }
    let unique: BTreeSet<_> = m.pairs.iter().map(|p| &p.source).collect();
    if unique.len() != m.pairs.len() {
        return Err(Error::Manifest { path: path.to_path_buf(), message: "duplicate source paths".into() });
    }
    Ok(m)
}

pub fn load_concept_dataset(manifest_path: &Path, opts: LoadOptions) -> Result<ConceptRecord> {
    let m = read_manifest(manifest_path)?;
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let resolve = |rel: &str| -> Result<PathBuf> {
        let p = root.join(rel);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::io(&p, std::io::Error::new(std::io::ErrorKind::NotFound, "file listed in manifest not found")))
        }
    };
    let mut pairs = Vec::with_capacity(m.pairs.len());
    for entry in &m.pairs {
        let (sp, ep) = (resolve(&entry.source)?, resolve(&entry.edited)?);
        pairs.push(PairedImage {
            id: entry.source.clone(),
            source: load_image(&sp, opts.resolution)?,
            edited: load_image(&ep, opts.resolution)?,
        });
    }
    Ok(ConceptRecord {
        name: m.concept_name.clone(),
        prompt: m.prompt_text.clone(),
        text_embedding: text_embedding(&m.prompt_text, opts.text_dim),
        splits: if m.train_only {
            Splits { train: (0..pairs.len()).collect(), val: Vec::new(), test: Vec::new() }
        } else {
            split_indices(pairs.len(), m.split_seed)
        },
        pairs,
    })
}

/// Writes the pairs of `record` as PNGs under `dir` together with `manifest.json`.
pub fn write_concept_dataset(record: &ConceptRecord, dir: &Path, split_seed: u64) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut entries = Vec::with_capacity(record.pairs.len());
    for p in &record.pairs {
        let source = format!("images/{}_src.png", p.id);
        let edited = format!("images/{}_dst.png", p.id);
        write_png(&dir.join(&source), &p.source)?;
        write_png(&dir.join(&edited), &p.edited)?;
        entries.push(PairEntry { source, edited });
    }
    let manifest = ConceptDatasetManifest {
        concept_name: record.name.clone(),
        prompt_text: record.prompt.clone(),
        split_seed,
        pairs: entries,
        train_only: false,
    };
    let path = dir.join("manifest.json");
    write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}

/// Writes a manifest listing only the selected pairs (a coreset). Paths are rewritten
/// relative to `manifest_dir` resolution so the new file can live anywhere.
pub fn write_subset_manifest(
    manifest: &ConceptDatasetManifest,
    manifest_dir: &Path,
    keep: &[String],
    path: &Path,
) -> Result<()> {
    let keep: BTreeSet<&str> = keep.iter().map(String::as_str).collect();
    let absolute = |rel: &str| -> Result<String> {
        let p = manifest_dir.join(rel);
        let p = p.canonicalize().map_err(|e| Error::io(&p, e))?;
        Ok(p.to_string_lossy().into_owned())
    };
    let mut pairs = Vec::new();
    for p in manifest.pairs.iter().filter(|p| keep.contains(p.source.as_str())) {
        pairs.push(PairEntry { source: absolute(&p.source)?, edited: absolute(&p.edited)? });
    }
    let out = ConceptDatasetManifest { pairs, train_only: true, ..manifest.clone() };
    write_atomic(path, serde_json::to_string_pretty(&out)?.as_bytes())
}
