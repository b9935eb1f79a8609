//! K-means based selection: training-data coresets and representative base concepts.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cluster count used for data reduction unless overridden.
pub const DEFAULT_CORESET_K: usize = 400;
pub const DEFAULT_KMEANS_ITERS: usize = 100;

/// Row-major `[N, d]` embeddings with one id per row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<String>, vectors: Vec<Vec<f64>>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Clustering("embedding set is empty".into()));
        }
        if ids.len() != vectors.len() {
            return Err(Error::Clustering(format!("{} ids but {} vectors", ids.len(), vectors.len())));
        }
        let unique: BTreeSet<_> = ids.iter().collect();
        if unique.len() != ids.len() {
            return Err(Error::Clustering("duplicate item ids".into()));
        }
        let dim = vectors[0].len();
        let mut data = Vec::with_capacity(dim * ids.len());
        for (id, v) in ids.iter().zip(&vectors) {
            if v.len() != dim {
                return Err(Error::Clustering(format!("{id}: dimension {} differs from {dim}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Clustering(format!("{id}: non-finite embedding")));
            }
            data.extend_from_slice(v);
        }
        Ok(Self { ids, dim, data })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Copy with every row scaled to unit Euclidean norm (zero rows are left as is).
    pub fn l2_normalized(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.dim.max(1)) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        out
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    /// Row-major `[K, d]`.
    pub centroids: Vec<f64>,
    pub dim: usize,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step, starting with the seeding.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim.max(1)
    }

    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.centroids[k * self.dim..(k + 1) * self.dim]
    }
}

fn assign(emb: &EmbeddingSet, centroids: &[f64], k: usize) -> (Vec<usize>, f64) {
    let d = emb.dim;
    let mut inertia = 0.0;
    let assignments = (0..emb.len())
        .map(|i| {
            let row = emb.row(i);
            let (mut best, mut best_d) = (0, f64::INFINITY);
            for c in 0..k {
                let dist = sq_dist(row, &centroids[c * d..(c + 1) * d]);
                if dist < best_d {
                    best = c;
                    best_d = dist;
                }
            }
            inertia += best_d;
            best
        })
        .collect();
    (assignments, inertia)
}

/// k-means++ seeding; falls back to the lowest-index unused point when all remaining
/// points coincide with a chosen centroid.
fn seed_centroids(emb: &EmbeddingSet, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = emb.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(emb.row(i), emb.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(pick);
        for (i, w) in nearest.iter_mut().enumerate() {
            *w = w.min(sq_dist(emb.row(i), emb.row(pick)));
        }
    }
    chosen.iter().flat_map(|&i| emb.row(i).to_vec()).collect()
}

/// Lloyd's algorithm from k-means++ seeding. An empty cluster is re-seeded at the point
/// farthest from its current centroid (taken from a cluster with at least two members).
pub fn kmeans(emb: &EmbeddingSet, k: usize, seed: u64, max_iters: usize) -> Result<ClusterModel> {
    let n = emb.len();
    if k == 0 || k > n {
        return Err(Error::Clustering(format!("cluster count {k} must be in 1..={n}")));
    }
    if max_iters == 0 {
        return Err(Error::Clustering("max_iters must be at least 1".into()));
    }
    let d = emb.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(emb, k, &mut rng);
    let (mut assignments, mut inertia) = assign(emb, &centroids, k);
    let mut history = vec![inertia];
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums[c * d..(c + 1) * d].iter_mut().zip(emb.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centroids[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[assignments[i]] > 1)
                .map(|i| {
                    let a = assignments[i];
                    (i, sq_dist(emb.row(i), &centroids[a * d..(a + 1) * d]))
                })
                .fold(None, |best: Option<(usize, f64)>, (i, dist)| match best {
                    Some((_, bd)) if bd >= dist => best,
                    _ => Some((i, dist)),
                });
            if let Some((i, _)) = far {
                counts[assignments[i]] -= 1;
                counts[c] = 1;
                centroids[c * d..(c + 1) * d].copy_from_slice(emb.row(i));
            }
        }
        let (next, next_inertia) = assign(emb, &centroids, k);
        history.push(next_inertia);
        inertia = next_inertia;
        if next == assignments {
            break;
        }
        assignments = next;
    }
    Ok(ClusterModel { centroids, dim: d, assignments, inertia, inertia_history: history, iterations })
}

/// Index of the member of each cluster nearest its centroid, ties to the lowest index.
/// A cluster left without members takes the nearest point not already selected.
pub fn nearest_members(emb: &EmbeddingSet, model: &ClusterModel) -> Vec<usize> {
    let k = model.k();
    let mut best: Vec<Option<(usize, f64)>> = vec![None; k];
    for (i, &c) in model.assignments.iter().enumerate() {
        let dist = sq_dist(emb.row(i), model.centroid(c));
        if best[c].is_none_or(|(_, bd)| dist < bd) {
            best[c] = Some((i, dist));
        }
    }
    let mut taken: BTreeSet<usize> = best.iter().flatten().map(|(i, _)| *i).collect();
    (0..k)
        .map(|c| match best[c] {
            Some((i, _)) => i,
            None => {
                let i = (0..emb.len())
                    .filter(|i| !taken.contains(i))
                    .min_by(|&a, &b| {
                        sq_dist(emb.row(a), model.centroid(c)).total_cmp(&sq_dist(emb.row(b), model.centroid(c)))
                    })
                    .expect("k <= n");
                taken.insert(i);
                i
            }
        })
        .collect()
}

/// Clusters `emb` into `k` groups and keeps the member nearest each centroid.
pub fn select_coreset(emb: &EmbeddingSet, k: usize, seed: u64) -> Result<Vec<String>> {
    let model = kmeans(emb, k, seed, DEFAULT_KMEANS_ITERS)?;
    Ok(nearest_members(emb, &model).into_iter().map(|i| emb.ids[i].clone()).collect())
}

/// Image feature extractor. Images are `[3, H, W]` in `[-1, 1]`.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, item: &str, image: &Tensor<f32>) -> Result<Vec<f64>>;
}

/// Mean of per-image embeddings.
pub fn concept_embedding(images: &[(String, Tensor<f32>)], extractor: &dyn Embedder) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::Clustering("concept has no images".into()));
    }
    let mut acc = vec![0.0; extractor.dim()];
    for (id, img) in images {
        let e = extractor.embed(id, img)?;
        if e.len() != acc.len() {
            return Err(Error::Extractor {
                item: id.clone(),
                message: format!("expected {} values, got {}", acc.len(), e.len()),
            });
        }
        acc.iter_mut().zip(&e).for_each(|(a, x)| *a += x);
    }
    let n = images.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

#[derive(Clone, Debug)]
pub struct ConceptImages {
    pub name: String,
    pub images: Vec<(String, Tensor<f32>)>,
}

/// Picks `k` representative concepts by clustering their mean embeddings.
pub fn select_base_concepts(
    concepts: &[ConceptImages],
    k: usize,
    extractor: &dyn Embedder,
    seed: u64,
) -> Result<Vec<String>> {
    let mut ids = Vec::with_capacity(concepts.len());
    let mut vecs = Vec::with_capacity(concepts.len());
    for c in concepts {
        ids.push(c.name.clone());
        vecs.push(concept_embedding(&c.images, extractor)?);
    }
    select_coreset(&EmbeddingSet::new(ids, vecs)?, k, seed)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedderKind {
    ToyPixels,
    /// Runs `command` with a PNG path appended; stdout must be a JSON array of numbers.
    External { command: Vec<String>, dim: usize },
}

pub fn builtin_embedder(kind: &EmbedderKind, cache_dir: Option<PathBuf>) -> Result<Box<dyn Embedder>> {
    match kind {
        EmbedderKind::ToyPixels => Ok(Box::new(ToyPixels)),
        EmbedderKind::External { command, dim } => {
            let cache_dir = cache_dir
                .ok_or_else(|| Error::Config("external embedder needs a cache directory (E2GAN_CACHE_DIR)".into()))?;
            Ok(Box::new(ExternalEmbedder::new(command.clone(), *dim, cache_dir)?))
        }
    }
}

pub const TOY_GRID: usize = 4;
pub const TOY_PIXELS_DIM: usize = 3 + 3 * TOY_GRID * TOY_GRID;

/// Per-channel means followed by per-channel means of each cell of a 4x4 grid.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyPixels;

impl Embedder for ToyPixels {
    fn dim(&self) -> usize {
        TOY_PIXELS_DIM
    }

    fn embed(&self, item: &str, image: &Tensor<f32>) -> Result<Vec<f64>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] < TOY_GRID || s[2] < TOY_GRID {
            return Err(Error::Extractor { item: item.into(), message: format!("expected [3, H>=4, W>=4], got {s:?}") });
        }
        let (h, w) = (s[1], s[2]);
        let px = |c: usize, y: usize, x: usize| image.data()[(c * h + y) * w + x] as f64;
        let mut out = Vec::with_capacity(TOY_PIXELS_DIM);
        for c in 0..3 {
            let sum: f64 = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| px(c, y, x)).sum();
            out.push(sum / (h * w) as f64);
        }
        for c in 0..3 {
            for gy in 0..TOY_GRID {
                for gx in 0..TOY_GRID {
                    let (y0, y1) = (gy * h / TOY_GRID, (gy + 1) * h / TOY_GRID);
                    let (x0, x1) = (gx * w / TOY_GRID, (gx + 1) * w / TOY_GRID);
                    let mut sum = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            sum += px(c, y, x);
                        }
                    }
                    out.push(sum / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        Ok(out)
    }
}

/// Delegates to an external command and caches vectors on disk by image content hash.
#[derive(Clone, Debug)]
pub struct ExternalEmbedder {
    command: Vec<String>,
    dim: usize,
    cache_dir: PathBuf,
}

impl ExternalEmbedder {
    pub fn new(command: Vec<String>, dim: usize, cache_dir: PathBuf) -> Result<Self> {
        if command.is_empty() {
            return Err(Error::Config("external embedder command is empty".into()));
        }
        std::fs::create_dir_all(&cache_dir).map_err(|e| Error::io(&cache_dir, e))?;
        Ok(Self { command, dim, cache_dir })
    }

    pub fn content_hash(image: &Tensor<f32>) -> String {
        let mut h = Sha256::new();
        for d in image.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(image.to_le_bytes());
        hex::encode(h.finalize())
    }

    fn parse(&self, item: &str, text: &str) -> Result<Vec<f64>> {
        let v: Vec<f64> = serde_json::from_str(text.trim())
            .map_err(|e| Error::Extractor { item: item.into(), message: format!("unparseable output: {e}") })?;
        if v.len() != self.dim || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Extractor {
                item: item.into(),
                message: format!("expected {} finite values, got {}", self.dim, v.len()),
            });
        }
        Ok(v)
    }
}

impl Embedder for ExternalEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, item: &str, image: &Tensor<f32>) -> Result<Vec<f64>> {
        let key = Self::content_hash(image);
        let cached = self.cache_dir.join(format!("{key}.json"));
        if let Ok(text) = std::fs::read_to_string(&cached) {
            return self.parse(item, &text);
        }
        let scratch = tempfile::Builder::new()
            .suffix(".png")
            .tempfile_in(&self.cache_dir)
            .map_err(|e| Error::io(&self.cache_dir, e))?;
        crate::dataio::write_png(scratch.path(), image)?;
        let output = Command::new(&self.command[0])
            .args(&self.command[1..])
            .arg(scratch.path())
            .output()
            .map_err(|e| Error::Extractor { item: item.into(), message: format!("cannot run {}: {e}", self.command[0]) })?;
        if !output.status.success() {
            return Err(Error::Extractor {
                item: item.into(),
                message: format!("{} exited with {}: {}", self.command[0], output.status, String::from_utf8_lossy(&output.stderr).trim()),
            });
        }
        let text = String::from_utf8_lossy(&output.stdout).into_owned();
        let v = self.parse(item, &text)?;
        crate::dataio::write_atomic(&cached, serde_json::to_string(&v)?.as_bytes())?;
        Ok(v)
    }
}
