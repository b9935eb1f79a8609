//! Single-file tensor container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes          | content                                               |
//! |----------------|-------------------------------------------------------|
//! | 8              | magic `E2GCKPT\0`                                     |
//! | 4              | format version (`u32`)                                |
//! | 8              | header length `n` (`u64`)                             |
//! | n              | JSON header: kind, metadata, tensor table             |
//! | ...            | raw `f32` blobs, concatenated in name order           |
//! | 32             | SHA-256 of every preceding byte                       |
//!
//! Each tensor-table entry carries `name`, `dtype`, `shape`, `offset` and `length` (into
//! the blob section) and the SHA-256 of its blob.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::lora::{AdaptedGenerator, RankSpec};
use crate::model::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"E2GCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const GEN_PREFIX: &str = "generator.";
const DISC_PREFIX: &str = "discriminator.";
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    BaseFull,
    ConceptDelta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub generator: GeneratorConfig,
    pub discriminator: Option<DiscriminatorConfig>,
    pub rank_spec: Option<RankSpec>,
    pub concept: Option<String>,
    pub prompt: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
    sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: CheckpointKind,
    metadata: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    /// Full base model: generator and, optionally, discriminator weights.
    pub fn base(gen: &Generator<f32>, disc: Option<&Discriminator<f32>>) -> Self {
        let mut tensors = BTreeMap::new();
        for (k, t) in gen.params().iter() {
            tensors.insert(format!("{GEN_PREFIX}{k}"), t.clone());
        }
        if let Some(d) = disc {
            for (k, t) in d.params().iter() {
                tensors.insert(format!("{DISC_PREFIX}{k}"), t.clone());
            }
        }
        Self {
            kind: CheckpointKind::BaseFull,
            meta: CheckpointMeta {
                generator: gen.config().clone(),
                discriminator: disc.map(|d| d.config().clone()),
                rank_spec: None,
                concept: None,
                prompt: None,
            },
            tensors,
        }
    }

    /// Concept delta: adapter factors, rank spec and prompt only.
    pub fn delta(adapted: &AdaptedGenerator<f32>, concept: &str, prompt: &str) -> Self {
        Self {
            kind: CheckpointKind::ConceptDelta,
            meta: CheckpointMeta {
                generator: adapted.base().config().clone(),
                discriminator: None,
                rank_spec: Some(adapted.spec().clone()),
                concept: Some(concept.to_string()),
                prompt: Some(prompt.to_string()),
            },
            tensors: adapted.factors().iter().map(|(k, t)| (k.clone(), t.clone())).collect(),
        }
    }

    fn prefixed(&self, prefix: &str) -> ParamStore<f32> {
        ParamStore::from_map(
            self.tensors
                .iter()
                .filter_map(|(k, t)| k.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        )
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Compatibility(format!("expected a {kind:?} checkpoint, found {:?}", self.kind)));
        }
        Ok(())
    }

    pub fn generator(&self) -> Result<Generator<f32>> {
        self.expect_kind(CheckpointKind::BaseFull)?;
        Generator::from_params(self.meta.generator.clone(), self.prefixed(GEN_PREFIX))
    }

    pub fn discriminator(&self) -> Result<Option<Discriminator<f32>>> {
        self.expect_kind(CheckpointKind::BaseFull)?;
        match &self.meta.discriminator {
            None => Ok(None),
            Some(cfg) => Discriminator::from_params(cfg.clone(), self.prefixed(DISC_PREFIX)).map(Some),
        }
    }

    /// Number of stored scalar values.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            CheckpointKind::BaseFull => {
                if let Some(bad) = self.tensors.keys().find(|k| !k.starts_with(GEN_PREFIX) && !k.starts_with(DISC_PREFIX)) {
                    return Err(Error::Integrity(format!("unexpected tensor {bad} in base checkpoint")));
                }
            }
            CheckpointKind::ConceptDelta => {
                if let Some(bad) = self.tensors.keys().find(|k| !k.starts_with("lora.")) {
                    return Err(Error::Integrity(format!("delta checkpoint holds non-adapter tensor {bad}")));
                }
                if self.meta.rank_spec.is_none() {
                    return Err(Error::Integrity("delta checkpoint without rank spec".into()));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut blobs = Vec::with_capacity(4 * self.num_elements());
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let bytes = t.to_le_bytes();
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset: blobs.len() as u64,
                length: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
            blobs.extend_from_slice(&bytes);
        }
        let header = serde_json::to_vec(&Header { kind: self.kind, metadata: self.meta.clone(), tensors: entries })?;
        let mut out = Vec::with_capacity(20 + header.len() + blobs.len() + DIGEST_LEN);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blobs);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fixed = CHECKPOINT_MAGIC.len() + 4 + 8;
        if bytes.len() < fixed + DIGEST_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Integrity("not a checkpoint file (bad magic or truncated)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, supported: FORMAT_VERSION });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("file checksum mismatch".into()));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let blob_start = fixed
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Integrity("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&body[fixed..blob_start])
            .map_err(|e| Error::Integrity(format!("unreadable header: {e}")))?;
        let blobs = &body[blob_start..];
        let mut tensors = BTreeMap::new();
        let mut expected_offset = 0u64;
        for e in &header.tensors {
            if e.dtype != "f32" {
                return Err(Error::Integrity(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let count: usize = e.shape.iter().product();
            if e.offset != expected_offset || e.length != 4 * count as u64 {
                return Err(Error::Integrity(format!("{}: inconsistent offset or length", e.name)));
            }
            let end = (e.offset + e.length) as usize;
            if end > blobs.len() {
                return Err(Error::Integrity(format!("{}: blob out of bounds", e.name)));
            }
            let raw = &blobs[e.offset as usize..end];
            if hex::encode(Sha256::digest(raw)) != e.sha256 {
                return Err(Error::Integrity(format!("{}: tensor checksum mismatch", e.name)));
            }
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.insert(e.name.clone(), Tensor::new(&e.shape, data)?);
            expected_offset = end as u64;
        }
        if expected_offset as usize != blobs.len() {
            return Err(Error::Integrity("trailing bytes after tensor blobs".into()));
        }
        let ckpt = Self { kind: header.kind, meta: header.metadata, tensors };
        ckpt.validate()?;
        Ok(ckpt)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Rebuilds the adapted generator described by `delta` on top of `base`.
pub fn apply_delta(base: &Checkpoint, delta: &Checkpoint) -> Result<AdaptedGenerator<f32>> {
    delta.expect_kind(CheckpointKind::ConceptDelta)?;
    if delta.meta.generator != base.meta.generator {
        return Err(Error::Compatibility("delta was trained on a generator with a different configuration".into()));
    }
    let gen = base.generator()?;
    let spec = delta.meta.rank_spec.clone().expect("validated delta has a rank spec");
    AdaptedGenerator::from_parts(gen, spec, ParamStore::from_map(delta.tensors.clone()))
}
