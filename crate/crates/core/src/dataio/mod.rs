//! Datasets, manifests, checkpoints and synthetic paired tasks.

mod checkpoint;
mod dataset;
mod synth;

use std::io::Write;
use std::path::Path;

pub use checkpoint::{
    apply_delta, load_checkpoint, save_checkpoint, Checkpoint, CheckpointKind, CheckpointMeta, CHECKPOINT_MAGIC,
    FORMAT_VERSION,
};
pub use dataset::{
    load_concept_dataset, load_image, read_manifest, split_indices, text_embedding, write_concept_dataset, write_png,
    write_subset_manifest, ConceptDatasetManifest, ConceptRecord, LoadOptions, PairEntry, PairedImage, Splits,
    TEST_FRACTION, VAL_FRACTION,
};
pub use synth::{
    box_blur, hue_shift, mean_luminance, posterize, random_source, synth_paired_task, SynthTask, HUE_SHIFT_DEGREES,
    LUMA, POSTERIZE_LEVELS,
};

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
