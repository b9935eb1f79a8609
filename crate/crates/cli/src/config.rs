//! Run configuration: one TOML file holding every knob of the pipeline.
//!
//! Every section and field is optional; omitted values take the defaults listed in
//! `README.md`. Unknown keys are rejected so that typos fail loudly. Relative paths are
//! resolved against the directory of the config file, and the fully resolved
//! configuration is written next to each command's outputs.

use std::path::{Path, PathBuf};

use e2gan_core::lora::{SAMPLING_THRESHOLDS, TB_THRESHOLD};
use e2gan_core::model::{DiscriminatorConfig, GeneratorConfig};
use e2gan_core::rank_search::DEFAULT_EPOCHS_PER_ROUND;
use e2gan_core::selection::{EmbedderKind, DEFAULT_CORESET_K, DEFAULT_KMEANS_ITERS};
use e2gan_core::trainer::{LossConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; it overrides `train.seed` and seeds selection and evaluation.
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorSection,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub search: SearchSection,
    pub selection: SelectionSection,
    pub data: DataSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorSection {
    pub base_channels: usize,
}

impl Default for DiscriminatorSection {
    fn default() -> Self {
        Self { base_channels: DiscriminatorConfig::default().base_channels }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    /// Mean L1 on the probe concept's test split.
    #[default]
    L1,
    /// Fréchet distance between generated and reference test images.
    Fid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub epochs_per_round: usize,
    /// Rank ceilings by sampling depth, outermost first (mirrored on both stacks).
    pub sampling_thresholds: [usize; 4],
    pub tb_threshold: usize,
    pub scorer: ScorerKind,
    /// Probe concept manifests.
    pub probe_concepts: Vec<PathBuf>,
    /// Replaces training with a fixed score per round (harness check; no base needed).
    pub scripted_scores: Option<Vec<f64>>,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            epochs_per_round: DEFAULT_EPOCHS_PER_ROUND,
            sampling_thresholds: SAMPLING_THRESHOLDS,
            tb_threshold: TB_THRESHOLD,
            scorer: ScorerKind::L1,
            probe_concepts: Vec::new(),
            scripted_scores: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    pub embedder: EmbedderKind,
    pub k: usize,
    pub kmeans_iters: usize,
    pub l2_normalize: bool,
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self { embedder: EmbedderKind::ToyPixels, k: DEFAULT_CORESET_K, kmeans_iters: DEFAULT_KMEANS_ITERS, l2_normalize: false }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Concept manifests used for base training when `--concepts` is not given.
    pub concepts: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Also report the Fréchet distance (needs at least two evaluated images).
    pub fid: bool,
    /// Write every generated image as PNG.
    pub save_images: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { fid: true, save_images: false }
    }
}

impl RunConfig {
    /// Reads, resolves and validates a config file; `None` gives the defaults.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            let cfg = Self::default().resolved(Path::new("."));
            cfg.validate()?;
            return Ok(cfg);
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let parsed: Self =
            toml::from_str(&text).map_err(|e| CliError::Config { path: path.to_path_buf(), message: e.to_string() })?;
        if parsed.train.seed != 0 && parsed.train.seed != parsed.seed {
            return Err(CliError::Config {
                path: path.to_path_buf(),
                message: "set the seed at the top level (`seed = ...`), not in [train]".into(),
            });
        }
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let cfg = parsed.resolved(base);
        cfg.validate().map_err(|e| CliError::Config { path: path.to_path_buf(), message: e.to_string() })?;
        Ok(cfg)
    }

    fn resolved(mut self, base: &Path) -> Self {
        self.train.seed = self.seed;
        let absolutize = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.data.concepts.iter_mut().for_each(absolutize);
        self.search.probe_concepts.iter_mut().for_each(absolutize);
        self
    }

    pub fn validate(&self) -> e2gan_core::Result<()> {
        self.generator.validate()?;
        self.disc_config().validate()?;
        self.train.validate(true)?;
        self.loss.validate()?;
        let fail = |m: &str| Err(e2gan_core::Error::Config(m.to_string()));
        if self.search.epochs_per_round == 0 {
            return fail("search.epochs_per_round must be at least 1");
        }
        if self.search.sampling_thresholds.contains(&0) || self.search.tb_threshold == 0 {
            return fail("search thresholds must be at least 1");
        }
        if matches!(&self.search.scripted_scores, Some(s) if s.is_empty()) {
            return fail("search.scripted_scores must not be empty");
        }
        if self.selection.k == 0 || self.selection.kmeans_iters == 0 {
            return fail("selection.k and selection.kmeans_iters must be at least 1");
        }
        Ok(())
    }

    pub fn disc_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig::for_generator(&self.generator, self.discriminator.base_channels)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Internal(format!("cannot render config: {e}")))
    }
}
