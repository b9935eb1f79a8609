//! Output-directory conventions shared by all commands.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use e2gan_core::dataio::write_atomic;
use e2gan_core::trainer::TrainLog;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, RESOLVED_CONFIG_FILE};
use crate::error::{CliError, CliResult};
use crate::plot;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

/// A command's output directory. Everything a command writes lives under it.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_config(&self, cfg: &RunConfig) -> CliResult<()> {
        self.write_text(RESOLVED_CONFIG_FILE, &cfg.to_toml()?)
    }

    pub fn write_text(&self, name: &str, text: &str) -> CliResult<()> {
        Ok(write_atomic(&self.path(name), text.as_bytes())?)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<()> {
        self.write_text(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    /// Replaces the metrics log with the epochs of `log`, and writes one CSV and chart per
    /// loss column.
    pub fn write_train_log(&self, log: &TrainLog) -> CliResult<()> {
        let metrics = self.path(METRICS_FILE);
        if metrics.exists() {
            std::fs::remove_file(&metrics).map_err(|e| CliError::io(&metrics, e))?;
        }
        log.append_jsonl(&metrics)?;
        let mut csv = csv::Writer::from_writer(Vec::new());
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut rows = vec![["epoch", "iterations", "d_loss", "g_gan", "g_l1", "g_total", "grad_norm_g", "grad_norm_d"].map(String::from)];
        for e in &log.epochs {
            rows.push([
                e.epoch.to_string(),
                e.iterations.to_string(),
                opt(e.d_loss),
                opt(e.g_gan),
                e.g_l1.to_string(),
                e.g_total.to_string(),
                e.grad_norm_g.to_string(),
                opt(e.grad_norm_d),
            ]);
        }
        for row in &rows {
            csv.write_record(row).map_err(csv_error)?;
        }
        self.write_csv("losses.csv", csv)?;
        plot::line_chart(&self.path("loss_g_l1.png"), &log.epochs.iter().map(|e| e.g_l1).collect::<Vec<_>>())?;
        plot::line_chart(&self.path("loss_g_total.png"), &log.epochs.iter().map(|e| e.g_total).collect::<Vec<_>>())?;
        if log.epochs.iter().all(|e| e.d_loss.is_some()) && !log.epochs.is_empty() {
            plot::line_chart(&self.path("loss_d.png"), &log.epochs.iter().filter_map(|e| e.d_loss).collect::<Vec<_>>())?;
        }
        for e in &log.epochs {
            self.append_timing(&format!("epoch {}", e.epoch), Duration::from_secs_f64(e.seconds))?;
        }
        Ok(())
    }

    pub fn write_csv(&self, name: &str, writer: csv::Writer<Vec<u8>>) -> CliResult<()> {
        let bytes = writer.into_inner().map_err(|e| CliError::Internal(format!("csv: {e}")))?;
        Ok(write_atomic(&self.path(name), &bytes)?)
    }

    /// Wall-clock records are kept apart from the metrics so reruns compare byte-equal.
    pub fn append_timing(&self, what: &str, elapsed: Duration) -> CliResult<()> {
        let path = self.path(TIMING_FILE);
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| CliError::io(&path, e))?;
        let line = serde_json::json!({ "what": what, "seconds": elapsed.as_secs_f64() });
        writeln!(f, "{line}").map_err(|e| CliError::io(&path, e))
    }

    pub fn reset_timing(&self) -> CliResult<()> {
        let path = self.path(TIMING_FILE);
        if path.exists() {
            std::fs::remove_file(&path).map_err(|e| CliError::io(&path, e))?;
        }
        Ok(())
    }
}

pub fn csv_error(e: csv::Error) -> CliError {
    CliError::Internal(format!("csv: {e}"))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
