//! Run manifests: a JSON record written next to every artifact with enough
//! information to reproduce it bit for bit — the fully resolved config, all
//! seed ranges, the dataset checksum, code version, and final metrics.

use crate::config::RunConfig;
use crate::util::fnv1a64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// Which command produced this artifact.
    pub command: String,
    /// Crate version that ran.
    pub version: String,
    /// Fully resolved config (TOML text) — feed it back in to reproduce.
    pub config_toml: String,
    pub master_seed: u64,
    /// Training scene seeds, half-open range.
    pub data_seeds: [u64; 2],
    /// Evaluation episode seeds, half-open range.
    pub eval_seeds: [u64; 2],
    /// Hex checksum of the dataset file consumed or produced, if any.
    pub dataset_checksum: Option<String>,
    /// Single-threaded by contract; recorded so a future parallel mode is
    /// visible in provenance.
    pub threads: usize,
    pub started_unix: u64,
    pub wall_seconds: f64,
    /// Scalar results (losses, success rates, medians).
    pub metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_toml: cfg.to_toml().unwrap_or_default(),
            master_seed: cfg.train.master_seed,
            data_seeds: [cfg.data.seed0, cfg.data.seed0 + cfg.data.demos as u64],
            eval_seeds: [
                cfg.eval.seed_base,
                cfg.eval.seed_base + cfg.eval.episodes as u64,
            ],
            dataset_checksum: None,
            threads: 1,
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            wall_seconds: 0.0,
            metrics: BTreeMap::new(),
        }
    }

    /// Record the checksum of a file this run read or wrote.
    pub fn with_dataset(mut self, path: &Path) -> Result<Self, ManifestError> {
        let bytes = std::fs::read(path)
            .map_err(|e| ManifestError::Io { path: path.display().to_string(), source: e })?;
        self.dataset_checksum = Some(format!("{:016x}", fnv1a64(&bytes)));
        Ok(self)
    }

    /// Write as `<out_dir>/manifest-<command>.json`, creating directories.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf, ManifestError> {
        std::fs::create_dir_all(out_dir)
            .map_err(|e| ManifestError::Io { path: out_dir.display().to_string(), source: e })?;
        let path = out_dir.join(format!("manifest-{}.json", self.command));
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text)
            .map_err(|e| ManifestError::Io { path: path.display().to_string(), source: e })?;
        Ok(path)
    }
}
