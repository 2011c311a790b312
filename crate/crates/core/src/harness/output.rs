//! Output directory handling and the run manifest.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::sim::{CellFailure, RNG_ID};
use crate::error::{Error, Result};

/// Provenance of one CLI run. Only this file carries timestamps, so the data
/// files of two runs with the same config compare byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub rng: String,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub failures: Vec<CellFailure>,
    pub outputs: Vec<String>,
    pub started_unix_seconds: u64,
    pub wall_clock_seconds: f64,
}

/// Writes files into one directory and remembers their names.
pub struct OutputDir {
    root: PathBuf,
    written: Vec<String>,
    started: Instant,
    started_unix: u64,
}

impl OutputDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self {
            root,
            written: Vec::new(),
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.written.push(name.to_string());
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    /// Renders CSV through `f` into memory, then writes it.
    pub fn write_csv(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<PathBuf> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write_bytes(name, &buf)
    }

    pub fn finish(mut self, command: &str, cfg: &ExperimentConfig, failures: Vec<CellFailure>) -> Result<Manifest> {
        let mut outputs = self.written.clone();
        outputs.push("manifest.json".into());
        let manifest = Manifest {
            command: command.to_string(),
            version: crate::VERSION.to_string(),
            rng: RNG_ID.to_string(),
            config_sha256: cfg.sha256()?,
            seeds: cfg.seeds.clone(),
            failures,
            outputs,
            started_unix_seconds: self.started_unix,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        self.write_json("manifest.json", &manifest)?;
        Ok(manifest)
    }
}
