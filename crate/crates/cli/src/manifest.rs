//! Run manifests: what was run, with which settings, on which bytes.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub version: String,
    pub threads: usize,
    pub wall_time_secs: f64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_file(path: &Path) -> Result<FileDigest, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::from(e).at(path))?;
    Ok(FileDigest { path: path.display().to_string(), sha256: sha256_hex(&bytes) })
}

/// Collects inputs and outputs while a command runs.
pub struct Recorder {
    command: String,
    config: serde_json::Value,
    seed: Option<u64>,
    started: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self { command: command.into(), config, seed, started: Instant::now(), inputs: Vec::new(), outputs: Vec::new() }
    }

    pub fn read(&mut self, path: &Path) -> Result<String, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::from(e).at(path))?;
        self.inputs.push(path.to_path_buf());
        Ok(text)
    }

    pub fn write(&mut self, path: &Path, contents: &str) -> Result<(), CliError> {
        std::fs::write(path, contents).map_err(|e| CliError::from(e).at(path))?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    /// Writes `manifest.<command>.json` into `dir`.
    pub fn finish(self, dir: &Path) -> Result<PathBuf, CliError> {
        let manifest = RunManifest {
            command: self.command.clone(),
            config: self.config,
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            threads: rayon::current_num_threads(),
            wall_time_secs: self.started.elapsed().as_secs_f64(),
            inputs: self.inputs.iter().map(|p| digest_file(p)).collect::<Result<_, _>>()?,
            outputs: self.outputs.iter().map(|p| digest_file(p)).collect::<Result<_, _>>()?,
        };
        let path = dir.join(format!("manifest.{}.json", self.command));
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::from(e).at(&path))?;
        Ok(path)
    }
}

pub fn load(path: &Path) -> Result<RunManifest, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::from(e).at(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::validation(e.to_string()).at(path))
}
