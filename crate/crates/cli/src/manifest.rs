//! Artifact writing and the per-run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    pub path: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: &'a RunConfig,
    inputs: &'a [Artifact],
    artifacts: &'a [Artifact],
}

pub fn sha256_hex(data: &[u8]) -> String {
    format!("{:x}", Sha256::digest(data))
}

/// Collects artifacts written to the output directory.
pub struct Outputs {
    dir: PathBuf,
    artifacts: Vec<Artifact>,
    inputs: Vec<Artifact>,
}

impl Outputs {
    pub fn new(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|source| CliError::File {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
            inputs: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, data: &[u8]) -> CliResult<()> {
        let path = self.dir.join(name);
        fs::write(&path, data).map_err(|source| CliError::File {
            path: path.display().to_string(),
            source,
        })?;
        self.artifacts.push(Artifact {
            path: name.to_string(),
            bytes: data.len(),
            sha256: sha256_hex(data),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut data = serde_json::to_vec_pretty(value)?;
        data.push(b'\n');
        self.write(name, &data)
    }

    /// Writes through a closure that renders into a buffer.
    pub fn write_with<F>(&mut self, name: &str, render: F) -> CliResult<()>
    where
        F: FnOnce(&mut Vec<u8>) -> coherit::Result<()>,
    {
        let mut buf = Vec::new();
        render(&mut buf)?;
        self.write(name, &buf)
    }

    pub fn record_input(&mut self, path: &Path, data: &[u8]) {
        self.inputs.push(Artifact {
            path: path.display().to_string(),
            bytes: data.len(),
            sha256: sha256_hex(data),
        });
    }

    pub fn finish(mut self, command: &str, config: &RunConfig) -> CliResult<()> {
        let manifest = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: config.simulation.seed,
            config,
            inputs: &self.inputs,
            artifacts: &self.artifacts,
        };
        let mut data = serde_json::to_vec_pretty(&manifest)?;
        data.push(b'\n');
        let path = self.dir.join("run_manifest.json");
        fs::write(&path, data).map_err(|source| CliError::File {
            path: path.display().to_string(),
            source,
        })?;
        self.artifacts.clear();
        Ok(())
    }
}

pub fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|source| CliError::File {
        path: path.display().to_string(),
        source,
    })
}
