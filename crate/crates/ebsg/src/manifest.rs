//! Run manifests: enough to rerun a command and check its outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliResult;
use crate::files::{read_bytes, sha256_hex, to_pretty, write_json};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    /// Arguments after the program name.
    pub argv: Vec<String>,
    /// Hash of the effective configuration (after overrides).
    pub config_sha256: String,
    pub seed: u64,
    pub artifacts: Vec<Artifact>,
}

/// Hash of a config's canonical JSON form.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    sha256_hex(&to_pretty(cfg))
}

impl Manifest {
    pub fn new(command: &str, argv: &[String], config_sha256: String, seed: u64) -> Self {
        Self { command: command.into(), argv: argv.to_vec(), config_sha256, seed, artifacts: Vec::new() }
    }

    pub fn add(&mut self, path: &Path, bytes: &[u8]) {
        self.artifacts.push(Artifact { path: path.to_path_buf(), sha256: sha256_hex(bytes) });
    }

    pub fn add_file(&mut self, path: &Path) -> CliResult<()> {
        let bytes = read_bytes(path)?;
        self.add(path, &bytes);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        write_json(path, self)
    }

    /// Artifacts whose current bytes differ from the recorded hash.
    pub fn mismatches(&self) -> Vec<PathBuf> {
        self.artifacts
            .iter()
            .filter(|a| read_bytes(&a.path).map(|b| sha256_hex(&b) != a.sha256).unwrap_or(true))
            .map(|a| a.path.clone())
            .collect()
    }
}
