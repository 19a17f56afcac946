//! Byte-level helpers: hashing, atomic writes, JSON reading.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn to_pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serializable value");
    out.push(b'\n');
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_atomic(path, &to_pretty(value))
}

/// Parses JSON; syntax and schema problems are config errors.
pub fn parse_json<T: DeserializeOwned>(path: &Path, bytes: &[u8]) -> CliResult<T> {
    serde_json::from_slice(bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    parse_json(path, &read_bytes(path)?)
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}
