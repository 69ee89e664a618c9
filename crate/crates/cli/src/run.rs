//! Run directories, content-hashed run ids and run records.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vitae_ssl::{Error, Result};

pub const RECORD_FILE: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub command: String,
    pub config: serde_json::Value,
    pub started: String,
    pub finished: String,
    /// Artifact name → path relative to the run directory.
    pub artifacts: BTreeMap<String, PathBuf>,
}

/// First 16 hex digits of SHA-256 over the canonical (key-sorted) JSON of
/// `content`.
pub fn run_id(content: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(content).expect("JSON value serializes");
    hex::encode(Sha256::digest(bytes))[..16].to_string()
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn io(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::MissingFile(path.to_path_buf())
    } else {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
    }
}

pub fn read_record(dir: &Path) -> Option<RunRecord> {
    let text = std::fs::read_to_string(dir.join(RECORD_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

pub fn write_record(dir: &Path, record: &RunRecord) -> Result<()> {
    write_text(&dir.join(RECORD_FILE), &serde_json::to_string_pretty(record)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io(path, e))
}

/// Prepare `dir` for a run: with `force` any previous contents are removed.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if force && dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))
}
