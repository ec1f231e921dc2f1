//! Config files and `run.json` provenance records.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_FILE: &str = "run.json";
const TOOLKIT: &str = "hss";

/// What a command ran with. Passing the file back as `--config` re-runs
/// the command with the same resolved configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub toolkit: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
}

fn read_value(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path).with_context(|| format!("{}: cannot read config", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("{}: not valid JSON", path.display()))?;
    // A run record carries the resolved config one level down.
    if value.get("toolkit").and_then(|t| t.as_str()) == Some(TOOLKIT) {
        if let Some(inner) = value.get("config") {
            return Ok(inner.clone());
        }
    }
    Ok(value)
}

/// Parses `path` as `T`; the error names the file and the offending field.
pub fn load_required<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let value = read_value(path)?;
    serde_json::from_value(value).with_context(|| format!("{}: invalid config", path.display()))
}

/// Like [`load_required`], falling back to `T::default()` without a file.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => load_required(p),
        None => Ok(T::default()),
    }
}

pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

pub fn write_run<T: Serialize>(
    dir: &Path,
    command: &str,
    seed: Option<u64>,
    config: &T,
    inputs: &[&Path],
) -> Result<()> {
    let record = RunRecord {
        toolkit: TOOLKIT.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        seed,
        config_sha256: config_hash(config)?,
        config: serde_json::to_value(config)?,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
    };
    fs::create_dir_all(dir).with_context(|| format!("{}: cannot create directory", dir.display()))?;
    let path = dir.join(RUN_FILE);
    fs::write(&path, serde_json::to_string_pretty(&record)?)
        .with_context(|| format!("{}: cannot write", path.display()))
}
