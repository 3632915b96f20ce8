//! Run manifests: what a command read, what it wrote and under which config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{file_sha256, write_atomic};

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    /// Hash of the config sections this command's outputs depend on.
    pub stage_hash: String,
    /// Path to SHA-256 of every file read.
    pub inputs: BTreeMap<String, String>,
    /// Path to SHA-256 of every file written.
    pub artifacts: BTreeMap<String, String>,
    pub timing_seconds: f64,
}

fn hash_all(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), file_sha256(p)?)))
        .collect()
}

impl RunManifest {
    pub fn new(
        command: &str,
        config_hash: String,
        stage_hash: String,
        inputs: &[PathBuf],
        artifacts: &[PathBuf],
        timing_seconds: f64,
    ) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            config_hash,
            stage_hash,
            inputs: hash_all(inputs)?,
            artifacts: hash_all(artifacts)?,
            timing_seconds,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).at_path(path))?;
        serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()).at_path(path))
    }

    /// Refuses an upstream artifact recorded under a different stage hash
    /// unless `allow_mismatch` is set, in which case it only warns.
    pub fn check_upstream(path: &Path, expected_stage_hash: &str, allow_mismatch: bool) -> Result<()> {
        let detail = match Self::load(path) {
            Ok(m) if m.stage_hash == expected_stage_hash => return Ok(()),
            Ok(m) => format!("recorded {}, expected {}", short(&m.stage_hash), short(expected_stage_hash)),
            Err(e) if !path.exists() => format!("no manifest ({e})"),
            Err(e) => return Err(e),
        };
        if allow_mismatch {
            log::warn!("{}: config mismatch ignored: {detail}", path.display());
            Ok(())
        } else {
            Err(Error::StaleArtifact {
                path: path.to_path_buf(),
                detail,
            })
        }
    }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}
