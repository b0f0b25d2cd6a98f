//! Run-directory manifest: SHA-256 of the config and of every artifact written.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    /// Run-relative path to digest.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?))
}

impl Manifest {
    pub fn load_or_default(run: &Path) -> CliResult<Self> {
        let path = run.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }

    /// Hashes `paths` (which must live under `run`) into the manifest and rewrites it.
    pub fn record(run: &Path, config_sha256: &str, paths: &[std::path::PathBuf]) -> CliResult<Self> {
        let mut m = Self::load_or_default(run)?;
        m.config_sha256 = config_sha256.to_string();
        for p in paths {
            let rel = p.strip_prefix(run).unwrap_or(p).to_string_lossy().replace('\\', "/");
            m.files.insert(rel, sha256_file(p)?);
        }
        let mut text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        fs::write(run.join(MANIFEST_FILE), text)?;
        Ok(m)
    }
}
