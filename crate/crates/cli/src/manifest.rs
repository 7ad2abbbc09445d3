//! Run manifests: one per command invocation, listing every artifact it
//! wrote with a content hash.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{CliError, CliResult};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub variant: Option<String>,
    pub seeds: Vec<u64>,
    pub code_version: String,
    pub deterministic: bool,
    pub config: Config,
    /// Input files with their hashes.
    pub inputs: Vec<FileEntry>,
    /// Outputs, relative to the manifest's directory.
    pub outputs: Vec<FileEntry>,
    pub wall_clock_s: f64,
}

pub fn sha256_file(path: &Path) -> CliResult<(String, u64)> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

pub fn entry(path: &Path, label: String) -> CliResult<FileEntry> {
    let (sha256, bytes) = sha256_file(path)?;
    Ok(FileEntry { path: label, sha256, bytes })
}

/// Collects written files for a manifest rooted at `root`.
pub struct Outputs {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Full path for `rel`, creating parent directories.
    pub fn path(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.root.join(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        Ok(p)
    }

    pub fn record(&mut self, path: &Path) {
        if !self.files.iter().any(|f| f == path) {
            self.files.push(path.to_path_buf());
        }
    }

    pub fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let p = self.path(rel)?;
        fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))?;
        self.record(&p);
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> CliResult<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_bytes(rel, text.as_bytes())
    }

    pub fn entries(&self) -> CliResult<Vec<FileEntry>> {
        let mut out: Vec<FileEntry> = self
            .files
            .iter()
            .map(|f| {
                let rel = f.strip_prefix(&self.root).unwrap_or(f);
                entry(f, rel.to_string_lossy().replace('\\', "/"))
            })
            .collect::<CliResult<_>>()?;
        out.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(out)
    }
}
