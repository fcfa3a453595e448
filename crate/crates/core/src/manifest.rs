//! Append-only run manifests.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<RunConfig>,
    pub seed: Option<u64>,
    pub code_version: String,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<String>,
    pub wall_seconds: f64,
    pub status: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Hashes every regular file under `path` (or `path` itself), sorted by path.
/// Manifest files are skipped since they change with every run.
pub fn hash_inputs(path: &Path) -> Result<Vec<FileHash>> {
    let mut files = Vec::new();
    collect_files(path, &mut files)?;
    files.sort();
    files
        .into_iter()
        .map(|p| {
            Ok(FileHash {
                sha256: sha256_file(&p)?,
                path: p.display().to_string(),
            })
        })
        .collect()
}

fn collect_files(path: &Path, out: &mut Vec<std::path::PathBuf>) -> Result<()> {
    if path.is_dir() {
        for entry in std::fs::read_dir(path).map_err(|e| Error::io(path, e))? {
            let entry = entry.map_err(|e| Error::io(path, e))?;
            collect_files(&entry.path(), out)?;
        }
    } else if path.file_name().is_none_or(|n| n != MANIFEST_FILE) {
        out.push(path.to_path_buf());
    }
    Ok(())
}

pub fn append_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(MANIFEST_FILE);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let line = serde_json::to_string(manifest)?;
    writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
}
