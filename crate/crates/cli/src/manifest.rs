//! Run manifests: what went in, what came out, and their SHA-256 digests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::exit::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// The files behind a volume path: the path itself for NIfTI, payload and
/// sidecar for the raw format.
pub fn backing_files(path: &Path) -> Vec<PathBuf> {
    if protoreg::io::is_nifti(path) {
        vec![path.to_path_buf()]
    } else {
        let (payload, sidecar) = protoreg::io::raw::raw_paths(path);
        vec![payload, sidecar]
    }
}

pub fn file_record(role: &str, path: &Path) -> CliResult<FileRecord> {
    Ok(FileRecord {
        role: role.to_string(),
        path: path.to_path_buf(),
        sha256: sha256_file(path)?,
    })
}

/// Records for a volume path, one per backing file.
pub fn records(role: &str, path: &Path) -> CliResult<Vec<FileRecord>> {
    let files = backing_files(path);
    let many = files.len() > 1;
    files
        .into_iter()
        .enumerate()
        .map(|(i, f)| {
            let role = match (many, i) {
                (true, 1) => format!("{role}.sidecar"),
                _ => role.to_string(),
            };
            Ok(FileRecord {
                role,
                sha256: sha256_file(&f)?,
                path: f,
            })
        })
        .collect()
}

/// Writes to a sibling temp file, syncs, then renames over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> CliResult<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(contents).map_err(|e| CliError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::io(path, e))
    }

    /// Records whose file no longer hashes to the stored digest.
    pub fn stale(&self) -> CliResult<Vec<&FileRecord>> {
        let mut out = Vec::new();
        for r in self.inputs.iter().chain(&self.outputs) {
            if !r.path.exists() || sha256_file(&r.path)? != r.sha256 {
                out.push(r);
            }
        }
        Ok(out)
    }
}
