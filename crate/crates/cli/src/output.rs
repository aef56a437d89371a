//! Staged output directories and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    /// Input path to sha256 of its bytes; directories list each file.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

pub fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn digest_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Digests of a file, or of every regular file directly inside a directory.
pub fn digest_inputs(paths: &[&Path]) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for p in paths {
        if p.is_dir() {
            for f in list_files(p, None)? {
                out.insert(f.display().to_string(), digest_file(&f)?);
            }
        } else {
            out.insert(p.display().to_string(), digest_file(p)?);
        }
    }
    Ok(out)
}

/// Sorted regular files in `dir`, optionally filtered by extension.
pub fn list_files(dir: &Path, ext: Option<&str>) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.is_file() && ext.is_none_or(|x| path.extension().is_some_and(|e| e == x)) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Files are written under `<out>.partial` and moved into place only by
/// [`Staging::commit`]. Dropping an uncommitted staging removes it.
pub struct Staging {
    target: PathBuf,
    dir: PathBuf,
    files: Vec<String>,
    committed: bool,
}

impl Staging {
    pub fn new(target: &Path) -> Result<Self, CliError> {
        let mut name = target.file_name().ok_or_else(|| CliError::Usage(format!("bad output path `{}`", target.display())))?.to_os_string();
        name.push(".partial");
        let dir = target.with_file_name(name);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Staging { target: target.to_path_buf(), dir, files: Vec::new(), committed: false })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Core(e.into()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Runs a writer against an in-memory buffer and stores the result.
    pub fn write_with(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> pedsafe_core::Result<()>) -> Result<(), CliError> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    pub fn commit(mut self, mut manifest: RunManifest) -> Result<PathBuf, CliError> {
        manifest.outputs = self.files.clone();
        manifest.finished_unix = now_unix();
        self.write_json(MANIFEST, &manifest)?;
        if self.target.exists() {
            fs::remove_dir_all(&self.target).map_err(|e| CliError::io(&self.target, e))?;
        }
        fs::rename(&self.dir, &self.target).map_err(|e| CliError::io(&self.target, e))?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}
