//! Output staging, strict JSON configs and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "run_manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// A sibling directory that becomes `target` only on success, so failed runs
/// leave no partial output.
pub struct Staging {
    pub dir: PathBuf,
    target: PathBuf,
}

impl Staging {
    pub fn new(target: &Path) -> Result<Staging> {
        if target.exists() {
            return Err(CliError::data(format!("output {} already exists", target.display())));
        }
        let name = target
            .file_name()
            .ok_or_else(|| CliError::config(format!("bad output path {}", target.display())))?
            .to_string_lossy();
        let dir = target.with_file_name(format!(".{name}.partial"));
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Staging { dir, target: target.to_path_buf() })
    }

    pub fn commit(self) -> Result<()> {
        fs::rename(&self.dir, &self.target).map_err(|e| CliError::io(&self.target, e))?;
        std::mem::forget(self);
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.dir);
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(|e| CliError::io(dir, e))?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("below root");
            let rel: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            out.push((rel.join("/"), p));
        }
    }
    Ok(())
}

/// Checksums of every file under `root`, keyed by relative path.
pub fn checksums(root: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    let mut out = BTreeMap::new();
    for (rel, path) in files {
        if rel == MANIFEST_FILE {
            continue;
        }
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        out.insert(rel, sha256_hex(&bytes));
    }
    Ok(out)
}

/// Writes `run_manifest.json` describing the files currently in `dir`.
pub fn write_manifest(dir: &Path, command: &str, config: &serde_json::Value, seed: Option<u64>) -> Result<()> {
    let config_bytes = serde_json::to_vec(config).expect("config serializes");
    let manifest = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config": config,
        "config_sha256": sha256_hex(&config_bytes),
        "artifacts": checksums(dir)?,
    });
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

/// Sorted immediate subdirectories of `root`.
pub fn subdirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| CliError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

pub fn dir_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}
