use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use asda_core::dataset::write_json;
use asda_core::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
const LOCK_FILE: &str = ".lock";

/// Provenance record written into every artifact directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_hash: Option<String>,
    /// Split name to content hash.
    pub data_hashes: BTreeMap<String, String>,
    /// `v<crate version>-g<digest of config and data hashes>`.
    pub artifact_version: String,
    pub seeds: Vec<u64>,
    pub started: String,
    pub finished: String,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: Option<String>, data_hashes: BTreeMap<String, String>) -> Self {
        let mut h = Sha256::new();
        h.update(config_hash.as_deref().unwrap_or("").as_bytes());
        for (k, v) in &data_hashes {
            h.update(k.as_bytes());
            h.update(v.as_bytes());
        }
        let digest = hex::encode(h.finalize());
        RunManifest {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            artifact_version: format!("v{}-g{}", env!("CARGO_PKG_VERSION"), &digest[..7]),
            config_hash,
            data_hashes,
            seeds: Vec::new(),
            started: timestamp(),
            finished: String::new(),
            outputs: Vec::new(),
        }
    }

    pub fn finish(mut self, dir: &Path, outputs: Vec<PathBuf>) -> Result<(), Error> {
        self.finished = timestamp();
        self.outputs = outputs;
        write_json(&dir.join(RUN_MANIFEST_FILE), &self)
    }
}

pub fn timestamp() -> String {
    chrono::Utc::now().format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

/// `<root>/<timestamp>-<first 12 hex digits of hash>`.
pub fn fresh_run_dir(root: &Path, hash: &str) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
    root.join(format!("{stamp}-{}", &hash[..hash.len().min(12)]))
}

/// Exclusive claim on an artifact directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
    _file: File,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, Error> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(file) => Ok(DirLock { path, _file: file }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::io(
                &path,
                std::io::Error::new(e.kind(), "directory is in use by another command"),
            )),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_lock_on_a_directory_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let first = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(first);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn artifact_version_depends_only_on_hashes() {
        let data: BTreeMap<String, String> = [("a".to_string(), "00".to_string())].into();
        let a = RunManifest::new("train", Some("x".into()), data.clone());
        let b = RunManifest::new("eval", Some("x".into()), data);
        assert_eq!(a.artifact_version, b.artifact_version);
        assert!(a.artifact_version.starts_with("v0.1.0-g"));
        let c = RunManifest::new("train", Some("y".into()), BTreeMap::new());
        assert_ne!(a.artifact_version, c.artifact_version);
    }
}
