//! Staged outputs and run manifests.
//!
//! Commands compute everything in memory first and only touch the output
//! directory once they have succeeded, so a failing run leaves no files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

pub struct Run {
    command: &'static str,
    config: Value,
    seeds: Value,
    inputs: Vec<FileDigest>,
    files: Vec<(PathBuf, Vec<u8>)>,
    notes: Value,
}

impl Run {
    pub fn new(command: &'static str) -> Self {
        Run {
            command,
            config: Value::Null,
            seeds: json!({}),
            inputs: Vec::new(),
            files: Vec::new(),
            notes: json!({}),
        }
    }

    pub fn config(&mut self, config: &impl Serialize) -> Result<()> {
        self.config = serde_json::to_value(config)?;
        Ok(())
    }

    pub fn seed(&mut self, purpose: &str, seed: u64) {
        self.seeds[purpose] = json!(seed);
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.notes[key] = serde_json::to_value(value)?;
        Ok(())
    }

    /// Reads an input file and records its digest.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    pub fn read_input_string(&mut self, path: &Path) -> Result<String> {
        let bytes = self.read_input(path)?;
        String::from_utf8(bytes).with_context(|| format!("{} is not valid UTF-8", path.display()))
    }

    pub fn add(&mut self, name: impl Into<PathBuf>, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.into(), bytes.into()));
    }

    /// Writes every staged file and then `manifest.json` into `dir`.
    pub fn commit(self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut outputs = Vec::new();
        let mut written = Vec::new();
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)
                    .with_context(|| format!("cannot create {}", parent.display()))?;
            }
            let tmp = path.with_extension("partial");
            fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", path.display()))?;
            fs::rename(&tmp, &path).with_context(|| format!("cannot write {}", path.display()))?;
            outputs.push(FileDigest {
                path: name.display().to_string(),
                sha256: sha256_hex(bytes),
            });
            written.push(path);
        }
        let created = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let manifest = json!({
            "command": self.command,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "config": self.config,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": outputs,
            "notes": self.notes,
            "created_unix_s": created,
        });
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("cannot write {}", path.display()))?;
        written.push(path);
        Ok(written)
    }
}
