//! Run manifest: what was run, with which configuration, and the SHA-256 of
//! every file it produced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// Configuration snapshot (TOML).
    pub config: String,
    pub versions: BTreeMap<String, String>,
    pub outputs: Vec<OutputFile>,
    /// Wall-clock seconds per stage, in execution order. Not part of the
    /// reproducible content.
    pub timing: Vec<(String, f64)>,
    /// Scalar results worth surfacing (accuracies, fitted values).
    pub summary: BTreeMap<String, f64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects outputs as they are written so the manifest is complete by
/// construction.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    manifest: RunManifest,
}

impl OutputDir {
    pub fn create(root: &Path, command: &str, seed: u64, config_toml: String) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        let mut versions = BTreeMap::new();
        versions.insert("wavepin-core".to_string(), env!("CARGO_PKG_VERSION").to_string());
        Ok(Self {
            root: root.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                seed,
                config: config_toml,
                versions,
                outputs: Vec::new(),
                timing: Vec::new(),
                summary: BTreeMap::new(),
            },
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        if rel == MANIFEST_FILE {
            return Err(Error::Config(format!("'{MANIFEST_FILE}' is reserved")));
        }
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        let entry = OutputFile { path: rel.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 };
        match self.manifest.outputs.iter_mut().find(|o| o.path == rel) {
            Some(o) => *o = entry,
            None => self.manifest.outputs.push(entry),
        }
        Ok(path)
    }

    pub fn write_str(&mut self, rel: &str, text: &str) -> Result<PathBuf> {
        self.write(rel, text.as_bytes())
    }

    pub fn timing(&mut self, stage: &str, seconds: f64) {
        self.manifest.timing.push((stage.to_string(), seconds));
    }

    pub fn summary(&mut self, key: &str, value: f64) {
        self.manifest.summary.insert(key.to_string(), value);
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn finish(self) -> Result<RunManifest> {
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::format("manifest", e.to_string()))?;
        std::fs::write(self.root.join(MANIFEST_FILE), json)?;
        Ok(self.manifest)
    }
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))
    }

    /// Re-hashes every listed output and reports files in `root` that the
    /// manifest does not list. Returns the list of problems (empty if clean).
    pub fn verify(&self, root: &Path) -> Result<Vec<String>> {
        let mut problems = Vec::new();
        for o in &self.outputs {
            match std::fs::read(root.join(&o.path)) {
                Ok(bytes) if sha256_hex(&bytes) == o.sha256 => {}
                Ok(_) => problems.push(format!("{}: hash mismatch", o.path)),
                Err(e) => problems.push(format!("{}: {e}", o.path)),
            }
        }
        let mut listed: Vec<&str> = self.outputs.iter().map(|o| o.path.as_str()).collect();
        listed.push(MANIFEST_FILE);
        for f in walk(root)? {
            let rel = f.strip_prefix(root).expect("walk stays under root").to_string_lossy().replace('\\', "/");
            if !listed.contains(&rel.as_str()) {
                problems.push(format!("{rel}: not listed in the manifest"));
            }
        }
        Ok(problems)
    }
}

fn walk(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}
