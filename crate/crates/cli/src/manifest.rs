use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance record written next to every stage's outputs. Paths are
/// relative to the run directory when possible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub tool_version: String,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(sha256_bytes(&bytes))
}

pub struct ManifestBuilder<'a> {
    root: &'a Path,
    manifest: Manifest,
}

impl<'a> ManifestBuilder<'a> {
    pub fn new(root: &'a Path, stage: &str, config_toml: &str) -> Self {
        ManifestBuilder {
            root,
            manifest: Manifest {
                stage: stage.to_string(),
                tool_version: TOOL_VERSION.to_string(),
                config_sha256: sha256_bytes(config_toml.as_bytes()),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
            },
        }
    }

    fn key(&self, path: &Path) -> String {
        path.strip_prefix(self.root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        let hash = sha256_file(path)?;
        self.manifest.inputs.insert(self.key(path), hash);
        Ok(self)
    }

    pub fn output(&mut self, path: &Path) -> Result<&mut Self> {
        let hash = sha256_file(path)?;
        self.manifest.outputs.insert(self.key(path), hash);
        Ok(self)
    }

    /// Writes `manifests/<stage>.json` under the run directory.
    pub fn write(&self) -> Result<PathBuf> {
        let dir = self.root.join("manifests");
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(format!("{}.json", self.manifest.stage));
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn records_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("a.txt");
        std::fs::write(&file, "abc").unwrap();
        let mut b = ManifestBuilder::new(dir.path(), "ingest", "seed = 1\n");
        b.input(&file).unwrap();
        let written = b.write().unwrap();
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(written).unwrap()).unwrap();
        assert_eq!(m.inputs["a.txt"], sha256_bytes(b"abc"));
        assert_eq!(m.stage, "ingest");
    }
}
