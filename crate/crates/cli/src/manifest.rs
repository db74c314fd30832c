//! Per-stage run manifests: config hash, seeds and artifact hashes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub stage_seed: u64,
    /// Output-directory-relative path → SHA-256 of the file read.
    pub inputs: BTreeMap<String, String>,
    /// Output-directory-relative path → SHA-256 of the file written.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
    Ok(sha256_hex(&bytes))
}

pub struct ManifestBuilder {
    root: PathBuf,
    manifest: Manifest,
}

impl ManifestBuilder {
    pub fn new(root: &Path, stage: &str, config_json: &str, seed: u64, stage_seed: u64) -> Self {
        ManifestBuilder {
            root: root.to_path_buf(),
            manifest: Manifest {
                stage: stage.to_string(),
                config_hash: sha256_hex(config_json.as_bytes()),
                seed,
                stage_seed,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
            },
        }
    }

    fn key(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let h = hash_file(path)?;
        self.manifest.inputs.insert(self.key(path), h);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<(), CliError> {
        let h = hash_file(path)?;
        self.manifest.outputs.insert(self.key(path), h);
        Ok(())
    }

    /// Writes `manifests/<stage>.json` under the output directory.
    pub fn finish(self) -> Result<Manifest, CliError> {
        let dir = self.root.join("manifests");
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(dir.clone(), e))?;
        let path = dir.join(format!("{}.json", self.manifest.stage));
        let mut text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| CliError::Io(path, e))?;
        Ok(self.manifest)
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}
