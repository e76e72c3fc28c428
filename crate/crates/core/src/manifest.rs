//! Run manifests: what a command consumed and produced, with digests.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub command: String,
    /// Digest over the command, its effective settings and every input file.
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub outputs: Vec<OutputFile>,
}

/// Accumulates the inputs of a run into one digest.
#[derive(Debug, Clone)]
pub struct ConfigHasher(Sha256);

impl ConfigHasher {
    pub fn new(command: &str) -> Self {
        let mut h = Sha256::new();
        h.update(b"rmt-grid\0");
        h.update(command.as_bytes());
        Self(h)
    }

    fn field(&mut self, tag: &str, bytes: &[u8]) {
        self.0.update([0u8]);
        self.0.update(tag.as_bytes());
        self.0.update((bytes.len() as u64).to_le_bytes());
        self.0.update(bytes);
    }

    /// Settings, serialized as JSON.
    pub fn settings<T: Serialize>(&mut self, value: &T) -> Result<&mut Self> {
        let json = serde_json::to_vec(value)?;
        self.field("settings", &json);
        Ok(self)
    }

    /// Contents of an input file. The path itself does not enter the digest.
    pub fn file(&mut self, path: &Path) -> Result<&mut Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.field("file", &bytes);
        Ok(self)
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    /// Builds the manifest for files already written to `out_dir`.
    pub fn new(command: &str, config_hash: String, seed: u64, out_dir: &Path, outputs: &[String]) -> Result<Self> {
        let outputs = outputs
            .iter()
            .map(|p| {
                Ok(OutputFile {
                    path: p.clone(),
                    sha256: file_digest(&out_dir.join(p))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            schema: 1,
            command: command.to_string(),
            config_hash,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            outputs,
        })
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
