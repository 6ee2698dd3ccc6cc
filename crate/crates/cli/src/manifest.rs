//! Run manifests: everything needed to reproduce an artifact, with no
//! timestamps or absolute paths so identical runs write identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    /// Config snapshot as `key -> value`.
    pub config: BTreeMap<String, String>,
    /// Other command settings.
    pub settings: BTreeMap<String, String>,
    /// Input file name -> SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    /// Output file names, relative to the output location.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            ..Default::default()
        }
    }

    pub fn setting(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.settings.insert(key.to_string(), value.to_string());
        self
    }

    /// Records the checksum of `path` under `label`.
    pub fn input(&mut self, label: &str, path: &Path) -> CliResult<&mut Self> {
        self.inputs.insert(label.to_string(), sha256_file(path)?);
        Ok(self)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("manifest serializes")
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn json_has_no_paths() {
        let mut m = RunManifest::new("gen");
        m.setting("n", 10);
        m.outputs.push("train.jsonl".into());
        let text = m.to_json().to_string();
        assert!(!text.contains('/'), "{text}");
    }
}
