//! Run manifest: what was run, with which settings and inputs, and how long
//! each stage took.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

impl InputDigest {
    pub fn of(role: &str, path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let digest = Sha256::digest(&bytes);
        let sha256 = digest.iter().map(|b| format!("{b:02x}")).collect();
        Ok(Self { role: role.to_string(), path: path.to_path_buf(), sha256 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub target_set: Vec<String>,
    pub groups: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Every setting the run used, defaults included.
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<Truth>,
    pub threads: usize,
    /// Wall-clock seconds per stage, in run order.
    pub timings: Vec<(String, f64)>,
}

impl RunManifest {
    pub fn new(
        command: &str,
        config: serde_json::Value,
        seed: u64,
        threads: usize,
        inputs: Vec<InputDigest>,
        timings: Vec<(String, f64)>,
    ) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            inputs,
            truth: None,
            threads,
            timings,
        }
    }

    pub fn with_truth(mut self, target_set: Vec<String>, groups: Vec<String>) -> Self {
        self.truth = Some(Truth { target_set, groups });
        self
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        krtexas_core::io::write_json(path, self).map_err(|e| CliError::Output(e.to_string()))
    }
}
