use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_hash: String,
    /// The resolved config this run executed, relative to the run directory.
    pub config_file: String,
    pub seed: u64,
    pub started: String,
    pub finished: String,
    /// Every file the run wrote. Relative to the run directory when inside it.
    pub artifacts: Vec<String>,
    pub provenance: String,
    /// Headline numbers; identical across reruns of the same config.
    pub aggregates: Value,
}

impl RunManifest {
    pub fn path(out_dir: &Path, subcommand: &str) -> PathBuf {
        out_dir.join("manifests").join(format!("{subcommand}.json"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Absolute path of the config this run used.
    pub fn config_path(&self, out_dir: &Path) -> PathBuf {
        out_dir.join(&self.config_file)
    }
}

pub fn provenance(config_hash: &str) -> String {
    format!("revlab-{}+cfg.{}", env!("CARGO_PKG_VERSION"), &config_hash[..12])
}
