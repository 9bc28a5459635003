use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::Globals;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Config file path, or `preset:<name>`.
    pub config: String,
    pub seed: u64,
    pub out_dir: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub precision: String,
}

impl RunManifest {
    pub fn new(command: &str, config: &str, globals: &Globals, out_dir: &Path) -> Self {
        Self {
            command: command.to_string(),
            config: config.to_string(),
            seed: globals.seed,
            out_dir: out_dir.display().to_string(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            precision: globals.precision.name().to_string(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create '{}'", dir.display()))?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("cannot write '{}'", path.display()))
    }
}
