//! Per-run provenance record written into every output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliResult;

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    /// resolved configuration after merging flags and the config file
    pub config: serde_json::Value,
    /// input path -> sha256 of its content
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub struct RunRecorder {
    command: String,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
    started_unix: u64,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn hash_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

impl RunRecorder {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        RunRecorder {
            command: command.to_string(),
            config,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            started_unix: now_unix(),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> CliResult {
        let digest = hash_file(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Write `run_manifest.json` into `dir`.
    pub fn write(self, dir: &Path) -> CliResult {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("run_manifest.json");
        self.write_to_file(&path)
    }

    /// Write the record to an explicit path (file-producing commands keep a
    /// sidecar next to their output instead of claiming the directory).
    pub fn write_to_file(self, path: &Path) -> CliResult {
        let manifest = RunManifest {
            command: self.command,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            started_unix: self.started_unix,
            finished_unix: now_unix(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}
