use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Provenance of one command run. Lives next to its outputs; it is the one
/// file that carries wall-clock times, so everything else stays reproducible.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Every resolved setting (flag, config file or default).
    pub config: serde_json::Value,
    /// SHA-256 of each input file.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 over the sorted input hashes.
    pub input_hash: String,
    /// SHA-256 of each output file.
    pub outputs: BTreeMap<String, String>,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
    /// Command-specific extras such as normalization statistics.
    pub extra: serde_json::Value,
}

pub fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub struct Recorder {
    command: String,
    started: f64,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn start(command: &str) -> Self {
        Recorder {
            command: command.to_string(),
            started: now(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, label: impl Into<String>, hash: impl Into<String>) {
        self.inputs.insert(label.into(), hash.into());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn input_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.inputs {
            h.update(k.as_bytes());
            h.update([0u8]);
            h.update(v.as_bytes());
            h.update([b'\n']);
        }
        hex::encode(h.finalize())
    }

    pub fn finish(self, path: &Path, config: serde_json::Value, extra: serde_json::Value) -> anyhow::Result<()> {
        let mut outputs = BTreeMap::new();
        for p in &self.outputs {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            outputs.insert(name, xdrive::pipeline::file_sha256(p)?);
        }
        let m = RunManifest {
            command: self.command.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            input_hash: self.input_hash(),
            inputs: self.inputs,
            outputs,
            started_unix_s: self.started,
            finished_unix_s: now(),
            extra,
        };
        xdrive::dataset::write_json(path, &m)?;
        log::info!("wrote {}", path.display());
        Ok(())
    }
}
