//! Run manifests: what was run, from which configs, with which seed, and
//! which artifacts it produced.
//!
//! The run identifier is a content hash of `(command, seed, resolved
//! config)`, so identical runs share an id and their primary outputs are
//! byte-identical; only the manifest timestamps differ between re-runs.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use attrface_core::error::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tool_version: String,
    pub command: String,
    pub config_paths: Vec<String>,
    pub seed: u64,
    pub outputs: Vec<String>,
    pub started_at_unix_ms: u128,
    pub finished_at_unix_ms: u128,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn start(command: &str, config_paths: &[&Path], seed: u64, resolved_config: &[u8]) -> Self {
        let mut hash_input = Vec::new();
        hash_input.extend_from_slice(command.as_bytes());
        hash_input.extend_from_slice(&seed.to_le_bytes());
        hash_input.extend_from_slice(resolved_config);
        let run_id = format!("{:016x}", fnv1a(&hash_input));
        RunManifest {
            run_id,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_paths: config_paths.iter().map(|p| p.display().to_string()).collect(),
            seed,
            outputs: Vec::new(),
            started_at_unix_ms: now_ms(),
            finished_at_unix_ms: 0,
        }
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn finish_and_write(mut self, path: &Path) -> Result<()> {
        self.finished_at_unix_ms = now_ms();
        std::fs::write(path, serde_json::to_string_pretty(&self)?)?;
        Ok(())
    }
}
