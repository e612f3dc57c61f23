//! JSON reports and content hashes.

use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub command: String,
    pub config_hash: String,
    pub input_hash: String,
    pub seed: u64,
    pub passed: bool,
    pub metrics: Value,
    pub duration_ms: u64,
}

/// The report minus wall-clock time: a pure function of config, inputs and seed.
#[derive(Serialize)]
struct Deterministic<'a> {
    command: &'a str,
    config_hash: &'a str,
    input_hash: &'a str,
    seed: u64,
    passed: bool,
    metrics: &'a Value,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn metrics_json(&self) -> String {
        let d = Deterministic {
            command: &self.command,
            config_hash: &self.config_hash,
            input_hash: &self.input_hash,
            seed: self.seed,
            passed: self.passed,
            metrics: &self.metrics,
        };
        serde_json::to_string_pretty(&d).expect("metrics serialize")
    }

    /// `report.json` (with duration) and `metrics.json` (without) into `dir`.
    pub fn write_dir(&self, dir: &Path) -> CliResult<()> {
        write_text(&dir.join("report.json"), &self.to_json())?;
        write_text(&dir.join("metrics.json"), &self.metrics_json())
    }
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    let mut s = text.to_string();
    if !s.ends_with('\n') {
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| CliError::io(path, e))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Git-style object hash of a blob, over SHA-256: `H("blob {len}\0" ++ bytes)`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

/// Git-style tree hash over `(name, blob hash)` entries, sorted by name.
pub fn tree_hash(entries: &[(String, String)]) -> String {
    let mut sorted: Vec<&(String, String)> = entries.iter().collect();
    sorted.sort();
    let mut body = Vec::new();
    for (name, blob) in sorted {
        body.extend_from_slice(format!("{name}\0{blob}\n").as_bytes());
    }
    let mut h = Sha256::new();
    h.update(format!("tree {}\0", body.len()).as_bytes());
    h.update(&body);
    hex(&h.finalize())
}
