//! Output files, the run manifest and wall-clock reports.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use evifed_federation::FedConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const MANIFEST: &str = "manifest.json";
pub const TIMING: &str = "timing.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a command and its inputs, framed like a git object header so the
/// length is part of the digest.
pub fn content_hash(command: &str, args: &serde_json::Value, cfg: &FedConfig) -> Result<String> {
    let body = serde_json::to_string(&serde_json::json!({
        "command": command,
        "args": args,
        "config": cfg,
    }))?;
    let mut framed = format!("evifed-input {}\0", body.len()).into_bytes();
    framed.extend_from_slice(body.as_bytes());
    Ok(sha256_hex(&framed))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

/// Inputs and outputs of one command invocation. Holds no timestamps, so an
/// identical hash means identical content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub args: serde_json::Value,
    pub input_hash: String,
    pub config: FedConfig,
    pub version: String,
    pub outputs: Vec<OutputFile>,
}

/// Writes files under one directory and remembers them for the manifest.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    written: Vec<OutputFile>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, relative: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(relative);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.written.push(OutputFile {
            path: relative.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len(),
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, relative: &str, value: &T) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        self.write(relative, text.as_bytes())
    }

    /// Writes `manifest.json` listing everything written so far.
    pub fn finish(mut self, command: &str, args: serde_json::Value, cfg: &FedConfig) -> Result<RunManifest> {
        let input_hash = content_hash(command, &args, cfg)?;
        self.written.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = RunManifest {
            run_id: format!("{command}-{}", &input_hash[..12]),
            command: command.to_string(),
            args,
            input_hash,
            config: cfg.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: self.written,
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(self.root.join(MANIFEST), text)?;
        Ok(manifest)
    }
}

/// Peak resident set size of this process in KiB, from `/proc/self/status`.
pub fn peak_rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|v| v.trim().trim_end_matches("kB").trim().parse().ok())
}

pub fn unix_seconds() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Wall-clock report; never part of the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub command: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub total_seconds: f64,
    /// Per-round wall time of the first run of the command.
    pub round_seconds: Vec<f64>,
    pub peak_rss_kib: Option<u64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn hash_tracks_inputs() {
        let cfg = FedConfig::new(4);
        let a = content_hash("run", &serde_json::json!({}), &cfg).unwrap();
        assert_eq!(a, content_hash("run", &serde_json::json!({}), &cfg).unwrap());
        let mut other = cfg.clone();
        other.seed_data = 1;
        assert_ne!(a, content_hash("run", &serde_json::json!({}), &other).unwrap());
        assert_ne!(a, content_hash("ablate", &serde_json::json!({}), &cfg).unwrap());
    }

    #[test]
    fn reads_peak_memory() {
        if Path::new("/proc/self/status").exists() {
            assert!(peak_rss_kib().unwrap() > 0);
        }
    }
}
