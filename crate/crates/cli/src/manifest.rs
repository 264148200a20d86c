//! Run manifests and hash-derived seeds.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Pending,
    Done,
    Failed,
}

/// One optimization run listed in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    /// JSONL file, relative to the manifest's directory.
    pub file: String,
    pub problem: String,
    pub dim: usize,
    pub algo: String,
    pub acq: String,
    pub replicate: usize,
    pub seed: u64,
    pub budget: usize,
    pub q: usize,
    /// Hash of everything that determines the run's output.
    pub cell_hash: String,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub command_line: Vec<String>,
    pub config_hash: String,
    pub master_seed: Option<u64>,
    pub checkpoint_id: Option<String>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    /// Non-run files written next to the manifest.
    pub artifacts: Vec<String>,
    pub runs: Vec<RunEntry>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, config_hash: String, master_seed: Option<u64>, checkpoint_id: Option<String>) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            command_line: std::env::args().collect(),
            config_hash,
            master_seed,
            checkpoint_id,
            started_unix: unix_now(),
            finished_unix: None,
            artifacts: Vec::new(),
            runs: Vec::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST_FILE);
        match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| CliError::Parse { path, line: e.line(), reason: e.to_string() }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(CliError::io(path, e)),
        }
    }

    /// Writes `manifest.json` atomically.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let tmp = dir.join(format!(".{MANIFEST_FILE}.tmp"));
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&tmp, text).map_err(|e| CliError::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Short content hash identifying a checkpoint file.
pub fn checkpoint_id(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes)[..16].to_string())
}

/// Seed of replicate `replicate` of `problem` under `master`. Algorithms are
/// deliberately not part of the key, so every algorithm on a given
/// (problem, replicate) starts from the same initial design.
pub fn derive_seed(master: u64, problem: &str, replicate: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"fomemo/seed/v1\0");
    h.update(master.to_le_bytes());
    h.update(problem.as_bytes());
    h.update([0]);
    h.update((replicate as u64).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Derived seeds for every `(problem, replicate)` of a suite; fails if two
/// cells would share a seed.
pub fn derive_suite_seeds(master: u64, problems: &[String], replicates: usize) -> Result<Vec<Vec<u64>>> {
    let seeds: Vec<Vec<u64>> =
        problems.iter().map(|p| (0..replicates).map(|r| derive_seed(master, p, r)).collect()).collect();
    let mut all: Vec<u64> = seeds.iter().flatten().copied().collect();
    all.sort_unstable();
    if all.windows(2).any(|w| w[0] == w[1]) {
        return Err(CliError::Runtime("derived seed collision in suite".into()));
    }
    Ok(seeds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_pure_and_sensitive_to_each_key() {
        let a = derive_seed(7, "zdt1", 0);
        assert_eq!(a, derive_seed(7, "zdt1", 0));
        assert_ne!(a, derive_seed(7, "zdt1", 1));
        assert_ne!(a, derive_seed(8, "zdt1", 0));
        assert_ne!(a, derive_seed(7, "zdt2", 0));
    }

    #[test]
    fn suite_seeds_are_collision_free() {
        let problems: Vec<String> = ["zdt1", "zdt2", "omnitest"].iter().map(|s| s.to_string()).collect();
        let seeds = derive_suite_seeds(0, &problems, 100).unwrap();
        assert_eq!(seeds.len(), 3);
        assert!(seeds.iter().all(|s| s.len() == 100));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        assert!(RunManifest::load(dir.path()).unwrap().is_none());
        let mut m = RunManifest::new("bench", sha256_hex(b"cfg"), Some(3), None);
        m.runs.push(RunEntry {
            file: "runs/a.jsonl".into(),
            problem: "zdt1".into(),
            dim: 8,
            algo: "sobol".into(),
            acq: "sobol".into(),
            replicate: 0,
            seed: 1,
            budget: 4,
            q: 1,
            cell_hash: "h".into(),
            status: RunStatus::Done,
            error: None,
            wall_ms: 5,
        });
        m.save(dir.path()).unwrap();
        assert_eq!(RunManifest::load(dir.path()).unwrap().unwrap(), m);
        let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names, vec![std::ffi::OsString::from(MANIFEST_FILE)]);
    }
}
