//! Append-only experiment manifests.
//!
//! Each stage writes into `{out}/{stage}-{hash8}/`, where the hash covers the
//! stage kind and its full config snapshot. Manifests are appended to
//! `{out}/manifests.jsonl` and never rewritten; the latest entry for a
//! directory wins when resuming.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::report::read_jsonl;

pub const TOOL_VERSION: &str = concat!("recall-lab ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "message")]
pub enum StageStatus {
    Complete,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub kind: String,
    /// Stage directory relative to the output root.
    pub dir: String,
    pub model_card: Option<String>,
    pub corpus_ref: Option<String>,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Paths relative to the output root.
    pub outputs: Vec<String>,
    pub tool_version: String,
    pub status: StageStatus,
}

/// First 8 hex digits of the SHA-256 of `kind` and the canonical JSON of `config`.
pub fn config_hash(kind: &str, config: &serde_json::Value) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update([0]);
    h.update(config.to_string().as_bytes());
    h.finalize().iter().take(4).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct ManifestLog {
    root: PathBuf,
}

impl ManifestLog {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self) -> PathBuf {
        self.root.join("manifests.jsonl")
    }

    pub fn entries(&self) -> Result<Vec<ExperimentManifest>> {
        if !self.path().exists() {
            return Ok(Vec::new());
        }
        read_jsonl(&self.path())
    }

    pub fn append(&self, m: &ExperimentManifest) -> Result<()> {
        fs::create_dir_all(&self.root)?;
        let mut f = OpenOptions::new().create(true).append(true).open(self.path())?;
        let mut line = serde_json::to_string(m)?;
        line.push('\n');
        f.write_all(line.as_bytes())?;
        Ok(())
    }

    /// The latest complete manifest for `dir`, if all its outputs still exist.
    pub fn completed(&self, dir: &str) -> Result<Option<ExperimentManifest>> {
        let latest = self.entries()?.into_iter().rev().find(|m| m.dir == dir);
        Ok(latest.filter(|m| m.status == StageStatus::Complete && m.outputs.iter().all(|o| self.root.join(o).exists())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(dir: &str, status: StageStatus) -> ExperimentManifest {
        ExperimentManifest {
            kind: "harvest".into(),
            dir: dir.into(),
            model_card: None,
            corpus_ref: None,
            seed: 1,
            config: serde_json::json!({"a": 1}),
            outputs: vec![],
            tool_version: TOOL_VERSION.into(),
            status,
        }
    }

    #[test]
    fn append_only_and_latest_wins() {
        let dir = tempfile::tempdir().unwrap();
        let log = ManifestLog::new(dir.path());
        log.append(&manifest("h-1", StageStatus::Failed("boom".into()))).unwrap();
        assert!(log.completed("h-1").unwrap().is_none());
        let before = fs::read_to_string(log.path()).unwrap();
        log.append(&manifest("h-1", StageStatus::Complete)).unwrap();
        let after = fs::read_to_string(log.path()).unwrap();
        assert!(after.starts_with(&before));
        assert_eq!(log.entries().unwrap().len(), 2);
        assert!(log.completed("h-1").unwrap().is_some());
    }

    #[test]
    fn hash_depends_on_kind_and_config() {
        let c = serde_json::json!({"seed": 1});
        assert_eq!(config_hash("trace", &c), config_hash("trace", &c));
        assert_ne!(config_hash("trace", &c), config_hash("knockout", &c));
        assert_ne!(config_hash("trace", &c), config_hash("trace", &serde_json::json!({"seed": 2})));
        assert_eq!(config_hash("trace", &c).len(), 8);
    }
}
