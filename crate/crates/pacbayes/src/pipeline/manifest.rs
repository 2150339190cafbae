//! Run manifest: what has been produced, from which configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::artifacts::{read_json, write_json};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";

/// Completion record of one stage.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageStatus {
    pub complete: bool,
    /// Artifact paths relative to the run directory.
    pub artifacts: Vec<String>,
    /// Sub-items (one per tempering level for the sampling stage).
    #[serde(default)]
    pub items: BTreeMap<String, bool>,
}

/// Persistent run state; updated atomically after every stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub created_unix: u64,
    pub updated_unix: u64,
    pub stages: BTreeMap<String, StageStatus>,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(config_hash: String) -> Self {
        let now = now_unix();
        Self {
            config_hash,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix: now,
            updated_unix: now,
            stages: BTreeMap::new(),
        }
    }

    pub fn path(out_dir: &Path) -> PathBuf {
        out_dir.join(MANIFEST_FILE)
    }

    pub fn load(out_dir: &Path) -> Result<Self> {
        read_json(&Self::path(out_dir))
    }

    /// Loads the manifest, or starts a fresh one for this configuration.
    /// A hash mismatch against an existing manifest is an error: artifacts
    /// from a different configuration must not be silently mixed.
    pub fn load_or_new(out_dir: &Path, config_hash: &str) -> Result<Self> {
        if Self::path(out_dir).exists() {
            let m = Self::load(out_dir)?;
            if m.config_hash != config_hash {
                return Err(Error::Dependency(format!(
                    "run directory {} belongs to config {}, current config is {}",
                    out_dir.display(),
                    m.config_hash,
                    config_hash
                )));
            }
            Ok(m)
        } else {
            Ok(Self::new(config_hash.to_string()))
        }
    }

    pub fn save(&mut self, out_dir: &Path) -> Result<()> {
        self.updated_unix = now_unix();
        write_json(&Self::path(out_dir), self)
    }

    pub fn stage(&self, name: &str) -> Option<&StageStatus> {
        self.stages.get(name)
    }

    pub fn stage_mut(&mut self, name: &str) -> &mut StageStatus {
        self.stages.entry(name.to_string()).or_default()
    }

    /// Registers an artifact under a stage (deduplicated, order preserved).
    pub fn add_artifact(&mut self, stage: &str, rel_path: &str) {
        let status = self.stage_mut(stage);
        if !status.artifacts.iter().any(|a| a == rel_path) {
            status.artifacts.push(rel_path.to_string());
        }
    }

    pub fn require_stage(&self, name: &str) -> Result<&StageStatus> {
        self.stage(name)
            .filter(|s| s.complete)
            .ok_or_else(|| Error::Dependency(format!("stage '{name}' has not completed")))
    }
}

/// Outcome of checking the manifest against the directory contents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub config_hash_matches: bool,
    pub missing_artifacts: Vec<String>,
    pub stages: BTreeMap<String, bool>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.config_hash_matches && self.missing_artifacts.is_empty()
    }
}

/// Confirms that every artifact the manifest lists exists on disk and that
/// `config.json` still hashes to the recorded value.
pub fn verify(out_dir: &Path) -> Result<VerifyReport> {
    let manifest = RunManifest::load(out_dir)?;
    let config: crate::pipeline::config::ExperimentConfig = read_json(&out_dir.join(CONFIG_FILE))?;
    let hash = config.hash()?;
    let mut missing = Vec::new();
    let mut stages = BTreeMap::new();
    for (name, status) in &manifest.stages {
        stages.insert(name.clone(), status.complete);
        for artifact in &status.artifacts {
            if !out_dir.join(artifact).exists() {
                missing.push(artifact.clone());
            }
        }
    }
    Ok(VerifyReport {
        config_hash_matches: hash == manifest.config_hash,
        missing_artifacts: missing,
        stages,
    })
}
