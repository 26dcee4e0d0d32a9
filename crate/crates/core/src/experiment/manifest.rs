use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fsutil::{sha256_bytes, sha256_file, write_atomic};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the output root, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Completed,
    Failed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageAction {
    Ran,
    Skipped,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    /// Fingerprint of everything the stage reads.
    pub input_hash: String,
    pub outputs: Vec<ArtifactRecord>,
    pub wall_seconds: f64,
    pub error: Option<String>,
}

impl StageRecord {
    /// Fingerprint of the outputs, used downstream as an input hash.
    pub fn output_hash(&self) -> String {
        let mut text = String::new();
        for a in &self.outputs {
            text.push_str(&a.path);
            text.push(' ');
            text.push_str(&a.sha256);
            text.push('\n');
        }
        sha256_bytes(text.as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEvent {
    pub run: usize,
    pub stage: String,
    pub action: StageAction,
    pub input_hash: String,
}

/// Persistent record of an experiment directory. `history` only grows;
/// `stages` holds the latest record per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub runs: usize,
    pub stages: Vec<StageRecord>,
    pub history: Vec<HistoryEvent>,
}

impl ExperimentManifest {
    pub fn new(config: ExperimentConfig) -> Self {
        ExperimentManifest {
            schema_version: super::SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            runs: 0,
            stages: Vec::new(),
            history: Vec::new(),
        }
    }

    pub fn load(root: &Path) -> Result<Option<Self>> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(&root.join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub(crate) fn upsert(&mut self, rec: StageRecord) {
        match self.stages.iter_mut().find(|s| s.name == rec.name) {
            Some(s) => *s = rec,
            None => self.stages.push(rec),
        }
    }

    /// Actions taken in the most recent run, in stage order.
    pub fn last_run(&self) -> Vec<(&str, StageAction)> {
        self.history
            .iter()
            .filter(|e| e.run == self.runs)
            .map(|e| (e.stage.as_str(), e.action))
            .collect()
    }
}

/// Every file below `dir`, sorted, as paths relative to `root`.
pub(crate) fn list_files(root: &Path, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        if !d.exists() {
            continue;
        }
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = entry.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).expect("below root").to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn rel_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

pub(crate) fn hash_outputs(root: &Path, dir: &Path) -> Result<Vec<ArtifactRecord>> {
    list_files(root, dir)?
        .into_iter()
        .map(|rel| {
            let full = root.join(&rel);
            let bytes = fs::metadata(&full).map_err(|e| Error::io(&full, e))?.len();
            Ok(ArtifactRecord {
                path: rel_string(&rel),
                sha256: sha256_file(&full)?,
                bytes,
            })
        })
        .collect()
}

pub(crate) fn outputs_intact(root: &Path, outputs: &[ArtifactRecord]) -> bool {
    outputs
        .iter()
        .all(|a| sha256_file(&root.join(&a.path)).is_ok_and(|h| h == a.sha256))
}

/// Every file under `root` (except the manifest) is listed by some stage
/// with a matching hash.
pub fn verify_manifest(root: &Path) -> Result<()> {
    let manifest = ExperimentManifest::load(root)?
        .ok_or_else(|| Error::Validation(format!("no manifest in {}", root.display())))?;
    let known: std::collections::HashMap<&str, &str> = manifest
        .stages
        .iter()
        .flat_map(|s| &s.outputs)
        .map(|a| (a.path.as_str(), a.sha256.as_str()))
        .collect();
    for rel in list_files(root, root)? {
        let key = rel_string(&rel);
        if key == MANIFEST_FILE {
            continue;
        }
        match known.get(key.as_str()) {
            None => return Err(Error::Validation(format!("{key} is not recorded in the manifest"))),
            Some(h) if *h != sha256_file(&root.join(&rel))? => {
                return Err(Error::Validation(format!("{key} does not match its recorded hash")))
            }
            Some(_) => {}
        }
    }
    Ok(())
}
