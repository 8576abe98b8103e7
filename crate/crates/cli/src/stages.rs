//! Content-addressed stage directories.
//!
//! Every pipeline stage writes its artifacts into `<work>/<name>-<hash>`
//! where the hash digests the stage's parameter key together with the
//! hashes of its upstream stages. A `_complete.json` marker written last
//! makes re-runs of an unchanged stage a no-op; changing any input changes
//! the address, so stale artifacts can never be picked up by mistake.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MARKER: &str = "_complete.json";

#[derive(Debug, Clone)]
pub struct StageRef {
    pub name: String,
    pub hash: String,
    pub dir: PathBuf,
}

/// 12 hex characters of the SHA-256 of the canonical key serialization.
/// serde_json maps are ordered, so equal keys digest identically.
pub fn stage_hash(key: &Value) -> Result<String> {
    let text = serde_json::to_string(key)?;
    let digest = Sha256::digest(text.as_bytes());
    let mut hex = String::with_capacity(12);
    for b in &digest[..6] {
        hex.push_str(&format!("{b:02x}"));
    }
    Ok(hex)
}

pub fn stage_dir(work: &Path, name: &str, key: &Value) -> Result<StageRef> {
    let hash = stage_hash(key)?;
    Ok(StageRef {
        name: name.to_string(),
        dir: work.join(format!("{name}-{hash}")),
        hash,
    })
}

pub fn is_complete(stage: &StageRef) -> bool {
    stage.dir.join(MARKER).is_file()
}

/// Build the stage unless its marker already exists. A partially written
/// directory (no marker) is discarded and rebuilt. `build` returns a small
/// summary document stored in the marker alongside the key.
pub fn ensure_stage<F>(work: &Path, name: &str, key: &Value, build: F) -> Result<StageRef>
where
    F: FnOnce(&Path) -> Result<Value>,
{
    let stage = stage_dir(work, name, key)?;
    if is_complete(&stage) {
        return Ok(stage);
    }
    if stage.dir.exists() {
        fs::remove_dir_all(&stage.dir)?;
    }
    fs::create_dir_all(&stage.dir)?;
    let summary = build(&stage.dir)?;
    let marker = json!({
        "stage": name,
        "hash": stage.hash,
        "key": key,
        "summary": summary,
    });
    fs::write(
        stage.dir.join(MARKER),
        serde_json::to_string_pretty(&marker)?,
    )?;
    Ok(stage)
}

/// Resolve a stage that must already exist; names the missing stage and
/// the command that produces it otherwise.
pub fn require_stage(work: &Path, name: &str, key: &Value, command: &str) -> Result<StageRef> {
    let stage = stage_dir(work, name, key)?;
    if !is_complete(&stage) {
        return Err(CliError::MissingStage {
            stage: name.to_string(),
            dir: stage.dir.clone(),
            command: command.to_string(),
        });
    }
    Ok(stage)
}

/// Provenance record written at the work-dir root after every command.
pub fn write_provenance(
    work: &Path,
    command: &str,
    config: &Value,
    seed: u64,
    stages: &BTreeMap<String, String>,
) -> Result<()> {
    let doc = json!({
        "command": command,
        "seed": seed,
        "stages": stages,
        "config": config,
    });
    fs::create_dir_all(work)?;
    fs::write(work.join("run.json"), serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}
