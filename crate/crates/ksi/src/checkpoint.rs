//! Checkpoint directories: the three parameter tensors plus a JSON manifest.
//!
//! Writes are atomic at the directory level: stage into a temporary sibling,
//! then rename into place.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{KsiError, Result};
use crate::io;
use crate::model::Parameters;

pub const USER_TENSOR: &str = "user_emb.kst";
pub const ITEM_TENSOR: &str = "item_emb.kst";
pub const LOGITS_TENSOR: &str = "modality_logits.kst";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Metadata persisted next to the parameter tensors.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub epoch: usize,
    pub seed: u64,
    pub d: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub modalities: Vec<String>,
    pub config_sha256: String,
    /// Resolved configuration, key = value, defaults expanded.
    pub resolved_config: BTreeMap<String, String>,
    /// Validation metric history, one map per evaluated epoch.
    pub metric_history: Vec<BTreeMap<String, f64>>,
    pub created_at: String,
}

pub fn write(dir: &Path, params: &Parameters, manifest: &CheckpointManifest) -> Result<()> {
    let parent = dir.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(parent).map_err(|e| KsiError::io(parent.display().to_string(), e))?;
    let staging = parent.join(format!(
        ".{}.tmp",
        dir.file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_else(|| "checkpoint".to_string())
    ));
    if staging.exists() {
        std::fs::remove_dir_all(&staging).map_err(|e| KsiError::io(staging.display().to_string(), e))?;
    }
    std::fs::create_dir_all(&staging).map_err(|e| KsiError::io(staging.display().to_string(), e))?;

    io::write_tensor_f64(&staging.join(USER_TENSOR), &params.user_emb)?;
    io::write_tensor_f64(&staging.join(ITEM_TENSOR), &params.item_emb)?;
    let logits = params
        .modality_logits
        .clone()
        .into_shape_with_order((1, params.modality_logits.len()))
        .expect("1 x m reshape");
    io::write_tensor_f64(&staging.join(LOGITS_TENSOR), &logits)?;
    let manifest_text = serde_json::to_string_pretty(manifest)
        .map_err(|e| KsiError::Runtime(format!("manifest serialization: {e}")))?;
    std::fs::write(staging.join(MANIFEST_FILE), manifest_text)
        .map_err(|e| KsiError::io(staging.display().to_string(), e))?;

    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| KsiError::io(dir.display().to_string(), e))?;
    }
    std::fs::rename(&staging, dir).map_err(|e| KsiError::io(dir.display().to_string(), e))?;
    Ok(())
}

pub fn read(dir: &Path) -> Result<(Parameters, CheckpointManifest)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| KsiError::io(manifest_path.display().to_string(), e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| KsiError::format(manifest_path.display().to_string(), e.to_string()))?;

    let user_emb: Array2<f64> = io::read_tensor_f64(&dir.join(USER_TENSOR))?;
    let item_emb: Array2<f64> = io::read_tensor_f64(&dir.join(ITEM_TENSOR))?;
    let logits2d: Array2<f64> = io::read_tensor_f64(&dir.join(LOGITS_TENSOR))?;
    let modality_logits: Array1<f64> = logits2d.row(0).to_owned();

    if user_emb.nrows() != manifest.n_users
        || item_emb.nrows() != manifest.n_items
        || user_emb.ncols() != manifest.d
        || item_emb.ncols() != manifest.d
    {
        return Err(KsiError::Validation(format!(
            "checkpoint tensors disagree with the manifest (users {}x{}, items {}x{}, manifest {}x{}/{}x{})",
            user_emb.nrows(),
            user_emb.ncols(),
            item_emb.nrows(),
            item_emb.ncols(),
            manifest.n_users,
            manifest.d,
            manifest.n_items,
            manifest.d,
        )));
    }

    Ok((
        Parameters {
            user_emb,
            item_emb,
            modality_logits,
        },
        manifest,
    ))
}
