//! On-disk checkpoints: `manifest.json` plus one raw little-endian `f32`
//! file per parameter group.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub frozen: bool,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: String,
    pub step: u64,
    pub groups: Vec<GroupEntry>,
    /// Free-form metadata, e.g. the architecture config the groups belong to.
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn group_file(name: &str) -> String {
    format!("{name}.f32")
}

pub fn save(
    dir: &Path,
    store: &ParamStore,
    stage: &str,
    step: u64,
    meta: serde_json::Value,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut groups = Vec::with_capacity(store.len());
    for g in store.groups() {
        let file = group_file(&g.name);
        let mut bytes = Vec::with_capacity(g.value.len() * 4);
        for &v in g.value.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
        groups.push(GroupEntry {
            name: g.name.clone(),
            rows: g.value.rows(),
            cols: g.value.cols(),
            dtype: "f32".into(),
            frozen: g.frozen,
            file,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        stage: stage.to_string(),
        step,
        groups,
        meta,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Loads every group of the checkpoint into `store`, which must already hold
/// groups with identical names and shapes. Freeze flags are taken from the
/// checkpoint.
pub fn load_into(dir: &Path, store: &mut ParamStore) -> Result<Manifest> {
    let manifest = read_manifest(dir)?;
    if manifest.groups.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "{} groups in checkpoint, model has {}",
            manifest.groups.len(),
            store.len()
        )));
    }
    for entry in &manifest.groups {
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!("unsupported dtype {}", entry.dtype)));
        }
        let id = store
            .id(&entry.name)
            .map_err(|_| Error::Checkpoint(format!("unknown group `{}`", entry.name)))?;
        let shape = store.group(id).value.shape();
        if shape != (entry.rows, entry.cols) {
            return Err(Error::Checkpoint(format!(
                "group `{}` is {}x{} in checkpoint, {}x{} in model",
                entry.name, entry.rows, entry.cols, shape.0, shape.1
            )));
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != entry.rows * entry.cols * 4 {
            return Err(Error::Checkpoint(format!("truncated file for `{}`", entry.name)));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        let group = &mut store.groups_mut()[id];
        group.value = Tensor::from_vec(entry.rows, entry.cols, data)?;
        group.frozen = entry.frozen;
    }
    Ok(manifest)
}
