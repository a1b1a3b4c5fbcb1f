//! Checkpoint directories: `manifest.json` describing every array plus
//! `tensors.bin`, the little-endian f32 payload. The manifest records the
//! SHA-256 of the payload; loading verifies it before anything is parsed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ArchConfig, ModelBundle, ModelError, Result, Variant};
use crate::datasets::Modality;
use crate::nn::Adam;

pub const CHECKPOINT_FORMAT: &str = "selfaug-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const TENSORS: &str = "tensors.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    variant: Variant,
    arch: ArchConfig,
    class_names: Vec<String>,
    org_modality: Modality,
    seed: u64,
    epoch: usize,
    main_steps: u64,
    cmd_steps: u64,
    config: serde_json::Value,
    payload_bytes: usize,
    sha256: String,
    arrays: Vec<ArrayEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// `(name, shape, values)` for every stored array, in a fixed order.
fn arrays(bundle: &ModelBundle) -> Vec<(String, Vec<usize>, &[f32])> {
    let mut out = Vec::new();
    for net in bundle.networks() {
        for p in net.params() {
            out.push((p.name.clone(), p.shape.clone(), &p.value[..]));
            out.push((format!("{}#adam_m", p.name), p.shape.clone(), &p.adam_m[..]));
            out.push((format!("{}#adam_v", p.name), p.shape.clone(), &p.adam_v[..]));
        }
        for b in net.buffers() {
            out.push((b.name.clone(), b.shape.clone(), &b.value[..]));
        }
    }
    out
}

/// Writes `bundle` to the directory `path`. The previous contents of `path`
/// are replaced only once the new checkpoint is complete on disk.
pub fn save_checkpoint(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let mut payload = Vec::new();
    let mut entries = Vec::new();
    for (name, shape, values) in arrays(bundle) {
        entries.push(ArrayEntry {
            name,
            shape,
            dtype: "f32-le".into(),
            offset: payload.len(),
            len: values.len(),
        });
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        variant: bundle.variant,
        arch: bundle.arch,
        class_names: bundle.class_names.clone(),
        org_modality: bundle.org_modality,
        seed: bundle.seed,
        epoch: bundle.epoch,
        main_steps: bundle.main_opt.steps,
        cmd_steps: bundle.cmd_opt.steps,
        config: bundle.config.clone(),
        payload_bytes: payload.len(),
        sha256: hex::encode(Sha256::digest(&payload)),
        arrays: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");

    let staging = sibling(path, "tmp");
    let old = sibling(path, "old");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
    }
    fs::create_dir_all(&staging).map_err(io_err(&staging))?;
    fs::write(staging.join(TENSORS), &payload).map_err(io_err(&staging))?;
    fs::write(staging.join(MANIFEST), json).map_err(io_err(&staging))?;
    if path.exists() {
        if old.exists() {
            fs::remove_dir_all(&old).map_err(io_err(&old))?;
        }
        fs::rename(path, &old).map_err(io_err(path))?;
    }
    fs::rename(&staging, path).map_err(io_err(path))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(io_err(&old))?;
    }
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(format!(".{suffix}"));
    path.with_file_name(name)
}

/// Reads a checkpoint written by [`save_checkpoint`]. If `path` is missing
/// but an interrupted save left `<path>.old` behind, that copy is used.
pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    let dir = if !path.exists() && sibling(path, "old").exists() {
        sibling(path, "old")
    } else {
        path.to_path_buf()
    };
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let header: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| ModelError::Corrupt(format!("manifest: {e}")))?;
    if header.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(ModelError::Corrupt("not a checkpoint manifest".into()));
    }
    let version = header
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| ModelError::Corrupt("manifest lacks a version".into()))?;
    if version != CHECKPOINT_VERSION as u64 {
        return Err(ModelError::Version {
            found: version as u32,
            expected: CHECKPOINT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(header)
        .map_err(|e| ModelError::Corrupt(format!("manifest: {e}")))?;

    let tpath = dir.join(TENSORS);
    let payload = fs::read(&tpath).map_err(io_err(&tpath))?;
    if payload.len() != manifest.payload_bytes {
        return Err(ModelError::Corrupt(format!(
            "payload is {} bytes, manifest says {}",
            payload.len(),
            manifest.payload_bytes
        )));
    }
    if hex::encode(Sha256::digest(&payload)) != manifest.sha256 {
        return Err(ModelError::Corrupt("payload checksum mismatch".into()));
    }

    let mut bundle = ModelBundle::new(
        manifest.variant,
        manifest.arch,
        manifest.class_names.clone(),
        manifest.org_modality,
        manifest.seed,
    )
    .map_err(|e| ModelError::Corrupt(format!("manifest describes an invalid model: {e}")))?;
    bundle.epoch = manifest.epoch;
    bundle.main_opt = Adam {
        steps: manifest.main_steps,
    };
    bundle.cmd_opt = Adam {
        steps: manifest.cmd_steps,
    };
    bundle.config = manifest.config.clone();

    let mut by_name: std::collections::HashMap<&str, &ArrayEntry> = manifest
        .arrays
        .iter()
        .map(|e| (e.name.as_str(), e))
        .collect();
    if by_name.len() != manifest.arrays.len() {
        return Err(ModelError::Corrupt("duplicate array names".into()));
    }
    let mut fill = |name: &str, shape: &[usize], target: &mut [f32]| -> Result<()> {
        let entry = by_name
            .remove(name)
            .ok_or_else(|| ModelError::Corrupt(format!("missing array {name}")))?;
        if entry.shape != shape || entry.len != target.len() || entry.dtype != "f32-le" {
            return Err(ModelError::Corrupt(format!(
                "array {name}: stored {:?} {}, expected {shape:?} f32-le",
                entry.shape, entry.dtype
            )));
        }
        let bytes = payload
            .get(entry.offset..entry.offset + 4 * entry.len)
            .ok_or_else(|| ModelError::Corrupt(format!("array {name} out of bounds")))?;
        for (t, c) in target.iter_mut().zip(bytes.chunks_exact(4)) {
            *t = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
        Ok(())
    };
    for net in bundle.networks_mut() {
        for p in net.params_mut() {
            fill(&p.name, &p.shape, &mut p.value)?;
            fill(&format!("{}#adam_m", p.name), &p.shape, &mut p.adam_m)?;
            fill(&format!("{}#adam_v", p.name), &p.shape, &mut p.adam_v)?;
        }
        for b in net.buffers_mut() {
            fill(&b.name, &b.shape, &mut b.value)?;
        }
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(ModelError::Corrupt(format!("unexpected array {extra}")));
    }
    Ok(bundle)
}
