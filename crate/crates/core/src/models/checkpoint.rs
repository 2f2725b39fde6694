//! Checkpoints: `manifest.json` (config plus tensor names, shapes and byte
//! offsets) next to `params.bin`, a flat little-endian `f64` payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Model, ModelConfig, ModelError};

const FORMAT: &str = "nbvae-checkpoint/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "params.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed manifest: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("checkpoint does not match its config: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    config: ModelConfig,
    payload: String,
    payload_bytes: usize,
    tensors: Vec<TensorEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `model` into directory `dir` (created if missing).
pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut payload = Vec::with_capacity(model.params.store.num_values() * 8);
    let mut tensors = Vec::new();
    for (_, p) in model.params.store.iter() {
        let (r, c) = p.shape();
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: [r, c],
            offset: payload.len(),
        });
        for v in p.value.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        config: model.config.clone(),
        payload: PAYLOAD_FILE.into(),
        payload_bytes: payload.len(),
        tensors,
    };
    let payload_path = dir.join(PAYLOAD_FILE);
    fs::write(&payload_path, &payload).map_err(io_err(&payload_path))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text + "\n").map_err(io_err(&manifest_path))
}

/// Reads the config stored in a checkpoint without loading the payload.
pub fn read_checkpoint_config(dir: &Path) -> Result<ModelConfig, CheckpointError> {
    Ok(read_manifest(dir)?.config)
}

fn read_manifest(dir: &Path) -> Result<Manifest, CheckpointError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|source| CheckpointError::Manifest {
            path: path.clone(),
            source,
        })?;
    if manifest.format != FORMAT {
        return Err(CheckpointError::Mismatch(format!(
            "unsupported format {:?}",
            manifest.format
        )));
    }
    Ok(manifest)
}

/// Loads a checkpoint, checking every tensor against the layout its config
/// implies.
pub fn load_checkpoint(dir: &Path) -> Result<Model, CheckpointError> {
    let manifest = read_manifest(dir)?;
    let mut model = Model::new(manifest.config)?;
    let payload_path = dir.join(&manifest.payload);
    let payload = fs::read(&payload_path).map_err(io_err(&payload_path))?;
    if payload.len() != manifest.payload_bytes {
        return Err(CheckpointError::Mismatch(format!(
            "payload has {} bytes, manifest declares {}",
            payload.len(),
            manifest.payload_bytes
        )));
    }
    if manifest.tensors.len() != model.params.store.len() {
        return Err(CheckpointError::Mismatch(format!(
            "manifest lists {} tensors, config implies {}",
            manifest.tensors.len(),
            model.params.store.len()
        )));
    }
    for ((_, param), entry) in model.params.store.iter_mut().zip(&manifest.tensors) {
        let (r, c) = param.shape();
        if entry.name != param.name || entry.shape != [r, c] {
            return Err(CheckpointError::Mismatch(format!(
                "tensor {} {:?} where config expects {} {:?}",
                entry.name,
                entry.shape,
                param.name,
                [r, c]
            )));
        }
        let end = entry.offset + r * c * 8;
        let bytes = payload.get(entry.offset..end).ok_or_else(|| {
            CheckpointError::Mismatch(format!("tensor {} runs past the payload", entry.name))
        })?;
        for (dst, chunk) in param.value.iter_mut().zip(bytes.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    Ok(model)
}

/// SHA-256 of the payload file, hex encoded.
pub fn checkpoint_digest(dir: &Path) -> Result<String, CheckpointError> {
    let path = dir.join(PAYLOAD_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
