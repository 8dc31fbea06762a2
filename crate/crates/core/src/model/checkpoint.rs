//! Checkpoint directory: `checkpoint.json` lists every parameter tensor with
//! its shape and byte range inside `params.bin`, a raw little-endian payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{HomaError, Result};
use crate::tensor::{ParamStore, Real, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "checkpoint.json";
const PAYLOAD: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    /// Element count.
    pub len: usize,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HomaError::io(dir, e))?;
    let mut payload = Vec::with_capacity(model.params.bytes());
    let mut tensors = Vec::with_capacity(model.params.len());
    for (id, name, t) in model.params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
            len: t.len(),
            frozen: model.params.is_frozen(id),
        });
        for &x in t.data() {
            x.write_le(&mut payload);
        }
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        dtype: T::DTYPE.to_string(),
        config: model.cfg.clone(),
        tensors,
    };
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| HomaError::io(&mpath, e))?;
    let ppath = dir.join(PAYLOAD);
    fs::write(&ppath, payload).map_err(|e| HomaError::io(&ppath, e))?;
    Ok(())
}

fn decode<S: Real, T: Real>(bytes: &[u8], len: usize) -> Vec<T> {
    bytes
        .chunks_exact(S::BYTES)
        .take(len)
        .map(|c| T::c(S::read_le(c).as_f64()))
        .collect()
}

/// Loads a checkpoint, converting the stored precision to `T` if needed.
pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<Model<T>> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| HomaError::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(HomaError::invalid(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    let width = match manifest.dtype.as_str() {
        "f64" => 8,
        "f32" => 4,
        other => return Err(HomaError::invalid(format!("unknown checkpoint dtype {other}"))),
    };
    let ppath = dir.join(PAYLOAD);
    let payload = fs::read(&ppath).map_err(|e| HomaError::io(&ppath, e))?;
    let mut store = ParamStore::new();
    for entry in &manifest.tensors {
        let end = entry.offset + entry.len * width;
        let bytes = payload.get(entry.offset..end).ok_or_else(|| {
            HomaError::invalid(format!("tensor {} runs past the payload end", entry.name))
        })?;
        let data = if width == 8 {
            decode::<f64, T>(bytes, entry.len)
        } else {
            decode::<f32, T>(bytes, entry.len)
        };
        let id = store.add(entry.name.clone(), Tensor::from_vec(&entry.shape, data)?);
        store.set_frozen(id, entry.frozen);
    }
    let model = Model {
        cfg: manifest.config,
        params: store,
    };
    model.cfg.validate()?;
    let reference = super::build_model::<T>(&model.cfg)?;
    for (_, name, t) in reference.params.iter() {
        let got = model
            .params
            .id(name)
            .map(|id| model.params.get(id).shape().to_vec());
        if got.as_deref() != Some(t.shape()) {
            return Err(HomaError::invalid(format!(
                "checkpoint tensor {name} missing or misshaped (expected {:?}, got {got:?})",
                t.shape()
            )));
        }
    }
    Ok(model)
}
