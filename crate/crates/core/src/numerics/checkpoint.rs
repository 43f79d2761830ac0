//! Parameter checkpoints: `manifest.json` lists `{name, shape, dtype}` in
//! store order, `params.bin` holds the values as little-endian `f32`
//! concatenated in that order. `optimizer.bin` stores Adam's first moments
//! followed by its second moments in the same scheme.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::OptimizerState;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

fn encode_f32<'a>(tensors: impl Iterator<Item = &'a Tensor>) -> Vec<u8> {
    let mut bytes = Vec::new();
    for t in tensors {
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    bytes
}

fn decode_f32(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Checkpoint("binary payload is not a whole number of f32 values".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn manifest(store: &ParamStore) -> Vec<ManifestEntry> {
    store
        .iter()
        .map(|(_, p)| ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: "f32".into(),
        })
        .collect()
}

pub fn save_params(dir: &Path, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(&manifest(store))?;
    json.push('\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    fs::write(dir.join(PARAMS_FILE), encode_f32(store.iter().map(|(_, p)| &p.value)))?;
    Ok(())
}

pub fn save_optimizer(dir: &Path, state: &OptimizerState) -> Result<()> {
    let tensors = state.first_moment.iter().chain(state.second_moment.iter());
    fs::write(dir.join(OPTIMIZER_FILE), encode_f32(tensors))?;
    Ok(())
}

/// Overwrites every parameter of `store` from a checkpoint whose manifest must
/// match the store's names and shapes exactly.
pub fn load_params(dir: &Path, store: &mut ParamStore) -> Result<()> {
    let manifest_text = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&manifest_text)?;
    let expected = manifest(store);
    if entries.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            entries.len(),
            expected.len()
        )));
    }
    for (have, want) in entries.iter().zip(&expected) {
        if have.name != want.name || have.shape != want.shape {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch: checkpoint `{}` {:?} vs model `{}` {:?}",
                have.name, have.shape, want.name, want.shape
            )));
        }
        if have.dtype != "f32" {
            return Err(Error::Checkpoint(format!("unsupported dtype `{}`", have.dtype)));
        }
    }
    let values = decode_f32(&fs::read(dir.join(PARAMS_FILE))?)?;
    if values.len() != store.num_scalars() {
        return Err(Error::Checkpoint(format!(
            "params.bin holds {} values, manifest describes {}",
            values.len(),
            store.num_scalars()
        )));
    }
    let mut offset = 0;
    for p in store.params_mut() {
        let n = p.value.len();
        p.value.data_mut().copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
    Ok(())
}

/// Rounds every parameter to `f32` precision, matching what a save/load
/// round trip produces.
pub fn round_to_f32(store: &mut ParamStore) {
    for p in store.params_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}
