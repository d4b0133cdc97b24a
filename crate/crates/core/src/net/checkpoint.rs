//! Checkpoints: a JSON manifest next to a raw little-endian f32 payload.
//!
//! For every parameter the payload holds its value; trainable parameters
//! additionally store their Adam moments as `<name>.adam_m`/`<name>.adam_v`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use super::{NetworkConfig, RegNet};
use crate::error::{Error, Result};
use crate::volume::{header_path, payload_path};

pub const CHECKPOINT_FORMAT: &str = "weakreg-checkpoint-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in values.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub network: NetworkConfig,
    /// Optimizer steps taken so far.
    pub iteration: u64,
    pub seed: u64,
    /// Training configuration, stored verbatim.
    #[serde(default)]
    pub train: serde_json::Value,
    /// Corpus case indices the model was trained on.
    #[serde(default)]
    pub train_cases: Vec<usize>,
    #[serde(default)]
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointManifest {
    pub fn new(network: NetworkConfig, iteration: u64, seed: u64) -> Self {
        CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            network,
            iteration,
            seed,
            train: serde_json::Value::Null,
            train_cases: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

/// Writes `<path>.json` and `<path>.raw`. The tensor table in `manifest` is
/// rebuilt from the network.
pub fn save_checkpoint(path: impl AsRef<Path>, manifest: &CheckpointManifest, net: &RegNet<f32>) -> Result<()> {
    let mut manifest = manifest.clone();
    manifest.network = net.config().clone();
    manifest.tensors.clear();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    let mut put = |name: String, shape: &[usize], data: &[f32], tensors: &mut Vec<TensorEntry>| {
        tensors.push(TensorEntry {
            name,
            shape: shape.to_vec(),
            offset,
        });
        offset += data.len();
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    let mut tensors = Vec::new();
    for p in net.store().iter() {
        put(p.name.clone(), &p.shape, &p.value, &mut tensors);
        if p.trainable() {
            put(format!("{}.adam_m", p.name), &p.shape, &p.m, &mut tensors);
            put(format!("{}.adam_v", p.name), &p.shape, &p.v, &mut tensors);
        }
    }
    manifest.tensors = tensors;
    let hp = header_path(&path);
    let pp = payload_path(&path);
    if let Some(dir) = hp.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        }
    }
    fs::write(&hp, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::file(&hp, e))?;
    fs::write(&pp, payload).map_err(|e| Error::file(&pp, e))?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointManifest, RegNet<f32>)> {
    let hp = header_path(&path);
    let pp = payload_path(&path);
    let manifest: CheckpointManifest =
        serde_json::from_slice(&fs::read(&hp).map_err(|e| Error::file(&hp, e))?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown checkpoint format {:?}", manifest.format)));
    }
    let bytes = fs::read(&pp).map_err(|e| Error::file(&pp, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Checkpoint("payload length is not a multiple of 4".into()));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let fresh = super::init_parameters(&manifest.network, 0)?;
    let mut store = ParameterStore::<f32>::new();
    let lookup = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
        let e = manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} missing")))?;
        if e.shape != shape {
            return Err(Error::Checkpoint(format!("tensor {name} has shape {:?}, expected {:?}", e.shape, shape)));
        }
        let n: usize = shape.iter().product();
        values
            .get(e.offset..e.offset + n)
            .map(|s| s.to_vec())
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} runs past the payload")))
    };
    for p in fresh.iter() {
        let id = store.push(p.name.clone(), p.shape.clone(), p.role, lookup(&p.name, &p.shape)?);
        if p.trainable() {
            let m = lookup(&format!("{}.adam_m", p.name), &p.shape)?;
            let v = lookup(&format!("{}.adam_v", p.name), &p.shape)?;
            let q = store.get_mut(id);
            q.m = m;
            q.v = v;
        }
    }
    let net = RegNet::from_store(manifest.network.clone(), store)?;
    Ok((manifest, net))
}
