//! Model checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic        8 bytes   "STEFCKPT"
//! header_len   u32
//! header       JSON: format_version, config, seed, trained_epochs,
//!              running_stats_ready, arrays [{name, shape}]
//! payload      every array in header order as f64
//! ```
//!
//! Arrays are the trainable parameters in canonical order followed by the
//! batch-norm running means and variances.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, StefConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"STEFCKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: StefConfig,
    pub seed: u64,
    pub trained_epochs: usize,
    pub running_stats_ready: bool,
    pub arrays: Vec<ArrayEntry>,
}

/// Parameters together with their provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub seed: u64,
    pub trained_epochs: usize,
}

fn named_arrays(params: &ModelParams) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> =
        params.trainable().into_iter().map(|(n, t)| (n, t.clone())).collect();
    out.extend(params.running_stats());
    out
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let arrays = named_arrays(&ckpt.params);
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        config: ckpt.params.config.clone(),
        seed: ckpt.seed,
        trained_epochs: ckpt.trained_epochs,
        running_stats_ready: ckpt.params.running_stats_ready,
        arrays: arrays.iter().map(|(n, t)| ArrayEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let payload_len: usize = arrays.iter().map(|(_, t)| t.numel() * 8).sum();
    let mut out = Vec::with_capacity(12 + json.len() + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &arrays {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Corrupt("missing STEFCKPT magic".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < len {
        return Err(Error::Corrupt("truncated checkpoint header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..len])?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: header.format_version, expected: CHECKPOINT_VERSION });
    }
    header.config.validate()?;

    let mut params = ModelParams::init(&header.config, 0)?;
    let expected: Vec<(String, Vec<usize>)> =
        named_arrays(&params).into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    if expected.len() != header.arrays.len() {
        return Err(Error::shape(
            "checkpoint",
            format!("{} arrays stored, config implies {}", header.arrays.len(), expected.len()),
        ));
    }
    for ((name, shape), entry) in expected.iter().zip(&header.arrays) {
        if *name != entry.name || *shape != entry.shape {
            return Err(Error::shape(
                "checkpoint",
                format!("stored {} {:?} where config implies {name} {shape:?}", entry.name, entry.shape),
            ));
        }
    }

    let payload = &body[len..];
    let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if payload.len() != total * 8 {
        return Err(Error::Corrupt(format!(
            "checkpoint payload is {} bytes, expected {}",
            payload.len(),
            total * 8
        )));
    }
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for t in params.trainable_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = values.next().unwrap());
    }
    for block in [&mut params.conv1, &mut params.conv2] {
        block.running.mean.iter_mut().for_each(|v| *v = values.next().unwrap());
        block.running.var.iter_mut().for_each(|v| *v = values.next().unwrap());
    }
    params.running_stats_ready = header.running_stats_ready;
    if !params.is_finite() {
        return Err(Error::Corrupt("checkpoint holds non-finite values".into()));
    }
    Ok(Checkpoint { params, seed: header.seed, trained_epochs: header.trained_epochs })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads a checkpoint and checks it was built for `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &StefConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.params.config != *expected {
        return Err(Error::shape(
            "checkpoint",
            format!("checkpoint config {:?} does not match {:?}", ckpt.params.config, expected),
        ));
    }
    Ok(ckpt)
}
