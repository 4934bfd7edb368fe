//! Model checkpoints: a JSON manifest next to a raw little-endian buffer.
//!
//! ```text
//! <dir>/manifest.json   format version, model config, seed, parameter table
//! <dir>/params.bin      f64 little-endian values, parameters back to back
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use trasend_autodiff::{ParamGroup, ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{Model, ModelConfig};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BUFFER_FILE: &str = "params.bin";
const DTYPE: &str = "f64-le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub trainable: bool,
    /// element offset into the buffer
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub dtype: String,
    pub seed: u64,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ParamStore,
}

pub fn save_checkpoint(dir: &Path, params: &ParamStore, config: &ModelConfig, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(params.len());
    let mut buf = Vec::with_capacity(params.numel() * 8);
    let mut offset = 0;
    for (_, p) in params.iter() {
        let len = p.value.len();
        entries.push(ParamEntry {
            name: p.name().to_string(),
            shape: p.value.shape().to_vec(),
            group: p.group(),
            trainable: p.trainable(),
            offset,
            len,
        });
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        offset += len;
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        dtype: DTYPE.into(),
        seed,
        config: config.clone(),
        params: entries,
    };
    write_atomic(&dir.join(BUFFER_FILE), &buf)?;
    write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

/// Loads and validates a checkpoint. Nothing is returned unless every check
/// passes: format version (checked first), buffer length, per-entry shape
/// and the parameter set expected by the stored model configuration.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::InvalidData("checkpoint manifest has no format_version".into()))?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::VersionMismatch {
            found: found as u32,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: CheckpointManifest = serde_json::from_value(raw)?;
    if manifest.dtype != DTYPE {
        return Err(Error::InvalidData(format!("unsupported dtype {:?}", manifest.dtype)));
    }
    let bytes = fs::read(dir.join(BUFFER_FILE))?;
    let expected = manifest.params.iter().map(|e| e.offset + e.len).max().unwrap_or(0) * 8;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let model = Model::new(manifest.config.clone())?;
    let reference = model.init_params(0)?;
    let mut params = ParamStore::new();
    for e in &manifest.params {
        let want = reference.by_name(&e.name).map(|p| p.value.shape().to_vec());
        if e.shape.iter().product::<usize>() != e.len || want.as_deref() != Some(e.shape.as_slice()) {
            return Err(Error::CheckpointShape {
                name: e.name.clone(),
                expected: want.unwrap_or_default(),
                found: e.shape.clone(),
            });
        }
        let data = bytes[e.offset * 8..(e.offset + e.len) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.add(e.name.clone(), Tensor::new(e.shape.clone(), data)?, e.group, e.trainable)?;
    }
    model.check_params(&params)?;
    Ok(Checkpoint {
        config: manifest.config,
        seed: manifest.seed,
        params,
    })
}
