//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `DMSPCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` manifest length, the JSON manifest, then every
//! parameter block (in [`ModelParams::visit`] order) followed by every extra
//! section, all as little-endian `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DmspError, Result};
use crate::model::{ModelConfig, ModelParams};

const MAGIC: &[u8; 8] = b"DMSPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model parameters plus optional named `f64` sections (e.g. optimizer
/// state) and free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub sections: BTreeMap<String, Vec<f64>>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Self {
            params,
            sections: BTreeMap::new(),
            metadata: serde_json::Value::Null,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Block {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Section {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    hidden_dim: usize,
    num_layers: usize,
    sources: usize,
    feature_dims: Vec<usize>,
    enabled_sources: Vec<bool>,
    blocks: Vec<Block>,
    sections: Vec<Section>,
    metadata: serde_json::Value,
}

fn blocks_of(params: &ModelParams) -> Vec<Block> {
    let mut blocks = Vec::new();
    params.visit(&mut |name, shape, _| {
        blocks.push(Block {
            name: name.to_string(),
            shape: shape.to_vec(),
        })
    });
    blocks
}

pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let p = &ckpt.params;
    let manifest = Manifest {
        hidden_dim: p.hidden_dim(),
        num_layers: p.num_layers(),
        sources: p.source_count(),
        feature_dims: p.feature_dims().to_vec(),
        enabled_sources: p.enabled_sources().to_vec(),
        blocks: blocks_of(p),
        sections: ckpt
            .sections
            .iter()
            .map(|(name, v)| Section {
                name: name.clone(),
                len: v.len(),
            })
            .collect(),
        metadata: ckpt.metadata.clone(),
    };
    let json = serde_json::to_vec(&manifest)
        .map_err(|e| DmspError::Checkpoint(format!("manifest encoding: {e}")))?;
    let flat = p.to_flat();
    let extra: usize = ckpt.sections.values().map(Vec::len).sum();
    let mut out = Vec::with_capacity(20 + json.len() + 8 * (flat.len() + extra));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in flat.iter().chain(ckpt.sections.values().flatten()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| DmspError::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(DmspError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(20..20usize.saturating_add(len))
        .ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(json)
        .map_err(|e| DmspError::Checkpoint(format!("manifest: {e}")))?;
    let payload = &bytes[20 + len..];
    if !payload.len().is_multiple_of(8) {
        return Err(bad("payload is not a whole number of f64 values"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    if manifest.feature_dims.len() != manifest.sources {
        return Err(bad("feature_dims does not match source count"));
    }
    let config = ModelConfig {
        hidden_dim: manifest.hidden_dim,
        num_layers: manifest.num_layers,
    };
    let mut params = ModelParams::zeros(&manifest.feature_dims, config)?;
    let expected = blocks_of(&params);
    let same_layout = expected.len() == manifest.blocks.len()
        && expected
            .iter()
            .zip(&manifest.blocks)
            .all(|(a, b)| a.name == b.name && a.shape == b.shape);
    if !same_layout {
        return Err(bad("parameter blocks do not match the declared architecture"));
    }
    let n_params = params.param_count();
    let n_sections: usize = manifest.sections.iter().map(|s| s.len).sum();
    if values.len() != n_params + n_sections {
        return Err(DmspError::Checkpoint(format!(
            "payload holds {} values, manifest declares {}",
            values.len(),
            n_params + n_sections
        )));
    }
    params.load_flat(&values[..n_params])?;
    params.set_enabled_sources(manifest.enabled_sources)?;
    let mut sections = BTreeMap::new();
    let mut offset = n_params;
    for s in manifest.sections {
        sections.insert(s.name, values[offset..offset + s.len].to_vec());
        offset += s.len;
    }
    Ok(Checkpoint {
        params,
        sections,
        metadata: manifest.metadata,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = to_bytes(ckpt)?;
    fs::write(path, bytes).map_err(|e| DmspError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| DmspError::io(path, e))?;
    from_bytes(&bytes)
}
