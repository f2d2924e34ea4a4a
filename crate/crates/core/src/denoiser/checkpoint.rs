//! Checkpoint layout:
//!
//! ```text
//! bytes 0..8    magic "SFCKPT01"
//! bytes 8..16   header length N, u64 little-endian
//! next N bytes  UTF-8 JSON header {"spec", "tensors": [{"name", "shape"}], "metadata"}
//! remainder     parameters as f64 little-endian, tensors in header order
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NeuralDenoiser, NeuralDenoiserSpec};
use crate::error::{config, validation, Result};

const MAGIC: &[u8; 8] = b"SFCKPT01";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    spec: NeuralDenoiserSpec,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// A loaded network plus whatever metadata was stored next to it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: NeuralDenoiser,
    pub metadata: serde_json::Value,
}

fn encode(model: &NeuralDenoiser, metadata: &serde_json::Value) -> Result<Vec<u8>> {
    let header = Header {
        spec: *model.spec(),
        tensors: model
            .tensor_shapes()
            .into_iter()
            .map(|(name, shape)| TensorEntry { name, shape })
            .collect(),
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * model.params().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

/// Writes a checkpoint atomically: a temporary file in the same directory is
/// renamed over `path`.
pub fn save_checkpoint(path: &Path, model: &NeuralDenoiser, metadata: &serde_json::Value) -> Result<()> {
    let bytes = encode(model, metadata)?;
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(validation("not a checkpoint file (bad magic)"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(n))
        .ok_or_else(|| validation("checkpoint header truncated"))?;
    let header: Header = serde_json::from_slice(body)?;
    let data = &bytes[16 + n..];
    if data.len() % 8 != 0 {
        return Err(validation("checkpoint data is not a whole number of f64 values"));
    }
    let params: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let model = NeuralDenoiser::from_params(header.spec, params)?;
    let expected: Vec<TensorEntry> = model
        .tensor_shapes()
        .into_iter()
        .map(|(name, shape)| TensorEntry { name, shape })
        .collect();
    if expected != header.tensors {
        return Err(config("checkpoint tensor list does not match its network spec"));
    }
    Ok(Checkpoint { model, metadata: header.metadata })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
