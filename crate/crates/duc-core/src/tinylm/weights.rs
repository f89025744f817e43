//! Weights container: versioned magic header, a JSON manifest of tensor
//! records (name, shape, dtype, byte offset), then a little-endian f32
//! payload. Shared by the LM and the SAE.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{DucError, Result};

pub const MAGIC: &[u8; 8] = b"DUCWGT01";

#[derive(Debug, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ContainerManifest {
    pub version: u32,
    /// Arbitrary model metadata (config echo), set by the caller.
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
}

/// Write tensors (quantized to f32) with their metadata.
pub fn save_tensors(
    path: &Path,
    meta: serde_json::Value,
    tensors: &[(String, Vec<usize>, &[f64])],
) -> Result<()> {
    let mut records = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, shape, data) in tensors {
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(DucError::Dimension {
                context: "save_tensors",
                expected: count,
                got: data.len(),
            });
        }
        records.push(TensorRecord {
            name: name.clone(),
            shape: shape.clone(),
            dtype: "f32".to_string(),
            offset,
        });
        offset += (data.len() * 4) as u64;
    }
    let manifest = ContainerManifest {
        version: 1,
        meta,
        tensors: records,
    };
    let mjson = serde_json::to_vec(&manifest).expect("manifest serializes");

    let mut file = std::fs::File::create(path).map_err(|e| DucError::io(path, e))?;
    file.write_all(MAGIC).map_err(|e| DucError::io(path, e))?;
    file.write_all(&(mjson.len() as u64).to_le_bytes())
        .map_err(|e| DucError::io(path, e))?;
    file.write_all(&mjson).map_err(|e| DucError::io(path, e))?;
    let mut buf = Vec::with_capacity(1 << 16);
    for (_, _, data) in tensors {
        buf.clear();
        for &v in *data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        file.write_all(&buf).map_err(|e| DucError::io(path, e))?;
    }
    Ok(())
}

/// Read every tensor back (widened to f64) together with the metadata.
pub fn load_tensors(
    path: &Path,
) -> Result<(serde_json::Value, Vec<(String, Vec<usize>, Vec<f64>)>)> {
    let mut file = std::fs::File::open(path).map_err(|e| DucError::io(path, e))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|e| DucError::io(path, e))?;
    if &magic != MAGIC {
        return Err(DucError::Weights {
            path: path.to_path_buf(),
            msg: "bad magic header".to_string(),
        });
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|e| DucError::io(path, e))?;
    let mlen = u64::from_le_bytes(len_bytes) as usize;
    let mut mjson = vec![0u8; mlen];
    file.read_exact(&mut mjson)
        .map_err(|e| DucError::io(path, e))?;
    let manifest: ContainerManifest =
        serde_json::from_slice(&mjson).map_err(|e| DucError::Weights {
            path: path.to_path_buf(),
            msg: format!("manifest parse error: {e}"),
        })?;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)
        .map_err(|e| DucError::io(path, e))?;

    let mut out = Vec::with_capacity(manifest.tensors.len());
    for rec in &manifest.tensors {
        if rec.dtype != "f32" {
            return Err(DucError::Weights {
                path: path.to_path_buf(),
                msg: format!("unsupported dtype {}", rec.dtype),
            });
        }
        let count: usize = rec.shape.iter().product();
        let start = rec.offset as usize;
        let end = start + count * 4;
        if end > payload.len() {
            return Err(DucError::Weights {
                path: path.to_path_buf(),
                msg: format!("tensor {} out of bounds", rec.name),
            });
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push((rec.name.clone(), rec.shape.clone(), data));
    }
    Ok((manifest.meta, out))
}
