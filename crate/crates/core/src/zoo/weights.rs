use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::Tensor;

use super::model::param_spec;
use super::{LmConfig, LmModel, ZooError};

/// Weights container: magic `TLM1`, little-endian u32 JSON-header length,
/// JSON header (config, tensor name/shape list, CRC32 of payload), then the
/// tensors as row-major little-endian f32 in header order.
const MAGIC: &[u8; 4] = b"TLM1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: LmConfig,
    tensors: Vec<TensorMeta>,
    crc32: u32,
}

#[derive(Serialize, Deserialize, PartialEq, Eq)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

pub fn save_model(model: &LmModel, path: &Path) -> Result<(), ZooError> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, tensor) in model.params() {
        tensors.push(TensorMeta { name: name.to_string(), shape: tensor.shape().to_vec() });
        for &v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        config: model.config().clone(),
        tensors,
        crc32: crc32fast::hash(&payload),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(header_json.len() as u32).to_le_bytes())?;
    f.write_all(&header_json)?;
    f.write_all(&payload)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<LmModel, ZooError> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    read_exact(&mut f, &mut magic)?;
    if &magic != MAGIC {
        return Err(ZooError::BadMagic);
    }
    let mut len_bytes = [0u8; 4];
    read_exact(&mut f, &mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    read_exact(&mut f, &mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| ZooError::Weights(format!("bad header: {e}")))?;

    // tensor list must match the canonical spec for the config
    let spec = param_spec(&header.config);
    if header.tensors.len() != spec.len()
        || header
            .tensors
            .iter()
            .zip(spec.iter())
            .any(|(m, (name, shape))| &m.name != name || &m.shape != shape)
    {
        return Err(ZooError::Weights("tensor list does not match config".into()));
    }

    let payload_len: usize =
        header.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 4).sum();
    let mut payload = vec![0u8; payload_len];
    read_exact(&mut f, &mut payload)?;
    let mut trailing = [0u8; 1];
    if f.read(&mut trailing)? != 0 {
        return Err(ZooError::Weights("trailing bytes after payload".into()));
    }
    let found = crc32fast::hash(&payload);
    if found != header.crc32 {
        return Err(ZooError::ChecksumMismatch { expected: header.crc32, found });
    }

    let mut named = HashMap::new();
    let mut offset = 0usize;
    for meta in &header.tensors {
        let numel: usize = meta.shape.iter().product();
        let data: Vec<f32> = payload[offset..offset + numel * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        offset += numel * 4;
        named.insert(
            meta.name.clone(),
            Tensor::new(meta.shape.clone(), data).map_err(|e| ZooError::Weights(e.to_string()))?,
        );
    }
    LmModel::from_tensors(header.config, named)
}

fn read_exact(f: &mut std::fs::File, buf: &mut [u8]) -> Result<(), ZooError> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = f.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(ZooError::Truncated);
        }
        filled += n;
    }
    Ok(())
}
