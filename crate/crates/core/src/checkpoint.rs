//! Named-tensor checkpoint container.
//!
//! Layout: magic `OLAB`, u32-LE version 1, u32-LE header length, a UTF-8
//! JSON header, then the little-endian f32 payload. Tensor offsets in the
//! header are relative to the start of the payload.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Model, Param, ParamRole};
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"OLAB";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub tensors: Vec<TensorEntry>,
    pub config: RunConfig,
    pub step: usize,
}

/// A decoded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: usize,
    pub model: Model<f32>,
}

pub fn encode(model: &Model<f32>, config: &RunConfig, step: usize) -> Vec<u8> {
    let mut tensors = Vec::with_capacity(model.params().len());
    let mut offset = 0u64;
    for p in model.params() {
        let length = 4 * p.tensor.numel() as u64;
        tensors.push(TensorEntry {
            name: p.name.clone(),
            dtype: DType::F32,
            shape: p.tensor.shape().to_vec(),
            offset,
            length,
        });
        offset += length;
    }
    let mut config = config.clone();
    config.model = model.config().clone();
    let header = serde_json::to_vec(&Header { tensors, config, step }).expect("header serializes");
    let mut buf = Vec::with_capacity(12 + header.len() + offset as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for p in model.params() {
        for x in p.tensor.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |offset: usize, msg: String| Error::Format {
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 12 {
        return Err(bad(bytes.len(), "truncated preamble".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad(0, "bad magic, expected OLAB".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(4, format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = 12 + hlen;
    if bytes.len() < body {
        return Err(bad(bytes.len(), format!("header declares {hlen} bytes")));
    }
    let header: Header = serde_json::from_slice(&bytes[12..body]).map_err(|e| bad(12 + e.column(), e.to_string()))?;
    let payload = &bytes[body..];

    let mut seen = HashSet::new();
    let mut expected = 0u64;
    let mut params = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        if !seen.insert(t.name.as_str()) {
            return Err(bad(12, format!("duplicate tensor {}", t.name)));
        }
        if t.dtype != DType::F32 {
            return Err(bad(12, format!("tensor {} has unsupported dtype", t.name)));
        }
        let n: usize = t.shape.iter().product();
        if t.length != 4 * n as u64 || t.offset != expected {
            return Err(bad(12, format!("tensor {} has inconsistent offset or length", t.name)));
        }
        expected += t.length;
        let start = body + t.offset as usize;
        let Some(raw) = payload.get(t.offset as usize..(t.offset + t.length) as usize) else {
            return Err(bad(bytes.len(), format!("payload ends inside tensor {}", t.name)));
        };
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(t.shape.clone(), data).map_err(|e| bad(start, e.to_string()))?;
        params.push(Param {
            name: t.name.clone(),
            // Overwritten from the architecture by `from_params`.
            role: ParamRole::Projection,
            tensor,
        });
    }
    if payload.len() as u64 != expected {
        return Err(bad(
            body + expected.min(payload.len() as u64) as usize,
            format!("payload holds {} bytes, tensors need {expected}", payload.len()),
        ));
    }
    let model = Model::from_params(header.config.model.clone(), params)?;
    Ok(Checkpoint {
        config: header.config,
        step: header.step,
        model,
    })
}

/// Writes atomically via a temporary sibling file.
pub fn save(path: &Path, model: &Model<f32>, config: &RunConfig, step: usize) -> Result<()> {
    let tmp = path.with_extension("bin.tmp");
    fs::write(&tmp, encode(model, config, step)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
