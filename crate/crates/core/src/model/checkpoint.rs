//! Self-describing binary checkpoint container.
//!
//! Layout: 4-byte magic `OIKC`, a little-endian u32 header length, a JSON
//! header (format version, dtype, config, parameter manifest), then the
//! raw little-endian parameter data in manifest order. Round-trips are
//! bit-exact.

use super::{ModelConfig, TransformerModel};
use crate::autodiff::Element;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

const MAGIC: &[u8; 4] = b"OIKC";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

/// Serialize a model to the container format.
pub fn checkpoint_bytes<F: Element>(model: &TransformerModel<F>) -> Vec<u8> {
    let named = model.named_params();
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: F::DTYPE.to_string(),
        config: model.config.clone(),
        params: named
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, t) in &named {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

/// Decode a model from container bytes. Rejects bad magic, unknown
/// versions, dtype mismatches, manifest drift, short/long payloads, and
/// non-finite parameter values.
pub fn checkpoint_from_bytes<F: Element>(bytes: &[u8]) -> Result<TransformerModel<F>> {
    if bytes.len() < 8 {
        return Err(Error::Data("checkpoint shorter than its header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Data("bad checkpoint magic".into()));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body_start = 8usize
        .checked_add(header_len)
        .ok_or_else(|| Error::Data("header length overflows".into()))?;
    if bytes.len() < body_start {
        return Err(Error::Data("truncated checkpoint header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[8..body_start])
        .map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {}",
            header.format_version
        )));
    }
    if header.dtype != F::DTYPE {
        return Err(Error::Data(format!(
            "checkpoint dtype {} does not match requested {}",
            header.dtype,
            F::DTYPE
        )));
    }
    header.config.validate()?;

    let mut model = TransformerModel::<F>::init(header.config.clone())?;
    {
        let expected = model.named_params();
        if expected.len() != header.params.len() {
            return Err(Error::Data(format!(
                "manifest has {} params, architecture has {}",
                header.params.len(),
                expected.len()
            )));
        }
        for ((name, t), entry) in expected.iter().zip(&header.params) {
            if *name != entry.name || t.shape() != entry.shape.as_slice() {
                return Err(Error::Data(format!(
                    "manifest entry {} {:?} does not match architecture {} {:?}",
                    entry.name,
                    entry.shape,
                    name,
                    t.shape()
                )));
            }
        }
    }

    let mut cursor = body_start;
    for param in model.params_mut() {
        let n_bytes = param.len() * F::BYTES;
        let end = cursor
            .checked_add(n_bytes)
            .ok_or_else(|| Error::Data("parameter payload overflows".into()))?;
        if bytes.len() < end {
            return Err(Error::Data("truncated checkpoint payload".into()));
        }
        let src = &bytes[cursor..end];
        for (i, v) in param.data_mut().iter_mut().enumerate() {
            *v = F::read_le(&src[i * F::BYTES..(i + 1) * F::BYTES]);
        }
        if param.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "checkpoint parameter".into(),
            });
        }
        cursor = end;
    }
    if cursor != bytes.len() {
        return Err(Error::Data(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - cursor
        )));
    }
    Ok(model)
}

pub fn save_checkpoint<F: Element>(model: &TransformerModel<F>, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<F: Element>(path: &Path) -> Result<TransformerModel<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
