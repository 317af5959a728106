//! Bit-exact checkpoint files.
//!
//! Layout:
//!
//! ```text
//! "MOEC"                 4 bytes magic
//! version                u32 little-endian (currently 1)
//! header_len             u64 little-endian
//! header                 header_len bytes of UTF-8 JSON, keys sorted:
//!                        {"config": {..}, "id": "..", "tensors": [
//!                          {"length": bytes, "name": "..", "offset": bytes, "shape": [..]}, ..]}
//! payload                little-endian f32 tensors, manifest order, offsets
//!                        relative to the start of the payload
//! ```
//!
//! Manifest order is the order of [`ModelWeights::tensors`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelId, ModelWeights};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MAGIC: [u8; 4] = *b"MOEC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub id: ModelId,
    pub config: ModelConfig,
    pub tensors: Vec<ManifestEntry>,
}

pub fn header_for(model: &ModelWeights) -> Header {
    let mut offset = 0u64;
    let tensors = model
        .tensors()
        .into_iter()
        .map(|(name, _, t)| {
            let length = 4 * t.numel() as u64;
            let entry = ManifestEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
                length,
            };
            offset += length;
            entry
        })
        .collect();
    Header {
        id: model.id.clone(),
        config: model.config,
        tensors,
    }
}

pub fn encode(model: &ModelWeights) -> Result<Vec<u8>> {
    let header = header_for(model);
    let header_bytes = serde_json::to_vec(&serde_json::to_value(&header)?)?;
    let payload_len: u64 = header.tensors.iter().map(|t| t.length).sum();
    let mut out = Vec::with_capacity(16 + header_bytes.len() + payload_len as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, _, t) in model.tensors() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<ModelWeights> {
    let take = |at: usize, n: usize, what: &str| -> Result<&[u8]> {
        bytes.get(at..at + n).ok_or_else(|| {
            Error::Truncated(format!("{what} needs {n} bytes at offset {at}, file has {}", bytes.len()))
        })
    };
    let magic: [u8; 4] = take(0, 4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = u32::from_le_bytes(take(4, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(take(8, 8, "header length")?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len)
        .map_err(|_| Error::Truncated(format!("header length {header_len} exceeds address space")))?;
    let header: Header = serde_json::from_slice(take(16, header_len, "header")?)?;
    header.config.validate()?;

    let mut model = ModelWeights::zeros(header.id.clone(), header.config)?;
    let expected = header_for(&model).tensors;
    if expected.len() != header.tensors.len() {
        return Err(Error::CountMismatch(format!(
            "config implies {} tensors, manifest lists {}",
            expected.len(),
            header.tensors.len()
        )));
    }
    for (want, got) in expected.iter().zip(&header.tensors) {
        if want != got {
            return Err(Error::CountMismatch(format!(
                "manifest entry {got:?} does not match expected {want:?}"
            )));
        }
    }

    let payload = &bytes[16 + header_len..];
    let payload_len: u64 = expected.iter().map(|t| t.length).sum();
    if (payload.len() as u64) < payload_len {
        return Err(Error::Truncated(format!(
            "payload has {} bytes, manifest declares {payload_len}",
            payload.len()
        )));
    }
    if payload.len() as u64 > payload_len {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            payload.len() as u64 - payload_len
        )));
    }

    for ((_, t), entry) in model.tensors_mut().into_iter().zip(&expected) {
        let start = entry.offset as usize;
        let raw = &payload[start..start + entry.length as usize];
        for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &ModelWeights, path: &Path) -> Result<()> {
    write_atomic(path, &encode(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelWeights> {
    decode(&std::fs::read(path)?)
}
