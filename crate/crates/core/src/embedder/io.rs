//! Weight file: `magic | version u32 | header_len u32 | JSON header |
//! f32 LE tensors | SHA-256 of everything before it`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::network::{EmbedderConfig, EmbedderWeights};
use crate::util::sha256_hex;
use crate::{Error, Result};

pub const WEIGHT_FILE_MAGIC: &[u8; 8] = b"RFFIWGT\0";
pub const WEIGHT_FILE_VERSION: u32 = 1;

/// Weights plus the provenance stored in the file header.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub weights: EmbedderWeights,
    pub seed: u64,
    /// Free-form creation metadata (tool version, training summary).
    pub metadata: BTreeMap<String, String>,
}

impl WeightFile {
    pub fn new(weights: EmbedderWeights, seed: u64) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert("tool".into(), env!("CARGO_PKG_NAME").into());
        metadata.insert("tool_version".into(), env!("CARGO_PKG_VERSION").into());
        Self {
            weights,
            seed,
            metadata,
        }
    }

    /// SHA-256 of the serialized file, used to pin registries and reports
    /// to one extractor.
    pub fn fingerprint(&self) -> String {
        sha256_hex(&weight_file_bytes(self))
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: EmbedderConfig,
    seed: u64,
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize, PartialEq, Debug)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn weight_file_bytes(wf: &WeightFile) -> Vec<u8> {
    let header = Header {
        config: wf.weights.config.clone(),
        seed: wf.seed,
        metadata: wf.metadata.clone(),
        tensors: wf
            .weights
            .layout()
            .into_iter()
            .map(|(name, shape)| TensorEntry { name, shape })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * wf.weights.n_params() + 32);
    out.extend_from_slice(WEIGHT_FILE_MAGIC);
    out.extend_from_slice(&WEIGHT_FILE_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in wf.weights.tensors() {
        for &v in t {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn parse_weight_file(bytes: &[u8]) -> Result<WeightFile> {
    let corrupt = |m: &str| Error::Integrity(format!("weight file: {m}"));
    if bytes.len() < 16 + 32 {
        return Err(corrupt("file too short"));
    }
    if &bytes[..8] != WEIGHT_FILE_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != WEIGHT_FILE_VERSION {
        return Err(Error::Version(format!(
            "weight file format {version}, this build reads {WEIGHT_FILE_VERSION}"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let json = body.get(16..16 + hlen).ok_or_else(|| corrupt("header truncated"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| corrupt(&format!("header: {e}")))?;
    let mut weights = EmbedderWeights::zeros(&header.config)?;
    let layout: Vec<TensorEntry> = weights
        .layout()
        .into_iter()
        .map(|(name, shape)| TensorEntry { name, shape })
        .collect();
    if layout != header.tensors {
        return Err(corrupt("tensor directory does not match the configured network"));
    }
    let mut data = &body[16 + hlen..];
    if data.len() != 4 * weights.n_params() {
        return Err(corrupt(&format!(
            "expected {} tensor bytes, found {}",
            4 * weights.n_params(),
            data.len()
        )));
    }
    for t in weights.tensors_mut() {
        for v in t.iter_mut() {
            let (head, rest) = data.split_at(4);
            *v = f32::from_le_bytes(head.try_into().unwrap()) as f64;
            data = rest;
        }
    }
    if !weights.is_finite() {
        return Err(corrupt("non-finite weight values"));
    }
    Ok(WeightFile {
        weights,
        seed: header.seed,
        metadata: header.metadata,
    })
}

pub fn write_weights(path: &Path, wf: &WeightFile) -> Result<String> {
    let bytes = weight_file_bytes(wf);
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Reads a weight file and returns it with its fingerprint.
pub fn read_weights(path: &Path) -> Result<(WeightFile, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let wf = parse_weight_file(&bytes)?;
    Ok((wf, sha256_hex(&bytes)))
}
