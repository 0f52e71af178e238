//! Enrolled-fingerprint store.
//!
//! Devices join and leave by adding or removing their template vectors; no
//! operation here touches extractor weights. Every record is pinned to the
//! fingerprint (weight-file hash) of the extractor that produced it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedder::RffVector;
use crate::util::{serde_f64, sha256_hex};
use crate::{Error, Result};

pub const DEFAULT_K: usize = 15;
pub const REGISTRY_MAGIC: &[u8; 8] = b"RFFIREG\0";
pub const REGISTRY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryRecord {
    pub device_id: String,
    pub vectors: Vec<RffVector>,
    /// Seconds since the Unix epoch.
    pub enrolled_at: u64,
    pub extractor_fingerprint: String,
}

impl RegistryRecord {
    /// Mean distance of the templates to their centroid.
    pub fn dispersion(&self) -> f64 {
        let dim = self.vectors[0].dim();
        let n = self.vectors.len() as f64;
        let mut c = vec![0.0; dim];
        for v in &self.vectors {
            for (ci, x) in c.iter_mut().zip(&v.0) {
                *ci += *x as f64 / n;
            }
        }
        self.vectors
            .iter()
            .map(|v| v.0.iter().zip(&c).map(|(x, y)| (*x as f64 - y).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub records: BTreeMap<String, RegistryRecord>,
    pub k_neighbors: usize,
    /// Rogue threshold on the mean K-nearest distance. Infinite until
    /// calibrated.
    #[serde(with = "serde_f64")]
    pub rogue_threshold: f64,
    pub extractor_fingerprint: String,
}

impl Registry {
    pub fn new(extractor_fingerprint: impl Into<String>, k_neighbors: usize) -> Result<Self> {
        if k_neighbors == 0 {
            return Err(Error::Config("k_neighbors must be >= 1".into()));
        }
        Ok(Self {
            records: BTreeMap::new(),
            k_neighbors,
            rogue_threshold: f64::INFINITY,
            extractor_fingerprint: extractor_fingerprint.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, device_id: &str) -> bool {
        self.records.contains_key(device_id)
    }

    pub fn device_ids(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    pub fn n_vectors(&self) -> usize {
        self.records.values().map(|r| r.vectors.len()).sum()
    }

    /// Dimension of stored vectors, if any are stored.
    pub fn dim(&self) -> Option<usize> {
        self.records.values().next().map(|r| r.vectors[0].dim())
    }

    /// Every stored template with its owner, in device-id order.
    pub fn templates(&self) -> impl Iterator<Item = (&str, &RffVector)> {
        self.records
            .values()
            .flat_map(|r| r.vectors.iter().map(move |v| (r.device_id.as_str(), v)))
    }

    pub fn set_threshold(&mut self, lambda: f64) -> Result<()> {
        if lambda.is_nan() || lambda < 0.0 {
            return Err(Error::Config(format!("rogue threshold must be >= 0, got {lambda}")));
        }
        self.rogue_threshold = lambda;
        Ok(())
    }

    /// Adds a device. `extractor_fingerprint` must match the registry's.
    pub fn enroll(
        &mut self,
        device_id: &str,
        vectors: Vec<RffVector>,
        enrolled_at: u64,
        extractor_fingerprint: &str,
    ) -> Result<()> {
        if extractor_fingerprint != self.extractor_fingerprint {
            return Err(Error::Version(format!(
                "vectors for {device_id:?} come from extractor {extractor_fingerprint}, registry uses {}",
                self.extractor_fingerprint
            )));
        }
        if self.records.contains_key(device_id) {
            return Err(Error::Conflict(device_id.to_string()));
        }
        if vectors.is_empty() {
            return Err(Error::Contract(format!("no vectors supplied for {device_id:?}")));
        }
        let dim = self.dim().unwrap_or(vectors[0].dim());
        for (i, v) in vectors.iter().enumerate() {
            if v.dim() != dim {
                return Err(Error::Contract(format!(
                    "vector {i} of {device_id:?} has dimension {}, expected {dim}",
                    v.dim()
                )));
            }
            if (v.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!("vector {i} of {device_id:?} is not unit norm")));
            }
        }
        let record = RegistryRecord {
            device_id: device_id.to_string(),
            vectors,
            enrolled_at,
            extractor_fingerprint: extractor_fingerprint.to_string(),
        };
        info!(
            "enrolled {device_id} with {} templates, dispersion {:.4}",
            record.vectors.len(),
            record.dispersion()
        );
        self.records.insert(device_id.to_string(), record);
        Ok(())
    }

    /// Removes a device and returns its record.
    pub fn revoke(&mut self, device_id: &str) -> Result<RegistryRecord> {
        self.records
            .remove(device_id)
            .ok_or_else(|| Error::NotFound(device_id.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = FileHeader::from_registry(self);
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.n_vectors() * self.dim().unwrap_or(0) + 32);
        out.extend_from_slice(REGISTRY_MAGIC);
        out.extend_from_slice(&REGISTRY_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, v) in self.templates() {
            for x in &v.0 {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Integrity(format!("registry: {m}"));
        if bytes.len() < 16 + 32 {
            return Err(corrupt("file too short"));
        }
        if &bytes[..8] != REGISTRY_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != REGISTRY_VERSION {
            return Err(Error::Version(format!(
                "registry format {version}, this build reads {REGISTRY_VERSION}"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let json = body.get(16..16 + hlen).ok_or_else(|| corrupt("header truncated"))?;
        let header: FileHeader = serde_json::from_slice(json).map_err(|e| corrupt(&format!("header: {e}")))?;
        let mut data = &body[16 + hlen..];
        let total: usize = header.records.iter().map(|r| r.n_vectors).sum();
        if data.len() != 4 * total * header.dim {
            return Err(corrupt("vector payload length does not match header"));
        }
        let mut records = BTreeMap::new();
        for r in header.records {
            let mut vectors = Vec::with_capacity(r.n_vectors);
            for _ in 0..r.n_vectors {
                let (chunk, rest) = data.split_at(4 * header.dim);
                data = rest;
                vectors.push(RffVector(
                    chunk
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ));
            }
            records.insert(
                r.device_id.clone(),
                RegistryRecord {
                    device_id: r.device_id,
                    vectors,
                    enrolled_at: r.enrolled_at,
                    extractor_fingerprint: header.extractor_fingerprint.clone(),
                },
            );
        }
        if header.k_neighbors == 0 {
            return Err(corrupt("k_neighbors is zero"));
        }
        Ok(Self {
            records,
            k_neighbors: header.k_neighbors,
            rogue_threshold: header.rogue_threshold,
            extractor_fingerprint: header.extractor_fingerprint,
        })
    }

    /// Writes the binary registry and a JSON manifest next to it. Returns
    /// the SHA-256 of the registry file.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        let manifest = Manifest {
            registry_sha256: sha256_hex(&bytes),
            header: FileHeader::from_registry(self),
            dispersion: self
                .records
                .values()
                .map(|r| (r.device_id.clone(), r.dispersion()))
                .collect(),
        };
        let mpath = manifest_path(path);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
        Ok(manifest.registry_sha256)
    }

    /// Loads a registry and returns it with the file's SHA-256.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::from_bytes(&bytes)?, sha256_hex(&bytes)))
    }

    /// Like [`load`](Self::load) but refuses a registry built with another
    /// extractor unless `force` is set.
    pub fn load_for_extractor(path: &Path, fingerprint: &str, force: bool) -> Result<(Self, String)> {
        let (reg, hash) = Self::load(path)?;
        if reg.extractor_fingerprint != fingerprint {
            if !force {
                return Err(Error::Version(format!(
                    "registry {} was built with extractor {}, current extractor is {fingerprint}",
                    path.display(),
                    reg.extractor_fingerprint
                )));
            }
            log::warn!("loading registry built with a different extractor (forced)");
        }
        Ok((reg, hash))
    }
}

/// `<file>.manifest.json` next to the registry file.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    k_neighbors: usize,
    #[serde(with = "serde_f64")]
    rogue_threshold: f64,
    extractor_fingerprint: String,
    dim: usize,
    records: Vec<RecordHeader>,
}

impl FileHeader {
    fn from_registry(reg: &Registry) -> Self {
        Self {
            k_neighbors: reg.k_neighbors,
            rogue_threshold: reg.rogue_threshold,
            extractor_fingerprint: reg.extractor_fingerprint.clone(),
            dim: reg.dim().unwrap_or(0),
            records: reg
                .records
                .values()
                .map(|r| RecordHeader {
                    device_id: r.device_id.clone(),
                    enrolled_at: r.enrolled_at,
                    n_vectors: r.vectors.len(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordHeader {
    device_id: String,
    enrolled_at: u64,
    n_vectors: usize,
}

#[derive(Serialize)]
struct Manifest {
    registry_sha256: String,
    #[serde(flatten)]
    header: FileHeader,
    dispersion: BTreeMap<String, f64>,
}
