//! Checkpoint container.
//!
//! ```text
//! "STEERKIT"            8 bytes
//! manifest length       u64, little endian
//! manifest              UTF-8 JSON
//! tensor blobs          little-endian f32, concatenated in manifest order
//! ```
//!
//! Each manifest tensor entry records its blob offset (relative to the first blob
//! byte), byte length and a SHA-256 of the blob bytes.

use crate::augment::AugmentKind;
use crate::data::Standardizer;
use crate::error::{CheckpointError, Error, Result};
use crate::model::{Model, NamedParams};
use crate::steer::{FitHistory, SteerMap, SteerMaps};
use crate::tensor::Tensor;
use crate::trainer::{TrainConfig, TrainHistory};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"STEERKIT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum Status {
    Complete,
    /// Training stopped early; parameters are the last finite ones.
    Failed { reason: String },
}

/// How the steer maps in a checkpoint were obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapsOrigin {
    CoTrained,
    FrozenFit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub maps: SteerMaps<f32>,
    pub maps_origin: Option<MapsOrigin>,
    pub standardizer: Standardizer,
    pub history: TrainHistory,
    pub fit_history: Vec<FitHistory>,
    pub status: Status,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    num_classes: usize,
    tensors: Vec<TensorEntry>,
    config: TrainConfig,
    stats: Standardizer,
    maps_origin: Option<MapsOrigin>,
    history: TrainHistory,
    fit_history: Vec<FitHistory>,
    status: Status,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn has_map(&self, kind: AugmentKind) -> bool {
        self.maps.contains_key(&kind)
    }

    pub fn map(&self, kind: AugmentKind) -> Result<&SteerMap<f32>> {
        self.maps.get(&kind).ok_or_else(|| {
            Error::Usage(format!(
                "checkpoint has no {kind} map; fit-maps required before using it"
            ))
        })
    }

    /// Default ΔM weight for this checkpoint's model kind.
    pub fn default_wm(&self) -> f64 {
        self.config.model_kind.default_wm()
    }

    fn named_tensors(&self) -> Vec<(&str, &Tensor<f32>)> {
        let mut out: Vec<(&str, &Tensor<f32>)> =
            self.model.params().iter().map(|(n, t)| (n.as_str(), t)).collect();
        for m in self.maps.values() {
            out.extend(m.params().iter().map(|(n, t)| (n.as_str(), t)));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs = Vec::new();
        let mut entries = Vec::new();
        for (name, t) in self.named_tensors() {
            let start = blobs.len();
            for v in t.data() {
                blobs.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset: start as u64,
                length: (blobs.len() - start) as u64,
                sha256: sha256_hex(&blobs[start..]),
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            num_classes: self.model.num_classes,
            tensors: entries,
            config: self.config.clone(),
            stats: self.standardizer.clone(),
            maps_origin: self.maps_origin,
            history: self.history.clone(),
            fit_history: self.fit_history.clone(),
            status: self.status.clone(),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Usage(format!("manifest serialization: {e}")))?;
        let mut out = Vec::with_capacity(16 + json.len() + blobs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated("missing manifest length".into()));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if mlen > body.len() {
            return Err(CheckpointError::Truncated(format!(
                "manifest declares {mlen} bytes, only {} present",
                body.len()
            )));
        }
        let raw: serde_json::Value =
            serde_json::from_slice(&body[..mlen]).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        // Check the version before the full schema so old files get the right error.
        let found = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found,
                expected: FORMAT_VERSION,
            });
        }
        let manifest: Manifest =
            serde_json::from_value(raw).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let blobs = &body[mlen..];

        let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        let mut order = Vec::new();
        let mut expected_offset = 0u64;
        for e in &manifest.tensors {
            let structure = |msg: String| CheckpointError::Structure {
                name: e.name.clone(),
                msg,
            };
            let end = e.offset.checked_add(e.length).ok_or_else(|| structure("offset overflow".into()))?;
            if end as usize > blobs.len() {
                return Err(CheckpointError::Truncated(format!(
                    "tensor `{}` ends at byte {end}, blob section has {}",
                    e.name,
                    blobs.len()
                )));
            }
            if e.offset != expected_offset {
                return Err(structure(format!("offset {} but previous tensor ends at {expected_offset}", e.offset)));
            }
            let n: usize = e.shape.iter().product();
            if e.shape.is_empty() || n == 0 || (n * 4) as u64 != e.length {
                return Err(structure(format!(
                    "shape {:?} needs {} bytes, manifest declares {}",
                    e.shape,
                    n * 4,
                    e.length
                )));
            }
            let blob = &blobs[e.offset as usize..end as usize];
            if sha256_hex(blob) != e.sha256 {
                return Err(CheckpointError::Checksum { name: e.name.clone() });
            }
            let data: Vec<f32> = blob
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| structure(err.to_string()))?;
            if tensors.insert(e.name.clone(), t).is_some() {
                return Err(structure("duplicate tensor name".into()));
            }
            order.push(e.name.clone());
            expected_offset = end;
        }
        if expected_offset as usize != blobs.len() {
            return Err(CheckpointError::Structure {
                name: "<blob section>".into(),
                msg: format!("{} trailing bytes after the last tensor", blobs.len() - expected_offset as usize),
            });
        }

        let take = |prefix: &str| -> NamedParams<f32> {
            order
                .iter()
                .filter(|n| n.starts_with(prefix))
                .map(|n| (n.clone(), tensors[n].clone()))
                .collect()
        };
        let enc = &manifest.config.encoder;
        let mut model_params = take("encoder.");
        model_params.extend(take("head."));
        let model = Model::from_parts(enc.clone(), manifest.num_classes, model_params).map_err(|e| {
            CheckpointError::Structure {
                name: "model".into(),
                msg: e.to_string(),
            }
        })?;
        let mut maps = SteerMaps::new();
        for kind in AugmentKind::ALL {
            let p = take(&format!("maps.{kind}."));
            if p.is_empty() {
                continue;
            }
            let m = SteerMap::from_parts(kind, enc.embed_dim, p).map_err(|e| CheckpointError::Structure {
                name: format!("maps.{kind}"),
                msg: e.to_string(),
            })?;
            maps.insert(kind, m);
        }
        let known = model.params().len() + maps.values().map(|m| m.params().len()).sum::<usize>();
        if known != order.len() {
            return Err(CheckpointError::Structure {
                name: "<tensor table>".into(),
                msg: "unrecognized tensor names".into(),
            });
        }
        Ok(Checkpoint {
            config: manifest.config,
            model,
            maps,
            maps_origin: manifest.maps_origin,
            standardizer: manifest.stats,
            history: manifest.history,
            fit_history: manifest.fit_history,
            status: manifest.status,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

/// Short content hash used to identify a checkpoint file.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    sha256_hex(bytes)[..16].to_string()
}
