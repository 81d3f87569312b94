//! Single-file parameter archives.
//!
//! Byte layout (all integers little-endian):
//!
//! | offset      | size | content                                   |
//! |-------------|------|-------------------------------------------|
//! | 0           | 8    | magic `b"PTACKPT\0"`                      |
//! | 8           | 4    | `u32` format version (currently 1)        |
//! | 12          | 8    | `u64` manifest length `M` in bytes        |
//! | 20          | M    | UTF-8 JSON manifest                        |
//! | 20 + M      | rest | `f32` payload, tensors in manifest order  |
//!
//! The manifest lists every tensor as `{component, name, shape, offset, length}`
//! where `offset`/`length` count `f32` elements into the payload, and carries
//! the stage tag, network config, training image size, seed and the SHA-256 of
//! the payload.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io_util::{f32s_to_le, le_to_f32s, sha256_hex, write_atomic};
use crate::params::ParamStore;
use crate::tensor::Tensor;

use super::{Network, NetworkConfig};

pub const MAGIC: &[u8; 8] = b"PTACKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("invalid checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint payload checksum mismatch")]
    Checksum,
    #[error("checkpoint has no component {0:?}")]
    MissingComponent(String),
    #[error("checkpoint stage is {found:?}, expected {expected:?}")]
    WrongStage { expected: Stage, found: Stage },
    #[error("parameter {name} missing or has wrong shape")]
    Parameter { name: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sgp,
    Lsc,
    Pta,
    /// Feature/classifier network used by the evaluation metrics.
    Extractor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    component: String,
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    stage: Stage,
    dtype: String,
    seed: u64,
    network: NetworkConfig,
    image_height: usize,
    image_width: usize,
    #[serde(default)]
    extra: serde_json::Value,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub network: NetworkConfig,
    pub image_height: usize,
    pub image_width: usize,
    pub seed: u64,
    /// Free-form stage-specific metadata (e.g. training config echo).
    pub extra: serde_json::Value,
    pub components: Vec<(String, ParamStore<f32>)>,
}

impl Checkpoint {
    pub fn new(stage: Stage, network: NetworkConfig, image_height: usize, image_width: usize) -> Self {
        Self {
            stage,
            network,
            image_height,
            image_width,
            seed: network.seed,
            extra: serde_json::Value::Null,
            components: Vec::new(),
        }
    }

    pub fn with_component(mut self, name: &str, params: &ParamStore<f32>) -> Self {
        self.components.push((name.to_string(), params.clone()));
        self
    }

    pub fn component(&self, name: &str) -> Result<&ParamStore<f32>, CheckpointError> {
        self.components
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
            .ok_or_else(|| CheckpointError::MissingComponent(name.to_string()))
    }

    pub fn expect_stage(&self, expected: Stage) -> Result<(), CheckpointError> {
        if self.stage != expected {
            return Err(CheckpointError::WrongStage {
                expected,
                found: self.stage,
            });
        }
        Ok(())
    }

    /// Overwrites `net`'s parameters with the stored component, checking that
    /// names and shapes line up exactly.
    pub fn load_into<A>(&self, name: &str, net: &mut Network<A>) -> Result<(), CheckpointError> {
        let stored = self.component(name)?;
        if stored.len() != net.params.len() {
            return Err(CheckpointError::Parameter {
                name: format!("{name} (parameter count)"),
            });
        }
        for (id, pname, t) in net.params.clone().iter() {
            let sid = stored.id(pname).ok_or_else(|| CheckpointError::Parameter { name: pname.into() })?;
            let src = stored.get(sid);
            if src.shape() != t.shape() {
                return Err(CheckpointError::Parameter { name: pname.into() });
            }
            *net.params.get_mut(id) = src.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let mut offset = 0;
        for (component, store) in &self.components {
            for (_, name, t) in store.iter() {
                tensors.push(TensorEntry {
                    component: component.clone(),
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                    length: t.numel(),
                });
                offset += t.numel();
                payload.extend(f32s_to_le(t.data()));
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            stage: self.stage,
            dtype: "f32le".into(),
            seed: self.seed,
            network: self.network,
            image_height: self.image_height,
            image_width: self.image_width,
            extra: self.extra.clone(),
            tensors,
            payload_sha256: sha256_hex(&payload),
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 20 {
            return Err(CheckpointError::Truncated);
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + mlen).ok_or(CheckpointError::Truncated)?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(manifest.format_version));
        }
        let payload = &bytes[20 + mlen..];
        if sha256_hex(payload) != manifest.payload_sha256 {
            return Err(CheckpointError::Checksum);
        }
        let values = le_to_f32s(payload);
        let mut components: Vec<(String, ParamStore<f32>)> = Vec::new();
        for e in manifest.tensors {
            let data = values
                .get(e.offset..e.offset + e.length)
                .ok_or(CheckpointError::Truncated)?
                .to_vec();
            let t = Tensor::from_vec(&e.shape, data).map_err(|_| CheckpointError::Parameter { name: e.name.clone() })?;
            match components.iter_mut().find(|(c, _)| *c == e.component) {
                Some((_, store)) => {
                    store.add(e.name, t);
                }
                None => {
                    let mut store = ParamStore::new();
                    store.add(e.name, t);
                    components.push((e.component, store));
                }
            }
        }
        Ok(Self {
            stage: manifest.stage,
            network: manifest.network,
            image_height: manifest.image_height,
            image_width: manifest.image_width,
            seed: manifest.seed,
            extra: manifest.extra,
            components,
        })
    }

    pub fn save(&self, path: &Path) -> Result<String, CheckpointError> {
        let bytes = self.to_bytes();
        write_atomic(path, &bytes).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized archive.
    pub fn sha256(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_unet, component};

    #[test]
    fn round_trip_reproduces_forward_outputs() {
        let cfg = NetworkConfig::default();
        let net = build_unet(&cfg, component::G_LF2HF).unwrap();
        let ckpt = Checkpoint::new(Stage::Pta, cfg, 64, 64).with_component(component::G_LF2HF, &net.params);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back, ckpt);
        let mut fresh = build_unet(&NetworkConfig { seed: 99, ..cfg }, component::G_LF2HF).unwrap();
        back.load_into(component::G_LF2HF, &mut fresh).unwrap();
        let x = Tensor::from_vec(&[1, 1, 16, 16], (0..256).map(|i| (i as f32 / 128.0) - 1.0).collect()).unwrap();
        assert_eq!(fresh.infer(&x).unwrap(), net.infer(&x).unwrap());
    }

    #[test]
    fn corrupted_payload_is_rejected() {
        let cfg = NetworkConfig::default();
        let net = build_unet(&cfg, "g").unwrap();
        let mut bytes = Checkpoint::new(Stage::Lsc, cfg, 64, 64).with_component("g", &net.params).to_bytes();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Checksum)));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn version_field_is_checked() {
        let mut bytes = Checkpoint::new(Stage::Sgp, NetworkConfig::default(), 8, 8).to_bytes();
        bytes[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Version(9))));
    }
}
