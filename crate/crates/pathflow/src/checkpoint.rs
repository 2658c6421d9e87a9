//! Checkpoint archive.
//!
//! `PFLOWCKP` magic, u32 format version, u64 header length, a JSON header,
//! then every tensor's data as f64 little-endian in header order.

use std::fs;
use std::path::Path;

use pathflow_core::datagen::DatasetManifest;
use pathflow_core::model::{FlowTransformer, ModelConfig};
use pathflow_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::netio::write_file;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PFLOWCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub manifest_hash: String,
    /// The manifest itself, so inference can normalize inputs without the
    /// dataset directory.
    pub manifest: DatasetManifest,
    /// Epoch (1-based) the parameters come from.
    pub epoch: usize,
    pub val_loss: Option<f64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest_hash: String,
    pub manifest: DatasetManifest,
    pub epoch: usize,
    pub val_loss: Option<f64>,
    pub model: FlowTransformer,
}

impl Checkpoint {
    pub fn header(&self) -> CheckpointHeader {
        let p = self.model.params();
        CheckpointHeader {
            format_version: FORMAT_VERSION,
            config: self.model.config().clone(),
            manifest_hash: self.manifest_hash.clone(),
            manifest: self.manifest.clone(),
            epoch: self.epoch,
            val_loss: self.val_loss.filter(|v| v.is_finite()),
            tensors: p
                .names()
                .iter()
                .zip(p.tensors())
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header())?;
        let data_len: usize = self.model.params().tensors().iter().map(|t| t.len() * 8).sum();
        let mut out = Vec::with_capacity(20 + header.len() + data_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.model.params().tensors() {
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_bytes = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(header_bytes)?;
        let mut at = 20 + hlen;
        let mut named = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let body = bytes.get(at..at + 8 * n).ok_or_else(|| bad("truncated tensor data"))?;
            let data = body
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            named.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
            at += 8 * n;
        }
        if at != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            manifest_hash: header.manifest_hash,
            manifest: header.manifest,
            epoch: header.epoch,
            val_loss: header.val_loss,
            model: FlowTransformer::from_params(header.config, named)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
