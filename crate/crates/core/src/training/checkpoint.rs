//! Checkpoint file format (`.cflx`).
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CFLX"
//! 4       4     format version, u32 (currently 1)
//! 8       4     metadata length N, u32
//! 12      N     metadata, UTF-8 JSON (see `Metadata`)
//! 12+N    ...   f64 payloads in declaration order:
//!               every parameter tensor, then every Adam first moment,
//!               then every Adam second moment, then the loss history
//! ```
//!
//! The metadata names each parameter tensor and its shape, so a reader can
//! compute payload sizes without knowing the model layout. Trailing bytes
//! after the loss history are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamMoments, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CFLX";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub params: ModelParams,
    pub moments: AdamMoments,
    pub step: u64,
    pub loss_history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    model: ModelConfig,
    train: Option<TrainConfig>,
    step: u64,
    loss_history_len: usize,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Metadata {
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            loss_history_len: self.loss_history.len(),
            tensors: self
                .params
                .names()
                .into_iter()
                .zip(self.params.tensors())
                .map(|(name, t)| TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let meta = serde_json::to_vec(&meta)?;
        let meta_len = u32::try_from(meta.len())
            .map_err(|_| Error::contract("checkpoint metadata exceeds 4 GiB"))?;

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&meta_len.to_le_bytes());
        out.extend_from_slice(&meta);
        let payload = self
            .params
            .tensors()
            .into_iter()
            .chain(&self.moments.m)
            .chain(&self.moments.v)
            .flat_map(|t| t.data().iter());
        for v in payload.chain(&self.loss_history) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.error_at(0, "bad magic, not a CFLX checkpoint"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.error_at(4, &format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let meta_len = r.u32()? as usize;
        let meta_start = r.pos;
        let meta: Metadata = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| r.error_at(meta_start, &format!("metadata: {e}")))?;
        meta.model
            .validate()
            .map_err(|e| r.error_at(meta_start, &format!("metadata: {e}")))?;

        let expected = ModelParams::shapes(&meta.model);
        let listed: Vec<&Vec<usize>> = meta.tensors.iter().map(|t| &t.shape).collect();
        if listed.len() != expected.len() || listed.iter().zip(&expected).any(|(a, b)| *a != b) {
            return Err(r.error_at(meta_start, "tensor manifest does not match model config"));
        }

        let read_set = |r: &mut Reader| -> Result<Vec<Tensor>> {
            expected
                .iter()
                .map(|shape| {
                    let n = shape.iter().product();
                    Tensor::new(shape.clone(), r.f64s(n)?)
                })
                .collect()
        };
        let params = ModelParams::from_tensors(&meta.model, read_set(&mut r)?)?;
        let m = read_set(&mut r)?;
        let v = read_set(&mut r)?;
        let loss_history = r.f64s(meta.loss_history_len)?;
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, "trailing bytes after payload"));
        }
        Ok(Checkpoint {
            model: meta.model,
            train: meta.train,
            params,
            moments: AdamMoments { m, v },
            step: meta.step,
            loss_history,
        })
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: usize, detail: &str) -> Error {
        Error::Format {
            offset: offset as u64,
            detail: detail.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error_at(
                self.bytes.len(),
                &format!("truncated: needed {n} bytes at offset {}", self.pos),
            )),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.error_at(self.pos, "length overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
