//! Binary checkpoints.
//!
//! Layout, little-endian: magic `CPDTCKPT`, u32 format version, u32 header
//! length, UTF-8 JSON header, then for each tensor listed in the header its
//! f32 values, then a SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::train::{AdamState, Progress, TrainConfig};

pub const MAGIC: &[u8; 8] = b"CPDTCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    progress: Progress,
    adam_t: u64,
    vocab_hash: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub train: TrainConfig,
    pub adam: AdamState,
    pub progress: Progress,
    pub vocab_hash: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let params = self.model.params();
        let mut entries = Vec::new();
        let mut blobs: Vec<&Tensor<f32>> = Vec::new();
        let groups = [("", None), ("adam.m/", Some(&self.adam.m)), ("adam.v/", Some(&self.adam.v))];
        for (prefix, moments) in groups {
            for (k, p) in params.iter().enumerate() {
                let t = moments.map_or(&p.tensor, |m| &m[k]);
                entries.push(TensorEntry {
                    name: format!("{prefix}{}", p.name),
                    rows: t.rows(),
                    cols: t.cols(),
                });
                blobs.push(t);
            }
        }
        let header = Header {
            model: self.model.config().clone(),
            train: self.train.clone(),
            progress: self.progress,
            adam_t: self.adam.t,
            vocab_hash: self.vocab_hash.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in blobs {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |m: &str| Error::Checkpoint(m.to_owned());
        if bytes.len() < 16 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch (truncated or corrupt file)"));
        }
        let hlen = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
        let json = body.get(16..16 + hlen).ok_or_else(|| bad("header runs past end of file"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut offset = 16 + hlen;
        let mut tensors = BTreeMap::new();
        for e in &header.tensors {
            let n = e.rows * e.cols;
            let raw = body
                .get(offset..offset + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past end of file", e.name)))?;
            offset += 4 * n;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if tensors.insert(e.name.clone(), Tensor::from_vec(e.rows, e.cols, data)?).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {}", e.name)));
            }
        }
        if offset != body.len() {
            return Err(bad("trailing bytes after tensors"));
        }
        let mut params = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in tensors {
            if let Some(n) = name.strip_prefix("adam.m/") {
                m.insert(n.to_owned(), t);
            } else if let Some(n) = name.strip_prefix("adam.v/") {
                v.insert(n.to_owned(), t);
            } else {
                params.insert(name, t);
            }
        }
        let model = Model::from_named_tensors(header.model, params).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let take = |map: &mut BTreeMap<String, Tensor<f32>>, what: &str| -> Result<Vec<Tensor<f32>>> {
            model
                .params()
                .iter()
                .map(|p| match map.remove(&p.name) {
                    Some(t) if t.shape() == p.tensor.shape() => Ok(t),
                    _ => Err(Error::Checkpoint(format!("missing or misshapen {what} for {}", p.name))),
                })
                .collect()
        };
        let adam = AdamState {
            m: take(&mut m, "first moment")?,
            v: take(&mut v, "second moment")?,
            t: header.adam_t,
        };
        if !m.is_empty() || !v.is_empty() {
            return Err(bad("optimizer state names unknown parameters"));
        }
        Ok(Checkpoint {
            model,
            train: header.train,
            adam,
            progress: header.progress,
            vocab_hash: header.vocab_hash,
        })
    }

    /// Writes through a temporary file so a failed save leaves no partial
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    /// A warning when the checkpoint was trained against another vocabulary.
    pub fn vocab_warning(&self, vocab_hash: &str) -> Option<String> {
        (self.vocab_hash != vocab_hash).then(|| {
            format!(
                "warning: checkpoint vocabulary hash {} differs from {}",
                short(&self.vocab_hash),
                short(vocab_hash)
            )
        })
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}
