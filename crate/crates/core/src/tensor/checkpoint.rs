use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"CORALCKP";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    attrs: BTreeMap<String, String>,
    step: u64,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

/// Parameters plus everything needed to continue training them.
///
/// File layout: 8-byte magic, little-endian u32 version, u64 header length,
/// JSON header, then for every tensor its values, first and second Adam
/// moments as little-endian f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub attrs: BTreeMap<String, String>,
    pub rng: RngState,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, params: ParamStore<f32>) -> Self {
        Self { kind: kind.into(), attrs: BTreeMap::new(), rng: RngState::default(), params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            attrs: self.attrs.clone(),
            step: self.params.step(),
            rng: self.rng,
            tensors: self.params.iter().map(|(n, t)| TensorEntry { name: n.to_owned(), shape: t.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(24 + json.len() + self.params.num_params() * 12);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (name, t) in self.params.iter() {
            let (m, v) = self.params.moments(name).expect("moments exist for every parameter");
            for xs in [t.data(), m, v] {
                for x in xs {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or_else(|| CheckpointError::Corrupt("truncated".into()))?;
        let json = body.get(..hlen).ok_or_else(|| CheckpointError::Corrupt("truncated header".into()))?;
        let header: Header = serde_json::from_slice(json)?;
        let mut data = &body[hlen..];
        let mut take = |n: usize| -> Result<Vec<f32>, CheckpointError> {
            if data.len() < n * 4 {
                return Err(CheckpointError::Corrupt("truncated tensor data".into()));
            }
            let (head, rest) = data.split_at(n * 4);
            data = rest;
            Ok(head.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let mut params = ParamStore::new();
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let value = take(n)?;
            let m = take(n)?;
            let v = take(n)?;
            let t = Tensor::new(&entry.shape, value).map_err(|e| CheckpointError::Corrupt(format!("{}: {e}", entry.name)))?;
            params.insert(entry.name.clone(), t);
            params.set_moments(&entry.name, m, v).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        }
        if !data.is_empty() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", data.len())));
        }
        params.set_step(header.step);
        Ok(Self { kind: header.kind, attrs: header.attrs, rng: header.rng, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 of the serialized file.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn attr(&self, key: &str) -> Option<&str> {
        self.attrs.get(key).map(String::as_str)
    }
}
