//! Binary checkpoint: magic, version, a length-prefixed JSON header, then
//! every parameter as raw little-endian f64 in header order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CharVocabulary;
use crate::error::{Error, Result};
use crate::tensor::NdArray;

use super::config::ModelConfig;
use super::network::Model;
use super::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"WLASCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    vocabulary: CharVocabulary,
    params: Vec<ParamEntry>,
    metadata: serde_json::Value,
}

/// A model plus free-form metadata (training state, provenance of the run).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: Model, metadata: serde_json::Value) -> Self {
        Checkpoint { model, metadata }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.model.config.clone(),
            vocabulary: self.model.vocab.clone(),
            params: self
                .model
                .params
                .iter()
                .map(|(name, v)| ParamEntry {
                    name: name.clone(),
                    shape: v.shape().to_vec(),
                })
                .collect(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + self.model.params.scalar_count() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, v) in self.model.params.iter() {
            for x in v.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            path: "<checkpoint>".into(),
            detail,
        };
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8).map_err(bad)? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(cur.take(4).map_err(bad)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(cur.take(8).map_err(bad)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(cur.take(len).map_err(bad)?)
            .map_err(|e| bad(format!("header: {e}")))?;
        let mut params = std::collections::BTreeMap::new();
        for entry in header.params {
            let n: usize = entry.shape.iter().product();
            let raw = cur.take(n * 8).map_err(bad)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(entry.name, NdArray::new(entry.shape, data)?);
        }
        if cur.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        let model = Model::from_parts(header.config, header.vocabulary, ParamStore::from_map(params))?;
        Ok(Checkpoint {
            model,
            metadata: header.metadata,
        })
    }

    /// Writes through a temporary file in the same directory, then renames.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let io = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
        {
            let mut f = std::fs::File::create(&tmp).map_err(io)?;
            f.write_all(&bytes).map_err(io)?;
            f.sync_all().map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { detail, .. } => Error::Format {
                path: path.to_path_buf(),
                detail,
            },
            other => other,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {} (wanted {n} more)", self.pos)),
        }
    }
}
