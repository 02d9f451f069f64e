//! DORM-CKPT v1 tensor container.
//!
//! Layout: an 8-byte little-endian header length, a UTF-8 JSON header, then
//! the concatenated little-endian row-major `f32` blobs. The header maps each
//! tensor name to `{dtype, shape, offset, nbytes, sha256}` (offsets are
//! relative to the start of the blob section) and carries a `meta` object.

use std::collections::BTreeMap;
use std::path::Path;

use dorm_tensor::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{DormError, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const EXTENSION: &str = "dormckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: String,
    #[serde(default)]
    pub config: Value,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub domain: Option<String>,
    #[serde(default, flatten)]
    pub extra: Map<String, Value>,
}

impl CheckpointMeta {
    pub fn new(kind: &str, config: Value) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            config,
            seed: None,
            domain: None,
            extra: Map::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
    sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

fn corrupt(msg: impl Into<String>) -> DormError {
    DormError::CorruptCheckpoint(msg.into())
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, tensors: BTreeMap<String, Tensor<f32>>) -> Self {
        Self { meta, tensors }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = Map::new();
        let mut blobs = Vec::new();
        for (name, t) in &self.tensors {
            let bytes = t.to_le_bytes();
            let entry = Entry {
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset: blobs.len() as u64,
                nbytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            };
            header.insert(name.clone(), serde_json::to_value(entry)?);
            blobs.extend_from_slice(&bytes);
        }
        header.insert("meta".into(), serde_json::to_value(&self.meta)?);
        let json = serde_json::to_vec(&Value::Object(header))?;
        let mut out = Vec::with_capacity(8 + json.len() + blobs.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(corrupt("file shorter than header length prefix"));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let header_end = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("header length exceeds file size"))?;
        let header: Map<String, Value> = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| corrupt(format!("header is not a JSON object: {e}")))?;
        let meta_value = header
            .get("meta")
            .cloned()
            .ok_or_else(|| corrupt("header has no meta object"))?;
        let meta: CheckpointMeta = serde_json::from_value(meta_value)
            .map_err(|e| corrupt(format!("bad meta: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(DormError::VersionMismatch {
                found: meta.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let blobs = &bytes[header_end..];
        let mut tensors = BTreeMap::new();
        for (name, value) in header {
            if name == "meta" {
                continue;
            }
            let entry: Entry = serde_json::from_value(value)
                .map_err(|e| corrupt(format!("bad entry for `{name}`: {e}")))?;
            if entry.dtype != "f32" {
                return Err(corrupt(format!("`{name}` has unsupported dtype {}", entry.dtype)));
            }
            let numel: usize = entry.shape.iter().product();
            if entry.nbytes as usize != numel * 4 {
                return Err(corrupt(format!("`{name}` byte count does not match its shape")));
            }
            let start = entry.offset as usize;
            let end = start
                .checked_add(entry.nbytes as usize)
                .filter(|&e| e <= blobs.len())
                .ok_or_else(|| corrupt(format!("`{name}` extends past end of file")))?;
            let raw = &blobs[start..end];
            if hex::encode(Sha256::digest(raw)) != entry.sha256 {
                return Err(DormError::Checksum(name));
            }
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(name, Tensor::new(entry.shape, data));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                DormError::NotFound(format!("checkpoint {}", path.display()))
            }
            _ => DormError::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.meta.kind == kind {
            Ok(())
        } else {
            Err(DormError::IncompatibleCheckpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.meta.kind
            )))
        }
    }

    /// Tensors under `prefix.`, with the prefix stripped.
    pub fn subset(&self, prefix: &str) -> BTreeMap<String, Tensor<f32>> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }
}
