//! Parameter checkpoints.
//!
//! Layout:
//!
//! ```text
//! b"RAHNCKPT"                 8-byte magic
//! header_len: u64 LE          length of the JSON header in bytes
//! header: JSON                {"format_version", "config", "params": [{name, kind, shape}]}
//! values: f64 LE blocks       one block per header entry, in header order
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamKind, ParamStore};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RAHNCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: serde_json::Value,
    params: Vec<CheckpointEntry>,
}

/// A decoded checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub entries: Vec<CheckpointEntry>,
    pub values: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config: serde_json::Value) -> Self {
        let (entries, values) = store
            .iter()
            .map(|(_, p)| {
                (
                    CheckpointEntry {
                        name: p.name.clone(),
                        kind: p.kind,
                        shape: p.value.shape().to_vec(),
                    },
                    p.value.data().to_vec(),
                )
            })
            .unzip();
        Checkpoint {
            config,
            entries,
            values,
        }
    }

    /// `(name, shape, values)` triples in stored order.
    pub fn named_values(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.entries
            .iter()
            .zip(&self.values)
            .map(|(e, v)| (e.name.clone(), e.shape.clone(), v.clone()))
            .collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            params: self.entries.clone(),
        })?;
        let n_values: usize = self.values.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * n_values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for block in &self.values {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Validation(format!("checkpoint: {m}"));
        let mut cursor = bytes;
        let mut magic = [0u8; 8];
        cursor.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut len = [0u8; 8];
        cursor.read_exact(&mut len).map_err(|_| bad("truncated header length"))?;
        let len = u64::from_le_bytes(len) as usize;
        if cursor.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&cursor[..len])?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(&format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        cursor = &cursor[len..];

        let mut values = Vec::with_capacity(header.params.len());
        for entry in &header.params {
            let n: usize = entry.shape.iter().product();
            if cursor.len() < 8 * n {
                return Err(bad(&format!("truncated values for {}", entry.name)));
            }
            let (block, rest) = cursor.split_at(8 * n);
            values.push(
                block
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
            );
            cursor = rest;
        }
        if !cursor.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint {
            config: header.config,
            entries: header.params,
            values,
        })
    }
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let bytes = checkpoint.encode()?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        store.add(
            "a.weight",
            ParamKind::Weight,
            Tensor::from_rows(&[&[1.5, -2.0], &[0.0, f64::MIN_POSITIVE]]).unwrap(),
        );
        store.add("a.bias", ParamKind::Bias, Tensor::row(&[7.0, 8.0]));
        Checkpoint::from_store(&store, serde_json::json!({"d": 4}))
    }

    #[test]
    fn encode_decode_round_trip() {
        let ck = sample();
        let bytes = ck.encode().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), ck);
    }

    #[test]
    fn values_follow_header_little_endian() {
        let bytes = sample().encode().unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let first = &bytes[16 + header_len..16 + header_len + 8];
        assert_eq!(f64::from_le_bytes(first.try_into().unwrap()), 1.5);
        assert_eq!(bytes.len(), 16 + header_len + 6 * 8);
    }

    #[test]
    fn rejects_truncation_and_garbage() {
        let bytes = sample().encode().unwrap();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::decode(b"NOTACKPT").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
    }
}
