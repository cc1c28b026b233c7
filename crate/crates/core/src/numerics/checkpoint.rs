//! Binary parameter container.
//!
//! Layout:
//!
//! ```text
//! b"SLCKPT\0\0"            8-byte magic
//! u32 LE                   header length in bytes
//! header                   UTF-8 JSON (see `Header`)
//! f64 LE * n               every entry's parameters, in header order
//! ```
//!
//! Each network entry stores `[W0, b0, W1, b1, ...]` with weights row-major
//! `(out, in)`. Array entries are plain flat vectors.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Layer, MlpParams};
use super::tensor::Tensor2;
use crate::error::{LabError, Result};

pub const MAGIC: &[u8; 8] = b"SLCKPT\0\0";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EntryKind {
    Mlp {
        dims: Vec<usize>,
        activations: Vec<Activation>,
    },
    Array {
        len: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryHeader {
    pub name: String,
    #[serde(flatten)]
    pub kind: EntryKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema_version: u32,
    pub entries: Vec<EntryHeader>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Mlp(MlpParams),
    Array(Vec<f64>),
}

/// Named networks and arrays plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    entries: Vec<(String, Entry)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_mlp(mut self, name: &str, params: &MlpParams) -> Self {
        self.entries.push((name.to_string(), Entry::Mlp(params.clone())));
        self
    }

    pub fn with_array(mut self, name: &str, values: &[f64]) -> Self {
        self.entries.push((name.to_string(), Entry::Array(values.to_vec())));
        self
    }

    pub fn with_meta(mut self, meta: serde_json::Value) -> Self {
        self.meta = meta;
        self
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn mlp(&self, name: &str) -> Result<&MlpParams> {
        match self.find(name)? {
            Entry::Mlp(m) => Ok(m),
            Entry::Array(_) => Err(LabError::Format(format!("entry '{name}' is not a network"))),
        }
    }

    pub fn array(&self, name: &str) -> Result<&[f64]> {
        match self.find(name)? {
            Entry::Array(a) => Ok(a),
            Entry::Mlp(_) => Err(LabError::Format(format!("entry '{name}' is not an array"))),
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    fn find(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e)
            .ok_or_else(|| LabError::Format(format!("checkpoint has no entry '{name}'")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            schema_version: SCHEMA_VERSION,
            entries: self
                .entries
                .iter()
                .map(|(name, e)| EntryHeader {
                    name: name.clone(),
                    kind: match e {
                        Entry::Mlp(m) => EntryKind::Mlp {
                            dims: m.dims(),
                            activations: m.activations(),
                        },
                        Entry::Array(a) => EntryKind::Array { len: a.len() },
                    },
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for (_, e) in &self.entries {
            let values: Vec<f64> = match e {
                Entry::Mlp(m) => m.flat(),
                Entry::Array(a) => a.clone(),
            };
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic)
            .map_err(|_| LabError::Format("truncated magic".into()))?;
        if &magic != MAGIC {
            return Err(LabError::Format("bad magic".into()));
        }
        let mut len = [0u8; 4];
        cur.read_exact(&mut len)
            .map_err(|_| LabError::Format("truncated header length".into()))?;
        let len = u32::from_le_bytes(len) as usize;
        if cur.len() < len {
            return Err(LabError::Format("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&cur[..len])?;
        cur = &cur[len..];
        if header.schema_version != SCHEMA_VERSION {
            return Err(LabError::Format(format!(
                "unsupported schema version {}",
                header.schema_version
            )));
        }
        let mut take = |n: usize| -> Result<Vec<f64>> {
            if cur.len() < n * 8 {
                return Err(LabError::Format("truncated parameter data".into()));
            }
            let vals = cur[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            cur = &cur[n * 8..];
            Ok(vals)
        };
        let mut entries = Vec::with_capacity(header.entries.len());
        for eh in header.entries {
            let entry = match eh.kind {
                EntryKind::Array { len } => Entry::Array(take(len)?),
                EntryKind::Mlp { dims, activations } => {
                    if dims.len() < 2 || activations.len() != dims.len() - 1 {
                        return Err(LabError::Format(format!("entry '{}' dims", eh.name)));
                    }
                    let mut layers = Vec::with_capacity(activations.len());
                    for (l, act) in activations.into_iter().enumerate() {
                        let (i, o) = (dims[l], dims[l + 1]);
                        layers.push(Layer {
                            weight: Tensor2::from_vec(o, i, take(o * i)?)?,
                            bias: take(o)?,
                            activation: act,
                        });
                    }
                    Entry::Mlp(MlpParams::from_layers(layers)?)
                }
            };
            entries.push((eh.name, entry));
        }
        if !cur.is_empty() {
            return Err(LabError::Format(format!("{} trailing bytes", cur.len())));
        }
        Ok(Self {
            entries,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngStream;

    #[test]
    fn exact_round_trip() {
        let net = MlpParams::random(&[5, 7, 3], &mut RngStream::new(11, 0)).unwrap();
        let ck = Checkpoint::new()
            .with_mlp("policy", &net)
            .with_array("extra", &[1.0, -0.0, f64::MIN_POSITIVE])
            .with_meta(serde_json::json!({"step": 12}));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.mlp("policy").unwrap().flat(), net.flat());
        assert_eq!(back.array("extra").unwrap()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn rejects_corruption() {
        let net = MlpParams::zeros(&[2, 2]).unwrap();
        let mut bytes = Checkpoint::new().with_mlp("n", &net).to_bytes().unwrap();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn missing_entry_is_error() {
        let ck = Checkpoint::new().with_array("a", &[1.0]);
        assert!(ck.mlp("a").is_err());
        assert!(ck.array("b").is_err());
    }
}
