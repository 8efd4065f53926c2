//! Parameter checkpoints.
//!
//! Layout: magic `TCEM`, `u32` LE header length, UTF-8 JSON header, then
//! every entry's parameters as little-endian `f64` in header order. The
//! header carries the CRC-32 of the payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Mlp, MlpSpec};
use crate::error::{ensure, Error, Result};

const MAGIC: &[u8; 4] = b"TCEM";
const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    /// Present for network entries; absent for raw vectors (e.g. log-stds).
    pub spec: Option<MlpSpec>,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u16,
    seed: u64,
    step: u64,
    entries: Vec<CheckpointEntry>,
    crc32: u32,
    #[serde(default)]
    extra: BTreeMap<String, serde_json::Value>,
}

/// A named bundle of parameter vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub step: u64,
    pub extra: BTreeMap<String, serde_json::Value>,
    entries: Vec<(CheckpointEntry, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(seed: u64, step: u64) -> Self {
        Self {
            seed,
            step,
            extra: BTreeMap::new(),
            entries: Vec::new(),
        }
    }

    pub fn push_net(&mut self, name: &str, net: &Mlp) {
        self.entries.push((
            CheckpointEntry {
                name: name.to_owned(),
                spec: Some(net.spec().clone()),
                len: net.params().len(),
            },
            net.params().to_vec(),
        ));
    }

    pub fn push_vec(&mut self, name: &str, values: &[f64]) {
        self.entries.push((
            CheckpointEntry {
                name: name.to_owned(),
                spec: None,
                len: values.len(),
            },
            values.to_vec(),
        ));
    }

    pub fn entries(&self) -> impl Iterator<Item = &CheckpointEntry> {
        self.entries.iter().map(|(e, _)| e)
    }

    fn find(&self, name: &str) -> Result<&(CheckpointEntry, Vec<f64>)> {
        self.entries
            .iter()
            .find(|(e, _)| e.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no entry '{name}'")))
    }

    pub fn net(&self, name: &str) -> Result<Mlp> {
        let (entry, values) = self.find(name)?;
        let spec = entry
            .spec
            .clone()
            .ok_or_else(|| Error::Format(format!("entry '{name}' is not a network")))?;
        Mlp::from_params(spec, values.clone())
    }

    pub fn vec(&self, name: &str) -> Result<&[f64]> {
        self.find(name).map(|(_, v)| v.as_slice())
    }

    /// CRC-32 of the parameter payload.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (_, values) in &self.entries {
            for v in values {
                h.update(&v.to_le_bytes());
            }
        }
        h.finalize()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: FORMAT_VERSION,
            seed: self.seed,
            step: self.step,
            entries: self.entries.iter().map(|(e, _)| e.clone()).collect(),
            crc32: self.checksum(),
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.entries.iter().map(|(_, v)| v.len()).sum();
        let mut out = Vec::with_capacity(8 + json.len() + 8 * payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, values) in &self.entries {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure_format(bytes.len() >= 8 && &bytes[..4] == MAGIC, "not a TCEM checkpoint")?;
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        ensure_format(bytes.len() >= 8 + hlen, "truncated checkpoint header")?;
        let header: Header = serde_json::from_slice(&bytes[8..8 + hlen])?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Version {
                found: header.version,
                expected: FORMAT_VERSION,
            });
        }
        let mut pos = 8 + hlen;
        let mut entries = Vec::with_capacity(header.entries.len());
        for e in header.entries {
            if let Some(spec) = &e.spec {
                ensure!(spec.param_count() == e.len, "entry '{}' length disagrees with its spec", e.name);
            }
            let end = pos + 8 * e.len;
            ensure_format(bytes.len() >= end, "truncated checkpoint payload")?;
            let values = bytes[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos = end;
            entries.push((e, values));
        }
        ensure_format(pos == bytes.len(), "trailing bytes after checkpoint payload")?;
        let ck = Self {
            seed: header.seed,
            step: header.step,
            extra: header.extra,
            entries,
        };
        let crc = ck.checksum();
        ensure_format(
            crc == header.crc32,
            &format!("checkpoint CRC mismatch: header {:08x}, payload {crc:08x}", header.crc32),
        )?;
        Ok(ck)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn ensure_format(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Format(msg.to_owned()))
    }
}
