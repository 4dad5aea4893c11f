//! Single-file weight archive.
//!
//! ```text
//! magic "MYOPSCK1" | header length (u64 LE) | JSON header | f32 LE tensor data
//! ```
//!
//! The header records the scenario, backbone config, epoch and seed, plus
//! name, shape and element offset of every tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{MyoPsNet, NetConfig, ScenarioConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MYOPSCK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 4],
    /// Offset into the data section, in f32 elements.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    scenario: ScenarioConfig,
    net: NetConfig,
    epoch: usize,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

/// Trained weights plus the epoch they were taken at and the training seed.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: MyoPsNet,
    pub epoch: usize,
    pub seed: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (name, t) in self.net.params().iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape(),
                offset,
            });
            offset += t.numel();
        }
        let header = Header {
            scenario: self.net.scenario().clone(),
            net: self.net.config().clone(),
            epoch: self.epoch,
            seed: self.seed,
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.net.params().iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses an archive. With `expected`, a different scenario is a
    /// [`Error::ConfigMismatch`].
    pub fn from_bytes(bytes: &[u8], expected: Option<&ScenarioConfig>) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptData(format!("checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16 + len)
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(json)?;
        if header.scenario != ScenarioConfig::new(header.scenario.name) {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint decoder sets do not match scenario {}",
                header.scenario.name
            )));
        }
        if let Some(exp) = expected {
            if *exp != header.scenario {
                return Err(Error::ConfigMismatch(format!(
                    "checkpoint was trained for scenario {}, expected {}",
                    header.scenario.name, exp.name
                )));
            }
        }
        let data = &bytes[16 + len..];
        let mut net = MyoPsNet::new(header.scenario.clone(), header.net.clone(), 0)?;
        let store = net.params_mut();
        if store.len() != header.tensors.len() {
            return Err(corrupt("tensor count does not match the architecture"));
        }
        for entry in &header.tensors {
            let id = store
                .find(&entry.name)
                .ok_or_else(|| corrupt(&format!("unexpected tensor {}", entry.name)))?;
            let t = store.get_mut(id);
            if t.shape() != entry.shape {
                return Err(corrupt(&format!(
                    "tensor {} has shape {:?}",
                    entry.name, entry.shape
                )));
            }
            let n = t.numel();
            let raw = data
                .get(entry.offset * 4..(entry.offset + n) * 4)
                .ok_or_else(|| corrupt("truncated tensor data"))?;
            for (v, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
        }
        Ok(Checkpoint {
            net,
            epoch: header.epoch,
            seed: header.seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, expected: Option<&ScenarioConfig>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected)
    }

    /// Hex SHA-256 of the serialized archive.
    pub fn sha256(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}
