//! Versioned binary checkpoints: a JSON header (kind, shapes, seed,
//! free-form metadata) followed by raw little-endian f64 parameters.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CXGC";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    /// "encoder" | "safe" | "wasm" | "downstream"
    pub kind: String,
    pub seed: u64,
    /// (name, shape) in storage order.
    pub shapes: Vec<(String, Vec<usize>)>,
    /// Free-form metadata: embedded configs, parent hashes.
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(kind: &str, seed: u64, params: ParamStore, meta: BTreeMap<String, String>) -> Self {
        let shapes = params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
        Self { header: CheckpointHeader { version: VERSION, kind: kind.to_string(), seed, shapes, meta }, params }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(MAGIC)?;
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        for (_, t) in self.params.iter() {
            for v in t.data() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| {
            Error::State(format!("missing checkpoint {}: {e}", path.display()))
        })?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
        }
        let mut len = [0u8; 8];
        f.read_exact(&mut len)?;
        let mut header_bytes = vec![0u8; u64::from_le_bytes(len) as usize];
        f.read_exact(&mut header_bytes)?;
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
        if header.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", header.version)));
        }
        let mut params = ParamStore::new();
        for (name, shape) in &header.shapes {
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 8];
            f.read_exact(&mut buf).map_err(|_| {
                Error::Checkpoint(format!("truncated parameter block for {name}"))
            })?;
            let data: Vec<f64> = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.insert(name, Tensor::new(shape, data));
        }
        Ok(Self { header, params })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.header.kind
            )));
        }
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.header
            .meta
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint missing metadata key {key}")))
    }
}
