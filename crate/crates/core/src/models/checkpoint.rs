//! Portable checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   b"MRCKPT\0\x01"
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON (CheckpointHeader)
//! payload      for each tensor in header order: numel x f64
//! ```
//!
//! Values are always stored as 64-bit floats, so an `f64` round trip is
//! bit-exact and an `f32` round trip is exact as well.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MRCKPT\0\x01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub seed: u64,
    /// Precision the parameters were trained in.
    pub scalar: String,
    /// Architecture and run metadata, owned by the writer.
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub seed: u64,
    pub meta: serde_json::Value,
    pub params: ParamSet<T>,
}

fn read_header_from(r: &mut impl Read) -> Result<CheckpointHeader> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    Ok(serde_json::from_slice(&json)?)
}

/// Header of a checkpoint file, without its payload.
pub fn read_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_header_from(&mut f)
}

impl<T: Scalar> Checkpoint<T> {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = CheckpointHeader {
            seed: self.seed,
            scalar: T::NAME.to_string(),
            meta: self.meta.clone(),
            tensors: self
                .params
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::new();
        for (_, t) in self.params.iter() {
            buf.clear();
            for v in t.data() {
                buf.extend_from_slice(&v.as_f64().to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let header = read_header_from(&mut r)?;
        let mut params = ParamSet::new();
        for entry in header.tensors {
            let numel: usize = entry.shape.iter().product();
            let mut raw = vec![0u8; numel * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            let t = Tensor::new(entry.shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            params.push(entry.name, t);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(Checkpoint {
            seed: header.seed,
            meta: header.meta,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// Tensors whose name starts with `prefix`, in stored order.
    pub fn group(&self, prefix: &str) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (n, t) in self.params.iter() {
            if n.starts_with(prefix) {
                out.push(n, t.clone());
            }
        }
        out
    }
}
