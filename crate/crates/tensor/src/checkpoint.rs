//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "CLZCKPT1"
//! header     u32 length + UTF-8 JSON object
//! count      u32
//! record*    u32 name length, name, u32 rank, rank × u64 dims, f64 payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CLZCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn corrupt(msg: impl Into<String>) -> TensorError {
    TensorError::CheckpointCorrupt(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| corrupt("truncated"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| corrupt("truncated"))?;
    Ok(u64::from_le_bytes(b))
}

impl Checkpoint {
    pub fn new(header: Value, tensors: Vec<(String, Tensor)>) -> Self {
        Self { header, tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose name starts with `prefix`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        let header = serde_json::to_vec(&self.header).map_err(|e| corrupt(e.to_string()))?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| corrupt("missing magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let hlen = read_u32(r)? as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf).map_err(|_| corrupt("truncated header"))?;
        let header: Value = serde_json::from_slice(&hbuf).map_err(|e| corrupt(e.to_string()))?;
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = read_u32(r)? as usize;
            let mut nbuf = vec![0u8; nlen];
            r.read_exact(&mut nbuf).map_err(|_| corrupt("truncated name"))?;
            let name = String::from_utf8(nbuf).map_err(|_| corrupt("name is not UTF-8"))?;
            let rank = read_u32(r)? as usize;
            if rank > 8 {
                return Err(corrupt(format!("rank {rank} for `{name}`")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw).map_err(|_| corrupt(format!("truncated payload for `{name}`")))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}
