//! Versioned binary parameter checkpoints.
//!
//! Layout (all integers little-endian u32, all values little-endian f64):
//!
//! ```text
//! magic "TXCP" | version | meta_len | meta JSON | tensor_count
//! then per tensor: name_len | name UTF-8 | rows | cols | rows*cols values
//! ```
//!
//! Tensors are written in registration order, so saving the same store twice
//! produces identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, TensorError};

const MAGIC: &[u8; 4] = b"TXCP";
const VERSION: u32 = 1;

/// Provenance stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Hash of the effective run configuration that produced the weights.
    pub config_hash: String,
    pub seed: u64,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    meta: &CheckpointMeta,
) -> Result<(), TensorError> {
    let meta_json = serde_json::to_vec(meta)
        .map_err(|e| TensorError::Checkpoint(format!("meta encode: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    buf.extend_from_slice(&(store.tensor_count() as u32).to_le_bytes());
    for name in store.names.iter() {
        let i = store.index[name];
        let (rows, cols) = store.shapes[i];
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(rows as u32).to_le_bytes());
        buf.extend_from_slice(&(cols as u32).to_le_bytes());
        for &v in &store.values[i] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointMeta), TensorError> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(4)? != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let meta_len = cur.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len)?)
        .map_err(|e| TensorError::Checkpoint(format!("meta decode: {e}")))?;
    let n = cur.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| TensorError::Checkpoint(format!("tensor name: {e}")))?
            .to_owned();
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let raw = cur.take(8)?;
            data.push(f64::from_le_bytes(raw.try_into().unwrap()));
        }
        store.add(&name, rows, cols, data)?;
    }
    if cur.pos != bytes.len() {
        return Err(TensorError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    Ok((store, meta))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        if self.pos + n > self.bytes.len() {
            return Err(TensorError::Checkpoint("truncated file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, TensorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
