//! Binary parameter checkpoints: magic `RMCK`, version, a JSON metadata
//! blob, then named `f64` tensors.

use std::fs;
use std::path::Path;

use rmd_tensor::{ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::motion::write_atomic;

const MAGIC: &[u8; 4] = b"RMCK";
const VERSION: u32 = 1;

pub fn encode(meta: &serde_json::Value, store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(meta).expect("JSON values always serialize");
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], file: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let mut pos = 0usize;
    let err = |pos: usize, message: String| Error::Parse {
        file: file.to_path_buf(),
        offset: pos as u64,
        message,
    };
    let mut take = |n: usize| -> Result<(usize, &[u8])> {
        let start = pos;
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| err(bytes.len(), format!("truncated: needed {n} bytes at offset {start}")))?;
        pos = end;
        Ok((start, &bytes[start..end]))
    };
    let (_, magic) = take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("{}: not a checkpoint (bad magic)", file.display())));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
    let (_, v) = take(4)?;
    if u32_at(v) != VERSION as usize {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {}",
            file.display(),
            u32_at(v)
        )));
    }
    let (_, n) = take(4)?;
    let (at, json) = take(u32_at(n))?;
    let meta: serde_json::Value =
        serde_json::from_slice(json).map_err(|e| err(at, format!("metadata: {e}")))?;
    let (_, count) = take(4)?;
    let count = u32_at(count);
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let (_, n) = take(4)?;
        let (at, name) = take(u32_at(n))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| err(at, "invalid UTF-8 name".into()))?;
        let (_, r) = take(4)?;
        let rank = u32_at(r);
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            let (_, d) = take(4)?;
            shape.push(u32_at(d));
        }
        let numel: usize = shape.iter().product();
        let (at, raw) = take(numel.checked_mul(8).ok_or_else(|| err(0, "tensor too large".into()))?)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(err(at, format!("tensor {name} contains non-finite values")));
        }
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if pos != bytes.len() {
        return Err(err(pos, format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok((meta, tensors))
}

pub fn save(path: &Path, meta: &serde_json::Value, store: &ParamStore) -> Result<()> {
    write_atomic(path, &encode(meta, store))
}

pub fn load(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Copies loaded tensors into `store`, requiring identical names and shapes.
pub fn restore(store: &mut ParamStore, tensors: Vec<(String, Tensor)>) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::Schema(format!(
            "checkpoint has {} tensors, model expects {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        let id = store
            .find(&name)
            .ok_or_else(|| Error::Schema(format!("unexpected checkpoint tensor {name}")))?;
        if store.get(id).shape() != t.shape() {
            return Err(Error::Schema(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t;
    }
    Ok(())
}
