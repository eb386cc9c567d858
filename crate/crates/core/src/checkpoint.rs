//! Flat binary checkpoints.
//!
//! Layout: the magic `TRDS0001`, then one record per tensor
//! `[name_len:u32][utf8 name][rank:u32][dims:u32×rank][f64 LE × len]`,
//! a terminating record with `name_len = 0`, then
//! `[json_len:u32][JSON manifest]`. All integers are little-endian.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"TRDS0001";

pub fn encode(tensors: &[(String, Tensor)], manifest: &serde_json::Value) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let u32le = |out: &mut Vec<u8>, v: usize| -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
        Ok(())
    };
    for (name, t) in tensors {
        if name.is_empty() {
            return Err(Error::Checkpoint("empty tensor name".into()));
        }
        u32le(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        u32le(&mut out, t.rank())?;
        for &d in t.shape() {
            u32le(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    u32le(&mut out, 0)?;
    let json = serde_json::to_vec(manifest)?;
    u32le(&mut out, json.len())?;
    out.extend_from_slice(&json);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Vec<(String, Tensor)>, serde_json::Value)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut tensors = Vec::new();
    loop {
        let n = r.u32()?;
        if n == 0 {
            break;
        }
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    let jl = r.u32()?;
    let manifest = serde_json::from_slice(r.take(jl)?)?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((tensors, manifest))
}

pub fn store_tensors(store: &ParamStore) -> Vec<(String, Tensor)> {
    store.entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect()
}

/// Overwrites every entry of `store` from `tensors`; names and shapes must
/// match exactly.
pub fn restore(store: &mut ParamStore, tensors: &[(String, Tensor)]) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        let id = store
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        let dst = store.get_mut(id);
        if dst.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?} in checkpoint, {:?} in model",
                t.shape(),
                dst.shape()
            )));
        }
        *dst = t.clone();
    }
    Ok(())
}

pub fn save(path: &Path, store: &ParamStore, manifest: &serde_json::Value) -> Result<()> {
    std::fs::write(path, encode(&store_tensors(store), manifest)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Vec<(String, Tensor)>, serde_json::Value)> {
    decode(&std::fs::read(path)?)
}
