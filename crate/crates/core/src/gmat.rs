//! `GMAT` binary tensor files and the named-tensor checkpoint container.
//!
//! Tensor layout: magic `GMAT`, `u8` version (1), `u8` dtype (1 = f64 LE),
//! `u8` rank, `rank` x `u64` LE dims, then the row-major payload.
//!
//! Checkpoint layout: magic `GMCK`, `u8` version (1), `u32` LE record count,
//! then per record a `u32` LE name length, UTF-8 name bytes, `u64` LE payload
//! length and a complete `GMAT` tensor.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{GmaError, Result};
use crate::params::{Parameter, ParamStore};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"GMAT";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GMCK";
pub const VERSION: u8 = 1;
pub const DTYPE_F64_LE: u8 = 1;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(GmaError::Format(format!("rank {} does not fit in u8", t.rank())));
    }
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[VERSION, DTYPE_F64_LE, t.rank() as u8])?;
    for &d in t.dims() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(GmaError::Format("bad GMAT magic".into()));
    }
    let mut head = [0u8; 3];
    r.read_exact(&mut head)?;
    let [version, dtype, rank] = head;
    if version != VERSION {
        return Err(GmaError::Format(format!("unsupported GMAT version {version}")));
    }
    if dtype != DTYPE_F64_LE {
        return Err(GmaError::Format(format!("unsupported GMAT dtype {dtype}")));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    let mut buf8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut buf8)?;
        dims.push(usize::try_from(u64::from_le_bytes(buf8)).map_err(|_| GmaError::Format("dimension overflow".into()))?);
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| GmaError::Format("element count overflow".into()))?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut buf8)?;
        data.push(f64::from_le_bytes(buf8));
    }
    Tensor::new(dims, data).map_err(|e| GmaError::Format(e.to_string()))
}

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 8 * (t.rank() + t.len()));
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut cursor = bytes;
    let t = read_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(GmaError::Format(format!("{} trailing bytes after GMAT tensor", cursor.len())));
    }
    Ok(t)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, tensor_to_bytes(t))?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    tensor_from_bytes(&fs::read(path)?)
}

/// Serialises named tensors into a checkpoint container.
pub fn named_tensors_to_bytes<'a>(items: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>> {
    let items: Vec<_> = items.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for (name, t) in items {
        let payload = tensor_to_bytes(t);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
    }
    Ok(out)
}

pub fn named_tensors_from_bytes(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(GmaError::Format("bad checkpoint magic".into()));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != VERSION {
        return Err(GmaError::Format(format!("unsupported checkpoint version {}", version[0])));
    }
    let mut buf4 = [0u8; 4];
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf4)?;
    let count = u32::from_le_bytes(buf4);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        r.read_exact(&mut buf4)?;
        let name_len = u32::from_le_bytes(buf4) as usize;
        if name_len > r.len() {
            return Err(GmaError::Format("truncated checkpoint name".into()));
        }
        let (name, rest) = r.split_at(name_len);
        let name = String::from_utf8(name.to_vec()).map_err(|_| GmaError::Format("non UTF-8 parameter name".into()))?;
        r = rest;
        r.read_exact(&mut buf8)?;
        let len = u64::from_le_bytes(buf8) as usize;
        if len > r.len() {
            return Err(GmaError::Format(format!("truncated tensor payload for {name}")));
        }
        let (payload, rest) = r.split_at(len);
        out.push((name, tensor_from_bytes(payload)?));
        r = rest;
    }
    if !r.is_empty() {
        return Err(GmaError::Format("trailing bytes after checkpoint".into()));
    }
    Ok(out)
}

pub fn params_to_bytes(store: &ParamStore) -> Result<Vec<u8>> {
    named_tensors_to_bytes(store.iter().map(|(_, p)| (p.name.as_str(), &p.value)))
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, value) in named_tensors_from_bytes(bytes)? {
        store.insert(Parameter::new(name, value))?;
    }
    Ok(store)
}
