//! Binary checkpoint layout (little-endian):
//!
//! ```text
//! "TODE" | u32 version = 1 | u32 tensor count
//! per tensor: u16 name length | name (UTF-8) | u8 dtype | u8 rank | u32 extents… | payload
//! ```
//!
//! dtype 0 is f32 and 1 is f64.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 4] = b"TODE";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint<T: Element>(params: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + 4 * params.num_scalars() + 64 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name `{name}` is too long")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE_CODE);
        out.push(t.rank() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            match T::DTYPE_CODE {
                0 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                _ => out.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes `(name, tensor)` pairs in file order. The stored dtype must match
/// `T`.
pub fn decode_checkpoint<T: Element>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("not a checkpoint: bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != T::DTYPE_CODE {
            return Err(Error::Format(format!("tensor `{name}` has dtype code {dtype}, expected {}", T::DTYPE_CODE)));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let width = if dtype == 0 { 4 } else { 8 };
        let payload = r.take(n.checked_mul(width).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = payload
            .chunks_exact(width)
            .map(|c| match width {
                4 => T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64),
                _ => T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())),
            })
            .collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        out.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last tensor", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save_checkpoint<T: Element>(params: &ParamStore<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    decode_checkpoint(&fs::read(path)?)
}
