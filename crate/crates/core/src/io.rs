//! S2VT binary tensor files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! b"S2VT" | version | dtype (1 = f32, 2 = f64) | rank | extent * rank | payload
//! ```
//!
//! The payload is the row-major values, little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"S2VT";
pub const VERSION: u32 = 1;

/// Serialized bytes for `t` using `T`'s dtype.
pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * t.rank() + T::BYTES * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&T::DTYPE_CODE.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.values().iter() {
        v.write_le(&mut out);
    }
    out
}

/// Parses S2VT bytes of either dtype, converting values into `T`.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Data("missing S2VT magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported S2VT version {version}")));
    }
    let dtype = cur.u32()?;
    let width = match dtype {
        1 => 4,
        2 => 8,
        other => return Err(Error::Data(format!("unknown S2VT dtype code {other}"))),
    };
    let rank = cur.u32()? as usize;
    let shape = (0..rank)
        .map(|_| cur.u32().map(|e| e as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let payload = cur.take(n * width)?;
    if cur.pos != bytes.len() {
        return Err(Error::Data(format!(
            "{} trailing bytes after S2VT payload",
            bytes.len() - cur.pos
        )));
    }
    let data = payload
        .chunks_exact(width)
        .map(|c| match width {
            4 => T::from_real(f32::from_le_bytes(c.try_into().unwrap()) as f64),
            _ => T::from_real(f64::from_le_bytes(c.try_into().unwrap())),
        })
        .collect();
    Tensor::new(&shape, data).map_err(|e| Error::Data(e.to_string()))
}

pub fn write<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| e.context(path.display()))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Data("truncated S2VT file".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
