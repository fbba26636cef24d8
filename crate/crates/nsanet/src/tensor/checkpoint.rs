//! `NSW1` weight checkpoints: a flat manifest of named tensors.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic  "NSW1"  (4 bytes)
//! count  u32
//! per tensor:
//!   name_len  u16
//!   name      UTF-8 bytes
//!   rank      u8
//!   dims      rank × u64
//!   data      product(dims) × f32
//! ```
//!
//! Values are stored as `f32` regardless of the in-memory precision.

use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NSW1";

/// One tensor in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "tensor data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(NamedTensor {
            name: name.into(),
            dims,
            data,
        })
    }
}

pub fn write_checkpoint(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC).map_err(|e| Error::io(path, e))?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    for t in tensors {
        let name = t.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::validation(format!("tensor name too long: {}", t.name)));
        }
        if t.dims.len() > u8::MAX as usize {
            return Err(Error::validation("tensor rank exceeds u8"));
        }
        w.write_all(&(name.len() as u16).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
        w.write_all(name).map_err(|e| Error::io(path, e))?;
        w.write_all(&[t.dims.len() as u8])
            .map_err(|e| Error::io(path, e))?;
        for &d in &t.dims {
            w.write_all(&(d as u64).to_le_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<NamedTensor>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;

    let mut cur = Cursor {
        buf: &buf,
        pos: 0,
        path,
    };
    let magic = cur.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(cur.format_err(0, format!("bad magic {:?}, expected \"NSW1\"", magic)));
    }
    let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let at = cur.pos;
        let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| cur.format_err(at, "tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize);
        }
        let n: usize = dims.iter().product();
        let raw = cur.take(n * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(NamedTensor { name, dims, data });
    }
    if cur.pos != buf.len() {
        return Err(cur.format_err(
            cur.pos,
            format!("{} trailing bytes after last tensor", buf.len() - cur.pos),
        ));
    }
    Ok(tensors)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.format_err(
                self.pos,
                format!(
                    "truncated: need {} bytes at offset {}, file has {}",
                    n,
                    self.pos,
                    self.buf.len()
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn format_err(&self, offset: usize, message: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: Some(offset as u64),
            message,
        }
    }
}
