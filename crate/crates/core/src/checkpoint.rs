//! Flat checkpoint files of named `f32` tensors.
//!
//! Layout, little-endian: magic `DMMB`, version `u32`, entry count `u64`,
//! then per entry a `u16` name length, the UTF-8 name, a `u8` rank, `u32`
//! extents and the raw `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DMMB";
pub const VERSION: u32 = 1;

pub fn encode<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Result<Vec<u8>> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, t) in entries {
        let name_len =
            u16::try_from(name.len()).map_err(|_| Error::Usage(format!("parameter name too long: {name}")))?;
        let rank = u8::try_from(t.ndim()).map_err(|_| Error::Usage(format!("rank too large for {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| Error::Usage(format!("extent too large for {name}")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Byte reader that reports the offset of any failure.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Format { offset: self.offset(), message: message.into() })
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self
                .fail(format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n.checked_mul(4).map(|b| self.take(b, what)).unwrap_or_else(|| self.fail("size overflow"))?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut cur = Cursor::new(bytes);
    if &cur.array::<4>("magic")? != MAGIC {
        return Err(Error::Format { offset: 0, message: "bad magic, not a checkpoint".into() });
    }
    let at = cur.offset();
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Format { offset: at, message: format!("unsupported checkpoint version {version}") });
    }
    let count = cur.u64("entry count")?;
    let mut entries = Vec::new();
    for i in 0..count {
        let len = cur.u16("name length")? as usize;
        let at = cur.offset();
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::Format { offset: at, message: format!("entry {i} name is not UTF-8") })?
            .to_string();
        let rank = cur.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("extent")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
        let Some(n) = n.filter(|&n| n <= cur.remaining() / 4) else {
            return cur.fail(format!("entry `{name}` shape {shape:?} exceeds the file"));
        };
        let data = cur.f32s(n, "tensor data")?;
        entries.push((name, Tensor::from_vec(&shape, data)?));
    }
    if cur.remaining() != 0 {
        return cur.fail(format!("{} trailing bytes", cur.remaining()));
    }
    Ok(entries)
}

pub fn save<'a>(path: &Path, entries: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Result<()> {
    let bytes = encode(entries)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
