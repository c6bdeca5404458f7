//! Binary parameter container.
//!
//! Layout: the magic bytes `MAXW`, a `u32` version, then one record per named
//! tensor until end of file. A record is the name length (`u32`), the UTF-8
//! name, the rank (`u32`), each dimension as `u64`, and the `f64` payload.
//! Every integer and float is little-endian.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::Tensor;

pub const MAGIC: &[u8; 4] = b"MAXW";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt record at byte {offset}: {detail}")]
    Corrupt { offset: u64, detail: String },
}

/// Writes named tensors in the given order.
pub fn write_checkpoint<W: Write>(mut w: W, entries: &[(String, Tensor)]) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads every record until end of input.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().expect("length checked");
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let start = cur.pos;
        let len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|e| cur.corrupt(start, format!("name is not UTF-8: {e}")))?
            .to_string();
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64("dimension")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len() - cur.pos))
            .ok_or_else(|| cur.corrupt(start, format!("payload for shape {shape:?} exceeds file")))?;
        let payload = cur.take(count * 8, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| cur.corrupt(start, format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt(self.pos, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn corrupt(&self, offset: usize, detail: String) -> CheckpointError {
        CheckpointError::Corrupt { offset: offset as u64, detail }
    }
}
