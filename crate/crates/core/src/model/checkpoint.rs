//! Parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "IMPSPV01"
//! tag_len    u32
//! tag        tag_len bytes of UTF-8 (architecture tag, e.g. "cnn")
//! count      u64      number of parameters
//! params     count x f64
//! ```

use std::io::{Read, Write};

use super::{Architecture, Model};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"IMPSPV01";

pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<()> {
    let tag = model.architecture().to_string();
    let io = |e| Error::Checkpoint(format!("write failed: {e}"));
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(tag.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(tag.as_bytes()).map_err(io)?;
    w.write_all(&(model.param_count() as u64).to_le_bytes()).map_err(io)?;
    let mut buf = Vec::with_capacity(model.param_count() * 8);
    for p in model.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&buf).map_err(io)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Model> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    if cur.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let tag_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
    let tag = std::str::from_utf8(cur.take(tag_len)?)
        .map_err(|_| Error::Checkpoint("architecture tag is not UTF-8".into()))?;
    let arch: Architecture = tag.parse()?;
    let count = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
    let expected = Model::zeros(arch.clone())?.param_count();
    if count != expected {
        return Err(Error::Checkpoint(format!(
            "{arch} has {expected} parameters, header says {count}"
        )));
    }
    let payload = cur.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("count overflow".into()))?)?;
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    let params = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Model::with_params(arch, params)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}
