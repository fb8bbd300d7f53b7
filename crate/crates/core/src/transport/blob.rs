//! `TensorBlob`: the binary encoding of a [`ParamSet`].
//!
//! ```text
//! "FENS" | version u16 | entry_count u32 |
//!   { name_len u16 | name utf-8 | rank u8 | dims u32 * rank | values f32 * prod(dims) } * entry_count |
//! crc32c u32
//! ```
//!
//! All integers and floats are little-endian. The CRC covers every byte
//! before it.

use crate::error::TransportError;
use crate::params::{ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"FENS";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4;
const CRC_LEN: usize = 4;

pub fn encode_params(p: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + CRC_LEN + p.num_values() * 4 + p.len() * 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(p.len() as u32).to_le_bytes());
    for t in p.entries() {
        let name = t.name().as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32c::crc32c(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TransportError> {
        let end = self.pos.checked_add(n).ok_or(TransportError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(TransportError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, TransportError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, TransportError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, TransportError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

struct RawEntry<'a> {
    name: &'a [u8],
    shape: Vec<usize>,
    values: &'a [u8],
}

/// Decode a blob. Checks run in order: magic, version, structure
/// (truncation / trailing bytes), checksum, then tensor validity.
pub fn decode_params(bytes: &[u8]) -> Result<ParamSet, TransportError> {
    if bytes.len() < MAGIC.len() {
        return Err(TransportError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(TransportError::BadMagic);
    }
    let mut cur = Cursor { buf: bytes, pos: 4 };
    let version = cur.u16()?;
    if version != VERSION {
        return Err(TransportError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let count = cur.u32()? as usize;
    let mut raw = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = cur.take(name_len)?;
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or(TransportError::Truncated)?;
        let values = cur.take(n)?;
        raw.push(RawEntry { name, shape, values });
    }
    let body_end = cur.pos;
    match bytes.len() - body_end {
        CRC_LEN => {}
        n if n < CRC_LEN => return Err(TransportError::Truncated),
        n => return Err(TransportError::Malformed(format!("{} trailing bytes", n - CRC_LEN))),
    }
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    if crc32c::crc32c(&bytes[..body_end]) != stored {
        return Err(TransportError::BadCrc);
    }

    let mut tensors = Vec::with_capacity(raw.len());
    for e in raw {
        let name = std::str::from_utf8(e.name)
            .map_err(|_| TransportError::Malformed("tensor name is not UTF-8".into()))?;
        let values = e
            .values
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(name, e.shape, values)?);
    }
    Ok(ParamSet::from_tensors(tensors)?)
}
