//! Binary checkpoint format.
//!
//! ```text
//! "AFCK" | u8 version = 1 | u32 entry count
//! per entry: u16 name length | UTF-8 name | u8 dtype (0 = f32) | u8 rank
//!            | rank x u32 dims | payload as little-endian f32
//! ```
//!
//! Entries are written in name order. All integers are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

const MAGIC: &[u8; 4] = b"AFCK";
const VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode_checkpoint(params: &ParamSet<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let count = u32::try_from(params.len())
        .map_err(|_| Error::Invalid("too many checkpoint entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, p) in params.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Invalid(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        let rank = u8::try_from(p.value.rank())
            .map_err(|_| Error::Invalid(format!("rank of `{name}` exceeds 255")))?;
        out.push(rank);
        for &d in p.value.dims() {
            let d = u32::try_from(d).map_err(|_| Error::Invalid(format!("dim of `{name}` overflows u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated file while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamSet<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("entry count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("`{name}`: unknown dtype {dtype}")));
        }
        let rank = r.u8("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("`{name}`: dims {dims:?} overflow")))?;
        let payload = r.take(n, &format!("payload of `{name}`"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| Error::Format(format!("`{name}`: {e}")))?;
        params
            .insert(name, t)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last entry",
            bytes.len() - r.pos
        )));
    }
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &ParamSet<f32>) -> Result<()> {
    fs::write(path, encode_checkpoint(params)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
