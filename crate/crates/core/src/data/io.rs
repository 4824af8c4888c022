//! Binary dataset and label files.
//!
//! ```text
//! data:   "AFCS" | u8 version = 1 | u32 N | u32 A | u32 S | u32 T | N*A*S*T f32
//! labels: "AFLB" | u8 version = 1 | u32 N | N x u32 class id
//! ```
//!
//! Everything is little-endian; values are stored in `[n][a][s][t]` order.

use std::fs;
use std::path::Path;

use crate::data::CsiSample;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const DATA_MAGIC: &[u8; 4] = b"AFCS";
const LABEL_MAGIC: &[u8; 4] = b"AFLB";
const VERSION: u8 = 1;

fn u32_of(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Invalid(format!("{what} {v} does not fit in u32")))
}

pub fn encode_dataset(samples: &[CsiSample]) -> Result<Vec<u8>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Invalid("cannot write an empty dataset".into()))?;
    let dims = first.values.dims().to_vec();
    if dims.len() != 3 {
        return Err(Error::shape("write_dataset", format!("samples must be [A,S,T], got {dims:?}")));
    }
    if let Some(i) = samples.iter().position(|s| s.values.dims() != dims.as_slice()) {
        return Err(Error::shape(
            "write_dataset",
            format!("sample {i} is {:?}, expected {dims:?}", samples[i].values.dims()),
        ));
    }
    let per: usize = dims.iter().product();
    let mut out = Vec::with_capacity(21 + samples.len() * per * 4);
    out.extend_from_slice(DATA_MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&u32_of(samples.len(), "sample count")?);
    for &d in &dims {
        out.extend_from_slice(&u32_of(d, "dimension")?);
    }
    for s in samples {
        for v in s.values.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn header<'a>(bytes: &'a [u8], magic: &[u8; 4], fields: usize) -> Result<(Vec<u32>, &'a [u8])> {
    let need = 5 + 4 * fields;
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::Format("bad magic".into()));
    }
    if bytes.len() < need {
        return Err(Error::Format("truncated file: incomplete header".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    let vals = bytes[5..need]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((vals, &bytes[need..]))
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<CsiSample>> {
    let (h, body) = header(bytes, DATA_MAGIC, 4)?;
    let (n, a, s, t) = (h[0] as usize, h[1] as usize, h[2] as usize, h[3] as usize);
    if a == 0 || s == 0 || t == 0 {
        return Err(Error::Format(format!("zero dimension in header {a}x{s}x{t}")));
    }
    let per = a
        .checked_mul(s)
        .and_then(|v| v.checked_mul(t))
        .ok_or_else(|| Error::Format(format!("dims {a}x{s}x{t} overflow")))?;
    let total = per
        .checked_mul(n)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("{n} samples of {per} values overflow")))?;
    if body.len() != total {
        return Err(Error::Format(format!(
            "truncated file: expected {total} payload bytes, found {}",
            body.len()
        )));
    }
    body.chunks_exact(per * 4)
        .map(|chunk| {
            let data = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Ok(CsiSample::unlabeled(Tensor::new(&[a, s, t], data)?))
        })
        .collect()
}

pub fn encode_labels(labels: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(9 + labels.len() * 4);
    out.extend_from_slice(LABEL_MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&u32_of(labels.len(), "label count")?);
    for l in labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<u32>> {
    let (h, body) = header(bytes, LABEL_MAGIC, 1)?;
    let n = h[0] as usize;
    if body.len() != n * 4 {
        return Err(Error::Format(format!(
            "truncated file: expected {n} labels, found {} bytes",
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(samples: &[CsiSample], path: &Path) -> Result<()> {
    write(path, &encode_dataset(samples)?)
}

pub fn read_dataset(path: &Path) -> Result<Vec<CsiSample>> {
    decode_dataset(&read(path)?)
}

/// Write the labels of `samples`; every sample must carry one.
pub fn write_labels(samples: &[CsiSample], path: &Path) -> Result<()> {
    let labels = samples
        .iter()
        .enumerate()
        .map(|(i, s)| s.label.ok_or_else(|| Error::Invalid(format!("sample {i} has no label"))))
        .collect::<Result<Vec<_>>>()?;
    write(path, &encode_labels(&labels)?)
}

/// Read a data file and attach the labels from a label file.
pub fn read_labeled(data: &Path, labels: &Path) -> Result<Vec<CsiSample>> {
    let mut samples = read_dataset(data)?;
    let ls = decode_labels(&read(labels)?)?;
    if ls.len() != samples.len() {
        return Err(Error::Format(format!(
            "label file has {} entries but data file has {} samples",
            ls.len(),
            samples.len()
        )));
    }
    for (s, l) in samples.iter_mut().zip(ls) {
        s.label = Some(l);
    }
    Ok(samples)
}
