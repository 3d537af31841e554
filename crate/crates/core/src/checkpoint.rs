//! Binary parameter files.
//!
//! Layout (all integers little-endian): magic `REHT`, version byte `1`, then
//! one record per tensor: `u32` name length, UTF-8 name, `u8` dtype tag
//! (0 = f32, 1 = f64), `u8` rank, `u32` per dim, raw little-endian data.
//! The file ends with a `u64` record count.

use std::path::Path;

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::real::{DType, Real};

pub const MAGIC: &[u8; 4] = b"REHT";
pub const VERSION: u8 = 1;

/// One named tensor as stored on disk, widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Serializes `(name, shape, data)` triples.
pub fn encode_records<'a, T: Real>(records: impl IntoIterator<Item = (&'a str, &'a [usize], &'a [T])>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let mut count = 0u64;
    for (name, shape, data) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE as u8);
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in data {
            v.write_le(&mut out);
        }
        count += 1;
    }
    out.extend_from_slice(&count.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<Record>> {
    if bytes.len() < 5 + 8 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic (not a REHT file)".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {} (expected {VERSION})",
            bytes[4]
        )));
    }
    let body_end = bytes.len() - 8;
    let count = u64::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let mut cur = Cursor {
        bytes: &bytes[..body_end],
        pos: 5,
    };
    let mut records = Vec::new();
    while cur.pos < body_end {
        let len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
            .to_string();
        let head = cur.take(2, "dtype/rank")?;
        let dtype = DType::from_tag(head[0])
            .ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype tag {}", head[0])))?;
        let shape = (0..head[1])
            .map(|_| cur.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = cur.take(n * dtype.size(), "tensor data")?;
        let data = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|b| f32::read_le(b) as f64).collect(),
            DType::F64 => raw.chunks_exact(8).map(f64::read_le).collect(),
        };
        records.push(Record {
            name,
            dtype,
            shape,
            data,
        });
    }
    if records.len() as u64 != count {
        return Err(Error::Checkpoint(format!(
            "record count mismatch: trailer says {count}, found {}",
            records.len()
        )));
    }
    Ok(records)
}

pub fn encode_store<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    encode_records(
        store
            .iter()
            .map(|p| (p.name.as_str(), p.shape.as_slice(), p.value.data())),
    )
}

/// Overwrites every parameter of `store` from `bytes`, converting precision.
/// Names and shapes must match exactly.
pub fn load_into_store<T: Real>(bytes: &[u8], store: &mut ParamStore<T>) -> Result<()> {
    let records = decode_records(bytes)?;
    if records.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {} (config mismatch?)",
            records.len(),
            store.len()
        )));
    }
    for r in records {
        let id = store
            .id(&r.name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {}", r.name)))?;
        let p = store.get_mut(id);
        if p.shape != r.shape {
            return Err(Error::Checkpoint(format!(
                "{}: shape {:?} vs model {:?}",
                r.name, r.shape, p.shape
            )));
        }
        for (dst, &src) in p.value.data_mut().iter_mut().zip(&r.data) {
            *dst = T::from_f64(src).expect("f64 converts to every Real");
        }
    }
    Ok(())
}

pub fn save_store<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_store(store)).map_err(|e| Error::io(path, e))
}

pub fn load_store<T: Real>(path: &Path, store: &mut ParamStore<T>) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_into_store(&bytes, store)
}
