//! Self-describing checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "RVCK"
//! version    u16
//! meta_len   u32      length of the JSON metadata block
//! meta       utf-8 JSON object (model config and any extra records)
//! n_tensors  u32
//! per tensor:
//!   name_len u16, name utf-8
//!   ndim     u8, dims u32 * ndim
//!   data     f32 * prod(dims), row-major
//! crc32      u32 over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use serde_json::Value;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RVCK";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode(meta: &Value, store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let meta_bytes = serde_json::to_vec(meta)?;
    out.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("parameter name too long: {name}")));
        }
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(2);
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
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

pub fn decode(bytes: &[u8]) -> Result<(Value, ParamStore)> {
    if bytes.len() < 4 + 2 + 4 + 4 + 4 {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Crc { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta: Value = serde_json::from_slice(r.take(meta_len)?)?;
    let n = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?
            .to_string();
        let ndim = r.u8()? as usize;
        let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims.as_slice() {
            [c] => (1, *c),
            [r0, c] => (*r0, *c),
            _ => return Err(Error::Checkpoint(format!("{name}: unsupported rank {ndim}"))),
        };
        let raw = r.take(rows * cols * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        store.insert(name, Tensor::from_vec(rows, cols, data));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((meta, store))
}

pub fn save(path: &Path, meta: &Value, store: &ParamStore) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode(meta, store)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Value, ParamStore)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_f32_values_and_order() {
        let mut store = ParamStore::new();
        store.insert("b.w", Tensor::from_vec(2, 2, vec![0.1, -2.5, 3.0, 1e-3]));
        store.insert("a", Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]));
        store.round_to_f32();
        let meta = serde_json::json!({"kind": "test"});
        let bytes = encode(&meta, &store).unwrap();
        let (m2, s2) = decode(&bytes).unwrap();
        assert_eq!(m2, meta);
        assert_eq!(s2, store);
        assert_eq!(s2.name(crate::nn::ParamId(0)), "b.w");
    }

    #[test]
    fn corruption_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(3, 3, 0.5));
        let mut bytes = encode(&serde_json::json!({}), &store).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(Error::Crc { .. })));
    }
}
