//! Wire format for one transmitted representation.
//!
//! ```text
//! offset size field
//!  0     4    magic "SLRF"
//!  4     2    version (u16)
//!  6     16   model id
//! 22     2    block index (u16)
//! 24     1    tap position (0 embedding, 1 attention_out, 2 ffn_out, 3 block_out)
//! 25     4    T (u32)
//! 29     4    d (u32)
//! 33     1    dtype (0 = f32)
//! 34     T*d*4 payload, row-major f32
//! ..     4    crc32 over header and payload
//! ```
//!
//! All integers and reals are little-endian.

use crate::error::{Error, Result};
use crate::tinylm::{ModelId, RepresentationTrace, TapPoint, TapPosition};

pub const FRAME_MAGIC: &[u8; 4] = b"SLRF";
pub const FRAME_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 34;
pub const CRC_LEN: usize = 4;
pub const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationFrame {
    pub model_id: ModelId,
    pub tap: TapPoint,
    pub token_count: usize,
    pub d_model: usize,
    pub states: Vec<f32>,
}

impl RepresentationFrame {
    pub fn from_trace(trace: &RepresentationTrace, model_id: ModelId) -> Self {
        Self {
            model_id,
            tap: trace.tap,
            token_count: trace.token_count,
            d_model: trace.d_model,
            states: trace.states.clone(),
        }
    }

    pub fn to_trace(&self) -> RepresentationTrace {
        RepresentationTrace {
            tap: self.tap,
            token_count: self.token_count,
            d_model: self.d_model,
            states: self.states.clone(),
            source_id: None,
        }
    }

    /// Bitwise equality of every field, NaN payloads included.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.model_id == other.model_id
            && self.tap == other.tap
            && self.token_count == other.token_count
            && self.d_model == other.d_model
            && self.states.len() == other.states.len()
            && self
                .states
                .iter()
                .zip(&other.states)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.states.len() * 4 + CRC_LEN
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.states.len() != self.token_count * self.d_model {
            return Err(Error::Frame(format!(
                "payload holds {} values, header says {}x{}",
                self.states.len(),
                self.token_count,
                self.d_model
            )));
        }
        if self.states.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let block = u16::try_from(self.tap.block_index)
            .map_err(|_| Error::Frame("block index exceeds u16".into()))?;
        let t = u32::try_from(self.token_count).map_err(|_| Error::Frame("T exceeds u32".into()))?;
        let d = u32::try_from(self.d_model).map_err(|_| Error::Frame("d exceeds u32".into()))?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(FRAME_MAGIC);
        out.extend_from_slice(&FRAME_VERSION.to_le_bytes());
        out.extend_from_slice(&self.model_id.0);
        out.extend_from_slice(&block.to_le_bytes());
        out.push(self.tap.position.code());
        out.extend_from_slice(&t.to_le_bytes());
        out.extend_from_slice(&d.to_le_bytes());
        out.push(DTYPE_F32);
        debug_assert_eq!(out.len(), HEADER_LEN);
        for v in &self.states {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + CRC_LEN {
            return Err(Error::Frame(format!("frame of {} bytes is truncated", bytes.len())));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - CRC_LEN);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Crc { stored, computed });
        }
        if &body[0..4] != FRAME_MAGIC {
            return Err(Error::Frame("bad magic".into()));
        }
        let version = u16::from_le_bytes([body[4], body[5]]);
        if version != FRAME_VERSION {
            return Err(Error::Frame(format!("unsupported frame version {version}")));
        }
        let mut id = [0u8; 16];
        id.copy_from_slice(&body[6..22]);
        let block = u16::from_le_bytes([body[22], body[23]]) as usize;
        let position = TapPosition::from_code(body[24])?;
        let t = u32::from_le_bytes(body[25..29].try_into().expect("4 bytes")) as usize;
        let d = u32::from_le_bytes(body[29..33].try_into().expect("4 bytes")) as usize;
        if body[33] != DTYPE_F32 {
            return Err(Error::Frame(format!("unsupported dtype {}", body[33])));
        }
        let payload = &body[HEADER_LEN..];
        if Some(payload.len()) != t.checked_mul(d).and_then(|n| n.checked_mul(4)) {
            return Err(Error::Frame(format!(
                "payload of {} bytes does not match {t}x{d} f32",
                payload.len()
            )));
        }
        let states: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self {
            model_id: ModelId(id),
            tap: TapPoint::new(block, position),
            token_count: t,
            d_model: d,
            states,
        })
    }
}

/// Encode a finite trace; NaN or infinite states are refused.
pub fn serialize_frame(trace: &RepresentationTrace, model_id: ModelId) -> Result<Vec<u8>> {
    RepresentationFrame::from_trace(trace, model_id).encode()
}

pub fn deserialize_frame(bytes: &[u8]) -> Result<RepresentationFrame> {
    RepresentationFrame::decode(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(t: usize, d: usize, seed: u32) -> RepresentationFrame {
        RepresentationFrame {
            model_id: ModelId([7; 16]),
            tap: TapPoint::new(3, TapPosition::AttentionOut),
            token_count: t,
            d_model: d,
            states: (0..t * d).map(|i| (i as f32 * 0.37 + seed as f32).sin()).collect(),
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let f = frame(2, 3, 0);
        let b = f.encode().unwrap();
        assert_eq!(b.len(), 34 + 2 * 3 * 4 + 4);
        assert_eq!(&b[..4], b"SLRF");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[22..24], &[3, 0]);
        assert_eq!(b[24], 1);
        assert_eq!(&b[25..29], &[2, 0, 0, 0]);
        assert_eq!(&b[29..33], &[3, 0, 0, 0]);
        assert_eq!(b[33], 0);
        assert_eq!(&b[34..38], &f.states[0].to_le_bytes());
    }

    #[test]
    fn refuses_non_finite() {
        let mut f = frame(2, 2, 0);
        f.states[3] = f32::NAN;
        assert!(matches!(f.encode(), Err(Error::NonFinite)));
        f.states[3] = f32::INFINITY;
        assert!(matches!(f.encode(), Err(Error::NonFinite)));
    }

    #[test]
    fn every_single_byte_corruption_is_detected() {
        let b = frame(3, 4, 1).encode().unwrap();
        for i in 0..b.len() {
            for flip in [0x01u8, 0x80, 0xff] {
                let mut c = b.clone();
                c[i] ^= flip;
                assert!(RepresentationFrame::decode(&c).is_err(), "byte {i}");
            }
        }
        assert!(RepresentationFrame::decode(&b[..b.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bitwise(t in 1usize..12, d in 1usize..20, vals in proptest::collection::vec(-1e30f32..1e30, 240)) {
            let f = RepresentationFrame {
                model_id: ModelId([t as u8; 16]),
                tap: TapPoint::block_out(d % 4),
                token_count: t,
                d_model: d,
                states: vals[..t * d].to_vec(),
            };
            let back = RepresentationFrame::decode(&f.encode().unwrap()).unwrap();
            prop_assert!(back.bit_eq(&f));
        }
    }
}
