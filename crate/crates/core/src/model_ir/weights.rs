//! SOLW binary weights container.
//!
//! Layout (little-endian): magic `SOLW`, u32 version, u32 tensor count, then
//! per tensor: u16 name length, UTF-8 name, u8 dtype (0 = f32, 1 = f64),
//! u8 rank, rank × u32 extents, raw payload.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model_ir::meta::DType;
use crate::tensor::ParamTensor;

pub const MAGIC: [u8; 4] = *b"SOLW";
pub const VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::MalformedWeights(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
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

pub fn decode_weights(bytes: &[u8]) -> Result<BTreeMap<String, ParamTensor>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::MalformedWeights("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::MalformedWeights(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::MalformedWeights("name is not UTF-8".into()))?
            .to_string();
        let dtype = DType::from_code(r.u8()?)
            .ok_or_else(|| Error::MalformedWeights(format!("`{name}`: bad dtype")))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::MalformedWeights(format!("`{name}`: size overflows")))?;
        let payload = r.take(numel.checked_mul(dtype.size()).ok_or_else(|| {
            Error::MalformedWeights(format!("`{name}`: size overflows"))
        })?)?;
        let values = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        if out
            .insert(name.clone(), ParamTensor { dtype, shape, values })
            .is_some()
        {
            return Err(Error::MalformedWeights(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::MalformedWeights(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

/// Encodes tensors in name order.
pub fn encode_weights(params: &BTreeMap<String, ParamTensor>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dtype.code());
        out.push(t.shape.len() as u8);
        for &e in &t.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        match t.dtype {
            DType::F32 => {
                for &v in &t.values {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for &v in &t.values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn load_weights(path: &Path) -> Result<BTreeMap<String, ParamTensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

pub fn save_weights(params: &BTreeMap<String, ParamTensor>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_weights(params)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes() {
        let mut m = BTreeMap::new();
        m.insert("b".to_string(), ParamTensor::f32(vec![2], vec![1.0, -2.0]));
        let bytes = encode_weights(&m);
        assert_eq!(&bytes[..4], &[0x53, 0x4F, 0x4C, 0x57]);
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        // name len, name, dtype, rank, extent, payload
        assert_eq!(bytes.len(), 12 + 2 + 1 + 1 + 1 + 4 + 8);
        assert_eq!(decode_weights(&bytes).unwrap(), m);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), ParamTensor::f32(vec![2, 2], vec![0.0; 4]));
        let bytes = encode_weights(&m);
        assert!(decode_weights(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_weights(&bad).is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(
            tensors in proptest::collection::btree_map(
                "[a-z]{1,8}",
                (any::<bool>(), proptest::collection::vec(-1e6f64..1e6, 0..12)),
                0..5,
            )
        ) {
            let params: BTreeMap<String, ParamTensor> = tensors
                .into_iter()
                .map(|(k, (is64, vals))| {
                    let dtype = if is64 { DType::F64 } else { DType::F32 };
                    let t = ParamTensor::new(dtype, vec![vals.len()], vals).unwrap();
                    (k, t)
                })
                .collect();
            let bytes = encode_weights(&params);
            let back = decode_weights(&bytes).unwrap();
            prop_assert_eq!(&back, &params);
            prop_assert_eq!(encode_weights(&back), bytes);
        }
    }
}
