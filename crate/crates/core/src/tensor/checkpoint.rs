//! Binary weight files.
//!
//! ```text
//! "CDSR" | version u16 | { name_len u16, name utf8, ndim u8, dims u32*, values f32* }* | crc32 u32
//! ```
//! All integers little-endian; the CRC covers every byte before it.

use std::path::Path;

use thiserror::Error;

use super::{ParamStore, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"CDSR";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint crc mismatch (stored {stored:08x}, computed {computed:08x})")]
    Crc { stored: u32, computed: u32 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub fn to_bytes(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_values() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for p in store.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    if buf.len() < 10 || &buf[..4] != MAGIC {
        return Err(CheckpointError::Format("missing CDSR magic".into()));
    }
    let body = &buf[..buf.len() - 4];
    let stored = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u16()?;
    if version != VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {}", version)));
    }
    let mut out = Vec::new();
    while r.pos < body.len() {
        let n = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| CheckpointError::Format("parameter name is not utf-8".into()))?
            .to_string();
        let ndim = r.take(1)?[0] as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let count: usize = shape.iter().product();
        let raw = r.take(count * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save(store: &ParamStore<f32>, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(store))?;
    Ok(())
}

/// Overwrites every parameter of `store` from the file. Names and shapes
/// must match exactly, in any order.
pub fn load_into(store: &mut ParamStore<f32>, path: &Path) -> Result<(), CheckpointError> {
    restore(store, &std::fs::read(path)?)
}

pub fn restore(store: &mut ParamStore<f32>, bytes: &[u8]) -> Result<(), CheckpointError> {
    let entries = from_bytes(bytes)?;
    if entries.len() != store.len() {
        return Err(CheckpointError::Format(format!(
            "checkpoint holds {} parameters, model expects {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, t) in entries {
        store.set(&name, t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngSeed;

    fn sample() -> ParamStore<f32> {
        let mut rng = RngSeed(3).rng();
        let mut s = ParamStore::new();
        s.init_normal("enc.0.w", vec![4, 3, 3, 3], 0.02, &mut rng).unwrap();
        s.init_const("enc.0.b", vec![4], 0.0).unwrap();
        s.init_const("r", vec![], 1.5).unwrap();
        s
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let s = sample();
        let bytes = to_bytes(&s);
        assert_eq!(&bytes[..4], b"CDSR");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        let mut t = sample();
        t.set("r", Tensor::scalar(0.0)).unwrap();
        restore(&mut t, &bytes).unwrap();
        assert_eq!(s.weight_hash(), t.weight_hash());
    }

    #[test]
    fn corruption_and_truncation_are_detected() {
        let bytes = to_bytes(&sample());
        let mut bad = bytes.clone();
        bad[20] ^= 0x10;
        assert!(matches!(from_bytes(&bad), Err(CheckpointError::Crc { .. })));
        assert!(from_bytes(&bytes[..bytes.len() - 7]).is_err());
        assert!(from_bytes(b"XXXX").is_err());
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let bytes = to_bytes(&sample());
        let mut other = ParamStore::<f32>::new();
        other.init_const("enc.0.w", vec![4, 3, 3, 3], 0.0).unwrap();
        assert!(restore(&mut other, &bytes).is_err());
        let mut wrong_shape = sample();
        let mut s2 = ParamStore::<f32>::new();
        s2.init_const("enc.0.w", vec![4, 3, 3, 3], 0.0).unwrap();
        s2.init_const("enc.0.b", vec![5], 0.0).unwrap();
        s2.init_const("r", vec![], 0.0).unwrap();
        assert!(restore(&mut wrong_shape, &to_bytes(&s2)).is_err());
    }
}
