//! Container for per-level rANS segments.
//!
//! ```text
//! "CDSB" | version u16 | levels u8 | {h u16, w u16, c u16, len u32} * levels | payloads | crc32 u32
//! ```
//! Little-endian. The CRC covers every preceding byte. Version 1 fixes the
//! residual support to [-127, 128] and the table precision to 16 bits.

use super::CodecError;

pub const MAGIC: &[u8; 4] = b"CDSB";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelShape {
    pub height: u16,
    pub width: u16,
    pub channels: u16,
}

impl LevelShape {
    pub fn elements(&self) -> usize {
        self.height as usize * self.width as usize * self.channels as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub version: u16,
    pub levels: Vec<(LevelShape, Vec<u8>)>,
}

impl Bitstream {
    pub fn new(levels: Vec<(LevelShape, Vec<u8>)>) -> Self {
        Bitstream { version: VERSION, levels }
    }

    /// Payload bits summed over levels (header and CRC excluded).
    pub fn payload_bits(&self) -> usize {
        self.levels.iter().map(|(_, p)| p.len() * 8).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CodecError> {
        if self.levels.len() > u8::MAX as usize {
            return Err(CodecError::Header(format!("{} levels exceed the u8 count", self.levels.len())));
        }
        let mut out = Vec::with_capacity(11 + 10 * self.levels.len() + self.payload_bits() / 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.levels.len() as u8);
        for (shape, payload) in &self.levels {
            let len = u32::try_from(payload.len())
                .map_err(|_| CodecError::Header(format!("payload of {} bytes exceeds u32", payload.len())))?;
            out.extend_from_slice(&shape.height.to_le_bytes());
            out.extend_from_slice(&shape.width.to_le_bytes());
            out.extend_from_slice(&shape.channels.to_le_bytes());
            out.extend_from_slice(&len.to_le_bytes());
        }
        for (_, payload) in &self.levels {
            out.extend_from_slice(payload);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < 11 {
            return Err(CodecError::Truncated(format!("{} bytes cannot hold a header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(CodecError::Header("missing CDSB magic".into()));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CodecError::Crc { stored, computed });
        }
        let version = u16::from_le_bytes([body[4], body[5]]);
        if version != VERSION {
            return Err(CodecError::Header(format!("unsupported version {}", version)));
        }
        let n = body[6] as usize;
        let table_end = 7 + 10 * n;
        if body.len() < table_end {
            return Err(CodecError::Truncated(format!("level table needs {} bytes, have {}", table_end, body.len())));
        }
        let u16_at = |i: usize| u16::from_le_bytes([body[i], body[i + 1]]);
        let mut shapes = Vec::with_capacity(n);
        for l in 0..n {
            let b = 7 + 10 * l;
            let shape = LevelShape { height: u16_at(b), width: u16_at(b + 2), channels: u16_at(b + 4) };
            let len = u32::from_le_bytes(body[b + 6..b + 10].try_into().unwrap()) as usize;
            shapes.push((shape, len));
        }
        let declared: usize = shapes.iter().map(|s| s.1).sum();
        if body.len() - table_end != declared {
            return Err(CodecError::Truncated(format!(
                "header declares {} payload bytes, stream carries {}",
                declared,
                body.len() - table_end
            )));
        }
        let mut pos = table_end;
        let levels = shapes
            .into_iter()
            .map(|(shape, len)| {
                let p = body[pos..pos + len].to_vec();
                pos += len;
                (shape, p)
            })
            .collect();
        Ok(Bitstream { version, levels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Bitstream {
        Bitstream::new(vec![
            (LevelShape { height: 32, width: 32, channels: 4 }, vec![1, 2, 3, 4, 5]),
            (LevelShape { height: 8, width: 8, channels: 16 }, vec![9; 4]),
        ])
    }

    #[test]
    fn layout_is_exact() {
        let b = sample().to_bytes().unwrap();
        assert_eq!(&b[..4], b"CDSB");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(b[6], 2);
        assert_eq!(&b[7..17], &[32, 0, 32, 0, 4, 0, 5, 0, 0, 0]);
        assert_eq!(&b[27..32], &[1, 2, 3, 4, 5]);
        assert_eq!(b.len(), 7 + 20 + 9 + 4);
        let crc = crc32fast::hash(&b[..b.len() - 4]);
        assert_eq!(&b[b.len() - 4..], &crc.to_le_bytes());
    }

    #[test]
    fn damage_is_reported() {
        let b = sample().to_bytes().unwrap();
        for i in 0..b.len() {
            let mut bad = b.clone();
            bad[i] ^= 1;
            assert!(Bitstream::parse(&bad).is_err(), "flip at {}", i);
        }
        for cut in 0..b.len() {
            assert!(Bitstream::parse(&b[..cut]).is_err());
        }
    }

    proptest! {
        #[test]
        fn header_roundtrip(levels in proptest::collection::vec((any::<u16>(), any::<u16>(), any::<u16>(), proptest::collection::vec(any::<u8>(), 0..64)), 0..6)) {
            let s = Bitstream::new(levels.into_iter().map(|(h, w, c, p)| (LevelShape { height: h, width: w, channels: c }, p)).collect());
            let bytes = s.to_bytes().unwrap();
            prop_assert_eq!(Bitstream::parse(&bytes).unwrap(), s);
        }
    }
}
