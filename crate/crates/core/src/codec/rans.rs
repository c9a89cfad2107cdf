//! Byte-wise rANS with a 32-bit state.
//!
//! The encoder runs over the symbols back to front so the decoder can emit
//! them in order. The segment starts with the final encoder state
//! (little-endian) followed by the renormalization bytes.

use super::{CodecError, PmfTable};

/// Lower bound of the normalized state interval `[L, 2^31)`.
pub const RANS_L: u32 = 1 << 23;

fn check_inputs(symbols: usize, tables: usize) -> Result<(), CodecError> {
    if symbols != tables {
        return Err(CodecError::LengthMismatch { symbols, tables });
    }
    Ok(())
}

pub fn rans_encode(symbols: &[i32], tables: &[&PmfTable]) -> Result<Vec<u8>, CodecError> {
    check_inputs(symbols.len(), tables.len())?;
    for (i, (&s, t)) in symbols.iter().zip(tables).enumerate() {
        if !t.contains(s) {
            return Err(CodecError::OutOfSupport { index: i, value: s, min: t.support_min, max: t.support_max });
        }
    }
    let mut out = Vec::with_capacity(symbols.len() / 2 + 8);
    let mut x = RANS_L;
    for (&s, t) in symbols.iter().zip(tables).rev() {
        let (start, freq) = t.interval(s);
        let x_max = ((RANS_L >> t.precision) << 8) * freq;
        while x >= x_max {
            out.push(x as u8);
            x >>= 8;
        }
        x = ((x / freq) << t.precision) + (x % freq) + start;
    }
    out.extend_from_slice(&x.to_be_bytes());
    out.reverse();
    Ok(out)
}

/// Decodes `count` symbols and requires the segment to be consumed exactly
/// with the coder back at its initial state.
pub fn rans_decode(segment: &[u8], tables: &[&PmfTable], count: usize) -> Result<Vec<i32>, CodecError> {
    check_inputs(count, tables.len())?;
    if segment.len() < 4 {
        return Err(CodecError::Truncated(format!("segment of {} bytes has no state", segment.len())));
    }
    let mut x = u32::from_le_bytes(segment[..4].try_into().unwrap());
    if !(RANS_L..1 << 31).contains(&x) {
        return Err(CodecError::Corrupt(format!("initial state {:#x} outside the coder interval", x)));
    }
    let mut pos = 4;
    let mut out = Vec::with_capacity(count);
    for t in tables {
        let mask = (1u32 << t.precision) - 1;
        let (s, start, freq) = t.lookup(x & mask);
        out.push(s);
        x = freq * (x >> t.precision) + (x & mask) - start;
        while x < RANS_L {
            let Some(&b) = segment.get(pos) else {
                return Err(CodecError::Truncated(format!("ran out of bytes after {} of {} symbols", out.len(), count)));
            };
            x = (x << 8) | b as u32;
            pos += 1;
        }
    }
    if x != RANS_L || pos != segment.len() {
        return Err(CodecError::Corrupt(format!(
            "final state {:#x} with {} of {} bytes consumed",
            x,
            pos,
            segment.len()
        )));
    }
    Ok(out)
}
