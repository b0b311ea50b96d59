//! Variable byte integer: 7 value bits per byte, high bit set on every byte
//! except the last. At most 4 bytes, so the largest value is 268 435 455.

use super::{CodecError, Sink};

pub const MAX_VARINT: u32 = 268_435_455;

pub fn varint_len(value: u32) -> usize {
    match value {
        0..=127 => 1,
        128..=16_383 => 2,
        16_384..=2_097_151 => 3,
        _ => 4,
    }
}

pub fn encode_varint(value: u32, out: &mut impl Sink) -> Result<(), CodecError> {
    if value > MAX_VARINT {
        return Err(CodecError::OversizePacket(value as usize));
    }
    let mut x = value;
    loop {
        let mut byte = (x % 128) as u8;
        x /= 128;
        if x > 0 {
            byte |= 0x80;
        }
        out.put(&[byte]);
        if x == 0 {
            return Ok(());
        }
    }
}

/// Returns `Ok(None)` when `buf` ends before the integer does.
pub fn decode_varint(buf: &[u8]) -> Result<Option<(u32, usize)>, CodecError> {
    let mut value: u32 = 0;
    let mut multiplier: u32 = 1;
    for (i, &byte) in buf.iter().enumerate() {
        if i == 4 {
            return Err(CodecError::MalformedPacket("variable byte integer longer than 4 bytes"));
        }
        value += (byte & 0x7F) as u32 * multiplier;
        if byte & 0x80 == 0 {
            let len = i + 1;
            if len > 1 && byte == 0 {
                return Err(CodecError::MalformedPacket("non-minimal variable byte integer"));
            }
            return Ok(Some((value, len)));
        }
        multiplier *= 128;
    }
    if buf.len() >= 4 {
        return Err(CodecError::MalformedPacket("variable byte integer longer than 4 bytes"));
    }
    Ok(None)
}
