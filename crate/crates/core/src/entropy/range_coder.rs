//! Byte-oriented range coder with a 32-bit range and carry propagation
//! through a cached output byte.
//!
//! Frequencies are expressed against a power-of-two total, so each step is a
//! shift rather than a division.

use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    started: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            started: false,
            out: Vec::new(),
        }
    }

    /// Codes the interval `[cum, cum + freq)` out of `2^total_bits`.
    pub fn encode(&mut self, cum: u32, freq: u32, total_bits: u32) {
        debug_assert!(freq > 0 && cum + freq <= 1 << total_bits);
        let r = self.range >> total_bits;
        self.low += r as u64 * cum as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Writes `nbits ≤ 16` raw bits.
    pub fn encode_bits(&mut self, value: u32, nbits: u32) {
        debug_assert!(nbits <= 16 && (value >> nbits) == 0);
        if nbits > 0 {
            self.encode(value, 1, nbits);
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                // The very first cached byte is always zero and is not emitted.
                if self.started {
                    self.out.push(byte.wrapping_add(carry));
                }
                self.started = true;
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        let mut dec = Self {
            code: 0,
            range: u32::MAX,
            input,
            pos: 0,
        };
        for _ in 0..4 {
            dec.code = (dec.code << 8) | dec.next_byte()? as u32;
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self
            .input
            .get(self.pos)
            .ok_or_else(|| Error::Corrupt(format!("stream exhausted after {} bytes", self.input.len())))?;
        self.pos += 1;
        Ok(b)
    }

    /// Returns the cumulative target in `[0, 2^total_bits)`; must be followed
    /// by [`RangeDecoder::consume`] with the slot that contains it.
    pub fn target(&mut self, total_bits: u32) -> Result<u32> {
        let r = self.range >> total_bits;
        let v = self.code / r;
        if v >= 1 << total_bits {
            return Err(Error::Corrupt("range decoder state out of bounds".into()));
        }
        Ok(v)
    }

    pub fn consume(&mut self, cum: u32, freq: u32, total_bits: u32) -> Result<()> {
        let r = self.range >> total_bits;
        self.code -= r * cum;
        self.range = r * freq;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode_bits(&mut self, nbits: u32) -> Result<u32> {
        if nbits == 0 {
            return Ok(0);
        }
        let v = self.target(nbits)?;
        self.consume(v, 1, nbits)?;
        Ok(v)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_random_intervals_and_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ops = Vec::new();
        for _ in 0..20000 {
            if rng.gen_bool(0.3) {
                let n = rng.gen_range(1..=16);
                ops.push((true, rng.gen_range(0..1u32 << n), 0, n));
            } else {
                let freq = rng.gen_range(1..=1000u32);
                let cum = rng.gen_range(0..=(65536 - freq));
                ops.push((false, cum, freq, 16));
            }
        }
        let mut enc = RangeEncoder::new();
        for &(bits, a, b, n) in &ops {
            if bits {
                enc.encode_bits(a, n);
            } else {
                enc.encode(a, b, n);
            }
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for &(bits, a, b, n) in &ops {
            if bits {
                assert_eq!(dec.decode_bits(n).unwrap(), a);
            } else {
                let t = dec.target(n).unwrap();
                assert!(t >= a && t < a + b);
                dec.consume(a, b, n).unwrap();
            }
        }
        assert_eq!(dec.position(), bytes.len());
    }

    #[test]
    fn empty_stream_is_four_bytes() {
        let bytes = RangeEncoder::new().finish();
        assert_eq!(bytes.len(), 4);
        assert!(RangeDecoder::new(&bytes[..3]).is_err());
    }
}
