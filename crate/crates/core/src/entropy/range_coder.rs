//! Byte-oriented range coder with carry propagation.
//!
//! The encoder keeps a 33-bit `low` and a 32-bit `range`; bytes are emitted
//! once the top byte of `low` can no longer change, with pending `0xFF` runs
//! held back until a carry resolves them. The leading byte of every stream is
//! always zero and is not written.

use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;
/// Largest total a frequency table may use.
pub const MAX_TOTAL: u32 = 1 << 16;

/// Cumulative frequency table over symbols `0..symbols()`.
///
/// `cum(0) == 0`, `cum(symbols()) == total()`, and every symbol has a
/// positive frequency.
pub trait Cdf {
    fn symbols(&self) -> usize;
    fn total(&self) -> u32;
    fn cum(&self, symbol: usize) -> u32;
}

/// Explicit table of cumulative counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    cum: Vec<u32>,
}

impl CdfTable {
    pub fn from_frequencies(freqs: &[u32]) -> Result<Self> {
        if freqs.is_empty() || freqs.contains(&0) {
            return Err(Error::InvalidArgument("every symbol needs a positive frequency".into()));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        cum.push(0);
        for &f in freqs {
            acc = acc
                .checked_add(f)
                .filter(|&t| t <= MAX_TOTAL)
                .ok_or_else(|| Error::InvalidArgument(format!("frequency total exceeds {MAX_TOTAL}")))?;
            cum.push(acc);
        }
        Ok(CdfTable { cum })
    }
}

impl Cdf for CdfTable {
    fn symbols(&self) -> usize {
        self.cum.len() - 1
    }
    fn total(&self) -> u32 {
        *self.cum.last().unwrap()
    }
    fn cum(&self, symbol: usize) -> u32 {
        self.cum[symbol]
    }
}

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    out: Vec<u8>,
    started: bool,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder { low: 0, range: u32::MAX, cache: 0, pending: 1, out: Vec::new(), started: false }
    }

    fn emit(&mut self, byte: u8) {
        if self.started {
            self.out.push(byte);
        } else {
            debug_assert_eq!(byte, 0);
            self.started = true;
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || self.low >> 32 != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.emit(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Narrows the interval to `[start, start + size)` out of `total`.
    pub fn encode(&mut self, start: u32, size: u32, total: u32) {
        debug_assert!(size > 0 && start + size <= total && total <= MAX_TOTAL);
        let r = self.range / total;
        self.low += r as u64 * start as u64;
        self.range = r * size;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode_symbol<C: Cdf + ?Sized>(&mut self, cdf: &C, symbol: usize) {
        let lo = cdf.cum(symbol);
        self.encode(lo, cdf.cum(symbol + 1) - lo, cdf.total());
    }

    /// Writes the low `bits` bits of `value` with a uniform model.
    pub fn encode_bits(&mut self, value: u32, bits: u32) {
        debug_assert!(bits <= 16 && value < (1 << bits));
        self.encode(value, 1, 1 << bits);
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
    step: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        let mut d = RangeDecoder { code: 0, range: u32::MAX, input, pos: 0, step: 0 };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    /// A valid stream is never read past its end; reads beyond it yield zero
    /// and mark the decoder as overrun.
    fn next_byte(&mut self) -> u8 {
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    pub fn overran(&self) -> bool {
        self.pos > self.input.len()
    }

    pub fn decode_freq(&mut self, total: u32) -> u32 {
        self.step = self.range / total;
        (self.code / self.step).min(total - 1)
    }

    pub fn decode_update(&mut self, start: u32, size: u32) {
        self.code -= start * self.step;
        self.range = size * self.step;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
    }

    pub fn decode_symbol<C: Cdf + ?Sized>(&mut self, cdf: &C) -> Result<usize> {
        let target = self.decode_freq(cdf.total());
        let (mut lo, mut hi) = (0usize, cdf.symbols());
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if cdf.cum(mid) <= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let start = cdf.cum(lo);
        let end = cdf.cum(lo + 1);
        if target < start || target >= end {
            return Err(Error::Format("range decoder target outside the table".into()));
        }
        self.decode_update(start, end - start);
        if self.overran() {
            return Err(Error::Truncated("entropy-coded substream ended early".into()));
        }
        Ok(lo)
    }

    pub fn decode_bits(&mut self, bits: u32) -> Result<u32> {
        let v = self.decode_freq(1 << bits);
        self.decode_update(v, 1);
        if self.overran() {
            return Err(Error::Truncated("entropy-coded substream ended early".into()));
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn round_trip(table: &CdfTable, symbols: &[usize]) -> Vec<u8> {
        let mut enc = RangeEncoder::new();
        for &s in symbols {
            enc.encode_symbol(table, s);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        for &s in symbols {
            assert_eq!(dec.decode_symbol(table).unwrap(), s);
        }
        bytes
    }

    #[test]
    fn empty_stream_is_four_bytes() {
        assert_eq!(RangeEncoder::new().finish().len(), 4);
    }

    #[test]
    fn truncation_is_detected() {
        let table = CdfTable::from_frequencies(&[7, 9, 11, 13]).unwrap();
        let seq: Vec<usize> = (0..200).map(|i| (i * 7) % 4).collect();
        let bytes = round_trip(&table, &seq);
        let cut = &bytes[..bytes.len() / 2];
        let mut dec = RangeDecoder::new(cut);
        let failed = seq.iter().any(|_| dec.decode_symbol(&table).is_err());
        assert!(failed);
    }

    #[test]
    fn exhaustive_short_sequences() {
        let table = CdfTable::from_frequencies(&[1, 3, 60_000, 5]).unwrap();
        for len in 1..=4u32 {
            for code in 0..4usize.pow(len) {
                let seq: Vec<usize> = (0..len).map(|i| (code / 4usize.pow(i)) % 4).collect();
                round_trip(&table, &seq);
            }
        }
    }

    #[test]
    fn every_ternary_sequence_up_to_eight() {
        let table = CdfTable::from_frequencies(&[5, 1, 2]).unwrap();
        let mut count = 0;
        for len in 0..=8u32 {
            for code in 0..3usize.pow(len) {
                let seq: Vec<usize> = (0..len).map(|i| (code / 3usize.pow(i)) % 3).collect();
                round_trip(&table, &seq);
                count += 1;
            }
        }
        assert_eq!(count, (3usize.pow(9) - 1) / 2);
    }

    #[test]
    fn fair_bits_cost_one_bit_each() {
        let table = CdfTable::from_frequencies(&[1, 1]).unwrap();
        let seq: Vec<usize> = (0..800).map(|i| ((i * 2654435761usize) >> 7) & 1).collect();
        let len = round_trip(&table, &seq).len();
        assert!((94..=106).contains(&len), "{len}");
    }

    #[test]
    fn skewed_tables_force_carries() {
        let table = CdfTable::from_frequencies(&[1, 65_534, 1]).unwrap();
        let mut seq = vec![1; 5000];
        for i in (0..5000).step_by(97) {
            seq[i] = if i % 2 == 0 { 2 } else { 0 };
        }
        round_trip(&table, &seq);
    }

    #[test]
    fn length_is_near_entropy() {
        let freqs = [30_000u32, 20_000, 10_000, 5_000, 536];
        let table = CdfTable::from_frequencies(&freqs).unwrap();
        let total: f64 = freqs.iter().map(|&f| f as f64).sum();
        let mut state = 12345u64;
        let mut seq = Vec::new();
        let mut ideal = 0.0;
        for _ in 0..20_000 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let u = ((state >> 33) % total as u64) as u32;
            let s = (0..freqs.len()).find(|&i| table.cum(i + 1) > u).unwrap();
            ideal += -(freqs[s] as f64 / total).log2();
            seq.push(s);
        }
        let bytes = round_trip(&table, &seq);
        let actual = bytes.len() as f64 * 8.0;
        assert!(actual <= ideal * 1.001 + 64.0, "{actual} vs {ideal}");
    }

    #[test]
    fn raw_bits_round_trip() {
        let mut enc = RangeEncoder::new();
        let vals = [0u32, 65535, 1, 32768, 12345];
        for &v in &vals {
            enc.encode_bits(v, 16);
        }
        enc.encode_bits(1, 1);
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        for &v in &vals {
            assert_eq!(dec.decode_bits(16).unwrap(), v);
        }
        assert_eq!(dec.decode_bits(1).unwrap(), 1);
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(CdfTable::from_frequencies(&[]).is_err());
        assert!(CdfTable::from_frequencies(&[3, 0, 1]).is_err());
        assert!(CdfTable::from_frequencies(&[40_000, 40_000]).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_tables_round_trip(
            freqs in prop::collection::vec(1u32..2000, 2..40),
            picks in prop::collection::vec(any::<prop::sample::Index>(), 0..400),
        ) {
            let table = CdfTable::from_frequencies(&freqs).unwrap();
            let seq: Vec<usize> = picks.iter().map(|i| i.index(freqs.len())).collect();
            round_trip(&table, &seq);
        }
    }
}
