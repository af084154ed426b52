//! Integer symbol coding under a mixture model.
//!
//! Symbols `SYMBOL_LOW..=SYMBOL_HIGH` get table slots; the two end slots also
//! stand for everything beyond them and are followed by a raw 16-bit offset.
//! Cumulative counts are `floor(F(s - 0.5) · (TOTAL - SLOTS)) + (s - SYMBOL_LOW)`,
//! which gives every slot at least one count while tracking the model CDF `F`.

use super::gmm::GmmParams;
use super::range_coder::{Cdf, RangeDecoder, RangeEncoder};
use crate::error::Result;

pub const SYMBOL_LOW: i32 = -127;
pub const SYMBOL_HIGH: i32 = 128;
pub const SLOTS: usize = (SYMBOL_HIGH - SYMBOL_LOW + 1) as usize;
pub const TABLE_TOTAL: u32 = 1 << 16;
pub const ESCAPE_BITS: u32 = 16;
const ESCAPE_MAX: i32 = (1 << ESCAPE_BITS) - 1;

/// Smallest and largest values that survive coding; others are clamped.
pub const VALUE_MIN: i32 = SYMBOL_LOW - ESCAPE_MAX;
pub const VALUE_MAX: i32 = SYMBOL_HIGH + ESCAPE_MAX;

/// Lazily evaluated table for one mixture; only the slots the coder touches
/// are computed.
pub struct GmmCdf<'a> {
    pub params: &'a GmmParams,
}

impl Cdf for GmmCdf<'_> {
    fn symbols(&self) -> usize {
        SLOTS
    }

    fn total(&self) -> u32 {
        TABLE_TOTAL
    }

    fn cum(&self, slot: usize) -> u32 {
        if slot == 0 {
            return 0;
        }
        if slot >= SLOTS {
            return TABLE_TOTAL;
        }
        let s = SYMBOL_LOW + slot as i32;
        let f = self.params.cdf(s as f64 - 0.5).clamp(0.0, 1.0);
        let spread = (TABLE_TOTAL - SLOTS as u32) as f64;
        (f * spread).floor() as u32 + slot as u32
    }
}

pub fn encode_value(enc: &mut RangeEncoder, params: &GmmParams, value: i32) {
    let v = value.clamp(VALUE_MIN, VALUE_MAX);
    let cdf = GmmCdf { params };
    if v <= SYMBOL_LOW {
        enc.encode_symbol(&cdf, 0);
        enc.encode_bits((SYMBOL_LOW - v) as u32, ESCAPE_BITS);
    } else if v >= SYMBOL_HIGH {
        enc.encode_symbol(&cdf, SLOTS - 1);
        enc.encode_bits((v - SYMBOL_HIGH) as u32, ESCAPE_BITS);
    } else {
        enc.encode_symbol(&cdf, (v - SYMBOL_LOW) as usize);
    }
}

pub fn decode_value(dec: &mut RangeDecoder<'_>, params: &GmmParams) -> Result<i32> {
    let slot = dec.decode_symbol(&GmmCdf { params })?;
    Ok(if slot == 0 {
        SYMBOL_LOW - dec.decode_bits(ESCAPE_BITS)? as i32
    } else if slot == SLOTS - 1 {
        SYMBOL_HIGH + dec.decode_bits(ESCAPE_BITS)? as i32
    } else {
        SYMBOL_LOW + slot as i32
    })
}

/// Code length in bits the table assigns to `value`, including any escape.
pub fn table_bits(params: &GmmParams, value: i32) -> f64 {
    let v = value.clamp(VALUE_MIN, VALUE_MAX);
    let cdf = GmmCdf { params };
    let slot = (v.clamp(SYMBOL_LOW, SYMBOL_HIGH) - SYMBOL_LOW) as usize;
    let size = cdf.cum(slot + 1) - cdf.cum(slot);
    let escape = if v <= SYMBOL_LOW || v >= SYMBOL_HIGH { ESCAPE_BITS as f64 } else { 0.0 };
    (TABLE_TOTAL as f64 / size as f64).log2() + escape
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn table_is_strictly_increasing_and_complete() {
        for params in [
            GmmParams::single(0.0, 1e-3),
            GmmParams::single(3.4, 0.5),
            GmmParams::single(-300.0, 2.0),
            GmmParams::new([0.2, 0.3, 0.5], [-40.0, 0.0, 90.0], [1.0, 10.0, 0.2]).unwrap(),
        ] {
            let cdf = GmmCdf { params: &params };
            assert_eq!(cdf.cum(0), 0);
            assert_eq!(cdf.cum(SLOTS), TABLE_TOTAL);
            for s in 0..SLOTS {
                assert!(cdf.cum(s + 1) > cdf.cum(s));
            }
        }
    }

    #[test]
    fn peaked_symbol_is_cheap() {
        let params = GmmParams::single(0.0, 0.1);
        assert!(table_bits(&params, 0) < 0.01);
        assert!(table_bits(&params, 5) > 10.0);
    }

    #[test]
    fn table_cost_tracks_model() {
        let params = GmmParams::single(0.3, 2.0);
        for v in -6..=6 {
            let model = params.bits(v as f64);
            assert!((table_bits(&params, v) - model).abs() < 0.02, "{v}");
        }
    }

    #[test]
    fn payload_matches_estimate_on_long_streams() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let mut enc = RangeEncoder::new();
        let mut estimate = 0.0;
        for _ in 0..10_000 {
            let params = GmmParams::new(
                [0.5, 0.3, 0.2],
                std::array::from_fn(|_| rng.gen_range(-4.0..4.0)),
                std::array::from_fn(|_| rng.gen_range(0.3..6.0)),
            )
            .unwrap();
            let u: f64 = rng.gen_range(0.0..1.0);
            let v = (SYMBOL_LOW + 1..SYMBOL_HIGH).find(|&s| params.cdf(s as f64 + 0.5) > u).unwrap_or(SYMBOL_HIGH - 1);
            estimate += params.bits(v as f64);
            encode_value(&mut enc, &params, v);
        }
        let actual = enc.finish().len() as f64 * 8.0;
        assert!(((estimate - actual) / estimate).abs() < 0.01, "{estimate} vs {actual}");
    }

    proptest! {
        #[test]
        fn values_round_trip(
            values in prop::collection::vec(-70_000i32..70_000, 1..60),
            mean in -200.0f64..200.0,
            scale in 0.001f64..80.0,
        ) {
            let params = GmmParams::single(mean, scale);
            let mut enc = RangeEncoder::new();
            for &v in &values {
                encode_value(&mut enc, &params, v);
            }
            let bytes = enc.finish();
            let mut dec = RangeDecoder::new(&bytes);
            for &v in &values {
                prop_assert_eq!(decode_value(&mut dec, &params).unwrap(), v.clamp(VALUE_MIN, VALUE_MAX));
            }
        }
    }
}
