//! Carry-less 32-bit range coder over integer CDF tables.
//!
//! The coder keeps a `[low, low + range)` window in 32-bit arithmetic and
//! emits the top byte whenever it stabilizes. Carries are avoided by
//! shrinking the range at 2^16 boundaries instead of propagating them, the
//! classic carry-less renormalization: the cost is a fraction of a bit per
//! forced split. Probability totals are powers of two (<= 2^16), so the
//! range division is a shift.
//!
//! Quantization lives here too: round half away from zero onto the integer
//! symbol grid.

use crate::entropy::CdfTable;
use crate::tensor::Tensor;
use crate::{Error, Result};

const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;

/// Round half away from zero, elementwise.
pub fn quantize(v: &Tensor) -> Vec<i64> {
    v.data().iter().map(|&x| x.round() as i64).collect()
}

pub struct RangeEncoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    /// Narrow the window to `[cum_lo, cum_hi) / 2^precision_bits`.
    pub fn encode(&mut self, cum_lo: u32, cum_hi: u32, precision_bits: u8) {
        debug_assert!(cum_lo < cum_hi && cum_hi <= (1 << precision_bits));
        let r = self.range >> precision_bits;
        self.low = self.low.wrapping_add(r * cum_lo);
        self.range = r * (cum_hi - cum_lo);
        self.normalize();
    }

    fn normalize(&mut self) {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                // window straddles a 2^16 boundary: clip instead of carrying
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    /// Flush the final code value; the returned payload is self-delimiting
    /// given the symbol count and tables.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..4 {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    buf: &'a [u8],
    pos: usize,
    low: u32,
    range: u32,
    code: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Result<Self> {
        if buf.len() < 4 {
            return Err(Error::Bitstream("payload truncated (header word)".into()));
        }
        let mut d = RangeDecoder {
            buf,
            pos: 0,
            low: 0,
            range: u32::MAX,
            code: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.buf[d.pos] as u32;
            d.pos += 1;
        }
        Ok(d)
    }

    /// Cumulative frequency of the next symbol; look it up in the table,
    /// then call [`RangeDecoder::decode_update`] with its bounds.
    pub fn decode_freq(&mut self, precision_bits: u8) -> u32 {
        let r = self.range >> precision_bits;
        let f = self.code.wrapping_sub(self.low) / r;
        f.min((1 << precision_bits) - 1)
    }

    pub fn decode_update(&mut self, cum_lo: u32, cum_hi: u32, precision_bits: u8) -> Result<()> {
        let r = self.range >> precision_bits;
        self.low = self.low.wrapping_add(r * cum_lo);
        self.range = r * (cum_hi - cum_lo);
        self.normalize()
    }

    fn normalize(&mut self) -> Result<()> {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    return Ok(());
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            if self.pos >= self.buf.len() {
                return Err(Error::Bitstream("payload truncated".into()));
            }
            self.code = (self.code << 8) | self.buf[self.pos] as u32;
            self.pos += 1;
            self.low <<= 8;
            self.range <<= 8;
        }
    }
}

/// Encode one symbol plane: `symbols[i]` is coded with `tables[table_of[i]]`.
/// All tables must share one precision.
pub fn encode_symbols(symbols: &[i64], table_of: &[usize], tables: &[CdfTable]) -> Result<Vec<u8>> {
    assert_eq!(symbols.len(), table_of.len());
    if tables.is_empty() {
        if symbols.is_empty() {
            return Ok(RangeEncoder::new().finish());
        }
        return Err(Error::Coding("no CDF tables supplied".into()));
    }
    let precision = tables[0].precision;
    if tables.iter().any(|t| t.precision != precision) {
        return Err(Error::Coding("mixed table precisions".into()));
    }
    let mut enc = RangeEncoder::new();
    for (&value, &ti) in symbols.iter().zip(table_of) {
        let table = &tables[ti];
        let sym = table.symbol_of(value);
        let (lo, hi) = table.bounds(sym);
        enc.encode(lo, hi, precision);
    }
    Ok(enc.finish())
}

/// Inverse of [`encode_symbols`]; `table_of` must match the encoder's.
pub fn decode_symbols(
    payload: &[u8],
    table_of: &[usize],
    tables: &[CdfTable],
) -> Result<Vec<i64>> {
    if table_of.is_empty() {
        return Ok(Vec::new());
    }
    if tables.is_empty() {
        return Err(Error::Coding("no CDF tables supplied".into()));
    }
    let precision = tables[0].precision;
    if tables.iter().any(|t| t.precision != precision) {
        return Err(Error::Coding("mixed table precisions".into()));
    }
    let mut dec = RangeDecoder::new(payload)?;
    let mut out = Vec::with_capacity(table_of.len());
    for &ti in table_of {
        let table = &tables[ti];
        let f = dec.decode_freq(precision);
        let sym = table.find(f);
        let (lo, hi) = table.bounds(sym);
        dec.decode_update(lo, hi, precision)?;
        out.push(table.value_of(sym));
    }
    Ok(out)
}

/// Cross-entropy of the symbols under their tables, in bits. The actual
/// payload stays within one percent plus a small constant of this.
pub fn table_bits(symbols: &[i64], table_of: &[usize], tables: &[CdfTable]) -> f64 {
    symbols
        .iter()
        .zip(table_of)
        .map(|(&v, &ti)| {
            let t = &tables[ti];
            t.symbol_bits(t.symbol_of(v))
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_table(n: usize, precision: u8) -> CdfTable {
        CdfTable::from_bin_probabilities(&vec![1.0 / n as f64; n], 0, precision).unwrap()
    }

    #[test]
    fn quantize_ties_away_from_zero() {
        let t = Tensor::new(vec![6], vec![0.4, -0.4, 0.5, -0.5, 1.5, -2.5]).unwrap();
        assert_eq!(quantize(&t), vec![0, 0, 1, -1, 2, -3]);
    }

    #[test]
    fn roundtrip_skewed_table() {
        let table =
            CdfTable::from_bin_probabilities(&[0.7, 0.1, 0.05, 0.05, 0.1], -2, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let symbols: Vec<i64> = (0..100_000).map(|_| rng.random_range(-2..=2)).collect();
        let table_of = vec![0usize; symbols.len()];
        let tables = vec![table];
        let payload = encode_symbols(&symbols, &table_of, &tables).unwrap();
        let decoded = decode_symbols(&payload, &table_of, &tables).unwrap();
        assert_eq!(symbols, decoded);
    }

    #[test]
    fn roundtrip_exhaustive_over_range() {
        // every symbol in the declared range decodes losslessly
        let table = CdfTable::from_bin_probabilities(
            &[0.02, 0.2, 0.3, 0.2, 0.1, 0.05, 0.08, 0.05],
            -4,
            12,
        )
        .unwrap();
        let symbols: Vec<i64> = (-4..4).collect();
        let table_of = vec![0usize; symbols.len()];
        let tables = vec![table];
        let payload = encode_symbols(&symbols, &table_of, &tables).unwrap();
        assert_eq!(decode_symbols(&payload, &table_of, &tables).unwrap(), symbols);
    }

    #[test]
    fn degenerate_alphabet_costs_almost_nothing() {
        // one dominant symbol, 10^4 occurrences: entropy ~0, payload tiny
        let table = uniform_table(1, 8);
        let symbols = vec![0i64; 10_000];
        let table_of = vec![0usize; symbols.len()];
        let payload = encode_symbols(&symbols, &table_of, &[table]).unwrap();
        assert!(payload.len() <= 40, "payload {} bytes", payload.len());
    }

    #[test]
    fn uniform_bytes_cost_one_byte_each() {
        let table = uniform_table(256, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let symbols: Vec<i64> = (0..10_000).map(|_| rng.random_range(0..256)).collect();
        let table_of = vec![0usize; symbols.len()];
        let tables = vec![table];
        let payload = encode_symbols(&symbols, &table_of, &tables).unwrap();
        let ideal = 10_000.0;
        assert!(
            (payload.len() as f64) < ideal * 1.01 + 32.0,
            "payload {} bytes vs ideal {ideal}",
            payload.len()
        );
        assert_eq!(decode_symbols(&payload, &table_of, &tables).unwrap(), symbols);
    }

    #[test]
    fn payload_tracks_cross_entropy() {
        let probs = [0.5, 0.25, 0.125, 0.0625, 0.0625];
        let table = CdfTable::from_bin_probabilities(&probs, 0, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let symbols: Vec<i64> = (0..100_000)
            .map(|_| {
                let r: f64 = rng.random();
                let mut acc = 0.0;
                for (i, &p) in probs.iter().enumerate() {
                    acc += p;
                    if r < acc {
                        return i as i64;
                    }
                }
                probs.len() as i64 - 1
            })
            .collect();
        let table_of = vec![0usize; symbols.len()];
        let tables = vec![table];
        let estimate = table_bits(&symbols, &table_of, &tables);
        let payload = encode_symbols(&symbols, &table_of, &tables).unwrap();
        let actual_bits = payload.len() as f64 * 8.0;
        assert!(
            actual_bits <= estimate * 1.01 + 256.0,
            "actual {actual_bits} vs estimate {estimate}"
        );
        assert_eq!(decode_symbols(&payload, &table_of, &tables).unwrap(), symbols);
    }

    #[test]
    fn truncated_payload_is_detected() {
        let table = uniform_table(256, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let symbols: Vec<i64> = (0..1000).map(|_| rng.random_range(0..256)).collect();
        let table_of = vec![0usize; symbols.len()];
        let tables = vec![table];
        let payload = encode_symbols(&symbols, &table_of, &tables).unwrap();
        let cut = &payload[..payload.len() / 2];
        assert!(decode_symbols(cut, &table_of, &tables).is_err());
        assert!(decode_symbols(&[1, 2], &table_of, &tables).is_err());
    }

    #[test]
    fn multi_table_streams_interleave() {
        // per-channel tables with different shapes, channel-major order
        let t0 = CdfTable::from_bin_probabilities(&[0.8, 0.1, 0.1], -1, 16).unwrap();
        let t1 = CdfTable::from_bin_probabilities(&[0.1, 0.1, 0.2, 0.6], -2, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut symbols = Vec::new();
        let mut table_of = Vec::new();
        for _ in 0..5000 {
            symbols.push(rng.random_range(-1..=1));
            table_of.push(0);
        }
        for _ in 0..5000 {
            symbols.push(rng.random_range(-2..=1));
            table_of.push(1);
        }
        let tables = vec![t0, t1];
        let payload = encode_symbols(&symbols, &table_of, &tables).unwrap();
        assert_eq!(decode_symbols(&payload, &table_of, &tables).unwrap(), symbols);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn roundtrip_random_tables_and_sequences(
            seed in 0u64..1_000_000,
            nbins in 2usize..40,
            len in 0usize..400,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let probs: Vec<f64> = (0..nbins).map(|_| rng.random::<f64>() + 1e-3).collect();
            let offset = rng.random_range(-50i64..50);
            let table = CdfTable::from_bin_probabilities(&probs, offset, 16).unwrap();
            let symbols: Vec<i64> = (0..len)
                .map(|_| offset + rng.random_range(0..nbins as i64))
                .collect();
            let table_of = vec![0usize; symbols.len()];
            let tables = vec![table];
            let payload = encode_symbols(&symbols, &table_of, &tables).unwrap();
            let decoded = decode_symbols(&payload, &table_of, &tables).unwrap();
            prop_assert_eq!(symbols, decoded);
        }

        #[test]
        fn quantize_is_within_half(v in proptest::collection::vec(-1e6f64..1e6, 1..50)) {
            let t = Tensor::new(vec![v.len()], v.clone()).unwrap();
            for (q, x) in quantize(&t).iter().zip(&v) {
                prop_assert!((*q as f64 - x).abs() <= 0.5);
            }
        }
    }
}
