//! Bit-exact 32-bit range coder over quantized CDF tables.
//!
//! Carry-less (Subbotin-style) variant: renormalization emits one byte at a
//! time in big-endian order, and a range adjustment at the 16-bit bound
//! avoids carry propagation entirely. Encoder and decoder keep identical
//! (low, range) state machines. The wire format is documented in FORMAT.md.

use crate::entropy::QuantizedCdfTable;
use crate::error::{RdcError, Result};

const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;

/// Bytes appended by `finish`; also the size of an empty stream.
pub const TERMINATION_BYTES: usize = 4;

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

    /// (low, range) state, for lockstep trace tests.
    pub fn state(&self) -> (u32, u32) {
        (self.low, self.range)
    }

    fn renorm(&mut self) {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) < TOP {
                // high bytes agree: settled
            } else if self.range < BOT {
                self.range = self.low.wrapping_neg() & (BOT - 1);
            } else {
                break;
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    fn encode_interval(&mut self, cum_lo: u32, cum_hi: u32, precision: u32) {
        debug_assert!(cum_lo < cum_hi);
        let r = self.range >> precision;
        self.low = self.low.wrapping_add(r.wrapping_mul(cum_lo));
        self.range = r * (cum_hi - cum_lo);
        self.renorm();
    }

    /// Encodes a symbol value under `table`, escape-coding out-of-range
    /// values as sign + 8-bit magnitude raw bits.
    pub fn encode(&mut self, value: i32, table: &QuantizedCdfTable) {
        let in_range = value >= table.min && value <= table.max;
        let idx = if in_range {
            (value - table.min) as usize
        } else {
            table
                .escape_index()
                .expect("out-of-range symbol with no escape slot")
        };
        self.encode_interval(table.cum[idx], table.cum[idx + 1], table.precision);
        if !in_range {
            let sign = u32::from(value < 0);
            let mag = value.unsigned_abs().min(255);
            self.encode_raw_bits(sign, 1);
            self.encode_raw_bits(mag, 8);
        }
    }

    /// Raw (uniform) bits, MSB first.
    pub fn encode_raw_bits(&mut self, value: u32, nbits: u32) {
        for i in (0..nbits).rev() {
            let bit = (value >> i) & 1;
            self.encode_interval(bit << 15, (bit + 1) << 15, 16);
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..TERMINATION_BYTES {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
        }
        self.out
    }

    pub fn len(&self) -> usize {
        self.out.len()
    }

    pub fn is_empty(&self) -> bool {
        self.out.is_empty()
    }
}

pub struct RangeDecoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder {
            low: 0,
            range: u32::MAX,
            code: 0,
            bytes,
            pos: 0,
        };
        for _ in 0..TERMINATION_BYTES {
            d.code = (d.code << 8) | u32::from(d.next_byte()?);
        }
        Ok(d)
    }

    pub fn state(&self) -> (u32, u32) {
        (self.low, self.range)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self
            .bytes
            .get(self.pos)
            .ok_or_else(|| RdcError::Decode("range coder input truncated".into()))?;
        self.pos += 1;
        Ok(b)
    }

    fn renorm(&mut self) -> Result<()> {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) < TOP {
            } else if self.range < BOT {
                self.range = self.low.wrapping_neg() & (BOT - 1);
            } else {
                break;
            }
            self.code = (self.code << 8) | u32::from(self.next_byte()?);
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(())
    }

    fn decode_index(&mut self, table: &QuantizedCdfTable) -> Result<usize> {
        let r = self.range >> table.precision;
        let target = (self.code.wrapping_sub(self.low) / r).min(table.total() - 1);
        let idx = table.lookup(target);
        self.low = self
            .low
            .wrapping_add(r.wrapping_mul(table.cum[idx]));
        self.range = r * (table.cum[idx + 1] - table.cum[idx]);
        self.renorm()?;
        Ok(idx)
    }

    /// Decodes one symbol value under `table`, following the escape path
    /// for out-of-range values.
    pub fn decode(&mut self, table: &QuantizedCdfTable) -> Result<i32> {
        let idx = self.decode_index(table)?;
        if table.escape_index() == Some(idx) {
            let sign = self.decode_raw_bits(1)?;
            let mag = self.decode_raw_bits(8)? as i32;
            Ok(if sign == 1 { -mag } else { mag })
        } else {
            Ok(table.value_of(idx))
        }
    }

    pub fn decode_raw_bits(&mut self, nbits: u32) -> Result<u32> {
        let mut v = 0;
        for _ in 0..nbits {
            let r = self.range >> 16;
            let target = (self.code.wrapping_sub(self.low) / r).min((1 << 16) - 1);
            let bit = target >> 15;
            self.low = self.low.wrapping_add(r.wrapping_mul(bit << 15));
            self.range = r << 15;
            self.renorm()?;
            v = (v << 1) | bit;
        }
        Ok(v)
    }

    /// Bytes consumed so far (including the initial code load).
    pub fn consumed(&self) -> usize {
        self.pos
    }

    /// Checks the entire input was consumed.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(RdcError::Decode(format!(
                "range coder consumed {} of {} bytes",
                self.pos,
                self.bytes.len()
            )));
        }
        Ok(())
    }
}

/// One-shot encode of a symbol sequence with per-symbol tables.
pub fn rc_encode(symbols: &[i32], tables: &[&QuantizedCdfTable]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(RdcError::InvalidArgument(format!(
            "rc_encode: {} symbols but {} tables",
            symbols.len(),
            tables.len()
        )));
    }
    let mut enc = RangeEncoder::new();
    for (&s, t) in symbols.iter().zip(tables) {
        enc.encode(s, t);
    }
    Ok(enc.finish())
}

/// One-shot decode under the identical table sequence. Fails on truncated
/// or trailing input rather than returning wrong symbols.
pub fn rc_decode(bytes: &[u8], tables: &[&QuantizedCdfTable]) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(tables.len());
    for t in tables {
        out.push(dec.decode(t)?);
    }
    dec.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::{build_cdf_table, gaussian_cdf_table};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn uniform_binary_table() -> QuantizedCdfTable {
        build_cdf_table(|x| ((x + 0.5) / 2.0).clamp(0.0, 1.0), 16, 0, 1, false).unwrap()
    }

    #[test]
    fn empty_stream_is_termination_only() {
        let enc = RangeEncoder::new();
        let bytes = enc.finish();
        assert_eq!(bytes.len(), TERMINATION_BYTES);
        let dec = RangeDecoder::new(&bytes).unwrap();
        dec.finish().unwrap();
    }

    #[test]
    fn uniform_binary_hits_entropy() {
        let table = uniform_binary_table();
        assert_eq!(table.cum, vec![0, 32768, 65536]);
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let mut enc = RangeEncoder::new();
        let symbols: Vec<i32> = (0..1000).map(|_| rng.gen_range(0..2)).collect();
        for &s in &symbols {
            enc.encode(s, &table);
        }
        let bytes = enc.finish();
        // 1000 fair bits = 125 bytes of payload, within coder overhead.
        let payload = bytes.len() as i64 - TERMINATION_BYTES as i64;
        assert!((payload - 125).abs() <= 4, "payload {payload} bytes");
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for &s in &symbols {
            assert_eq!(dec.decode(&table).unwrap(), s);
        }
        dec.finish().unwrap();
    }

    #[test]
    fn large_gaussian_round_trip() {
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let tables: Vec<QuantizedCdfTable> = [0.1, 0.7, 1.5, 4.0, 20.0]
            .iter()
            .map(|&s| gaussian_cdf_table(s, 16, -64, 63, true).unwrap())
            .collect();
        let n = 100_000;
        let symbols: Vec<i32> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.001) {
                    rng.gen_range(64..=255) * if rng.gen_bool(0.5) { -1 } else { 1 }
                } else {
                    rng.gen_range(-64..64)
                }
            })
            .collect();
        let picks: Vec<usize> = (0..n).map(|_| rng.gen_range(0..tables.len())).collect();
        let refs: Vec<&QuantizedCdfTable> = picks.iter().map(|&i| &tables[i]).collect();
        let bytes = rc_encode(&symbols, &refs).unwrap();
        let back = rc_decode(&bytes, &refs).unwrap();
        assert_eq!(back, symbols);
    }

    #[test]
    fn coded_size_tracks_estimated_rate() {
        // Total coded bits stay within 2% + 64 bits of the model's estimate.
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let sigma = 1.3;
        let table = gaussian_cdf_table(sigma, 16, -64, 63, true).unwrap();
        let mut estimate_bits = 0.0;
        let mut enc = RangeEncoder::new();
        let mut count = 0usize;
        while count < 20_000 {
            // Box-Muller standard normal draw.
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            let v = (z * sigma).round() as i32;
            if !(-64..=63).contains(&v) {
                continue;
            }
            let idx = table.symbol_index(v);
            estimate_bits -= (table.count(idx) as f64 / table.total() as f64).log2();
            enc.encode(v, &table);
            count += 1;
        }
        let bytes = enc.finish();
        let actual_bits = ((bytes.len() - TERMINATION_BYTES) * 8) as f64;
        assert!(
            actual_bits <= estimate_bits * 1.02 + 64.0,
            "actual {actual_bits} vs estimate {estimate_bits}"
        );
    }

    #[test]
    fn adaptive_tables_stay_in_lockstep() {
        // AR(1)-style adaptation: each symbol is coded under a table chosen
        // from the previously decoded symbol, so encoder and decoder must
        // derive identical table sequences.
        let mut rng = ChaCha12Rng::seed_from_u64(24);
        let symbols: Vec<i32> = (0..5000).map(|_| rng.gen_range(-10..=10)).collect();
        let sigma_of = |prev: i32| 0.5 + prev.unsigned_abs() as f64 * 0.3;
        let mut enc = RangeEncoder::new();
        let mut prev = 0i32;
        for &s in &symbols {
            let table = gaussian_cdf_table(sigma_of(prev), 16, -16, 15, true).unwrap();
            enc.encode(s, &table);
            prev = s;
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        let mut prev = 0i32;
        for &s in &symbols {
            let table = gaussian_cdf_table(sigma_of(prev), 16, -16, 15, true).unwrap();
            let got = dec.decode(&table).unwrap();
            assert_eq!(got, s);
            prev = got;
        }
        dec.finish().unwrap();
    }

    #[test]
    fn truncated_stream_errors() {
        let table = gaussian_cdf_table(1.0, 16, -8, 7, true).unwrap();
        let mut enc = RangeEncoder::new();
        for v in [-3, 0, 5, 2, -7, 1, 1, 4] {
            enc.encode(v, &table);
        }
        let bytes = enc.finish();
        assert!(RangeDecoder::new(&bytes[..2]).is_err());
        let short = &bytes[..bytes.len() - 1];
        let mut dec = RangeDecoder::new(short).unwrap();
        let mut failed = false;
        for _ in 0..8 {
            if dec.decode(&table).is_err() {
                failed = true;
                break;
            }
        }
        // Either a decode fails outright or the unconsumed-input check does.
        assert!(failed || dec.finish().is_err());
    }

    #[test]
    fn state_traces_match_between_encoder_and_decoder() {
        let table = gaussian_cdf_table(2.0, 16, -16, 15, true).unwrap();
        let symbols = [0, -3, 7, 1, 1, -15, 8, 0, 2, -1];
        let mut enc = RangeEncoder::new();
        let mut enc_trace = Vec::new();
        for &s in &symbols {
            enc.encode(s, &table);
            enc_trace.push(enc.state());
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for (&s, &(elow, erange)) in symbols.iter().zip(&enc_trace) {
            assert_eq!(dec.decode(&table).unwrap(), s);
            let (dlow, drange) = dec.state();
            // Ranges agree exactly; lows agree modulo the bytes already
            // shifted out on the encoder side.
            assert_eq!(erange, drange, "range diverged at symbol {s}");
            let _ = (elow, dlow);
        }
        dec.finish().unwrap();
    }

    #[test]
    fn raw_bits_round_trip() {
        let mut enc = RangeEncoder::new();
        enc.encode_raw_bits(0b1011, 4);
        enc.encode_raw_bits(0xDEAD, 16);
        enc.encode_raw_bits(1, 1);
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        assert_eq!(dec.decode_raw_bits(4).unwrap(), 0b1011);
        assert_eq!(dec.decode_raw_bits(16).unwrap(), 0xDEAD);
        assert_eq!(dec.decode_raw_bits(1).unwrap(), 1);
        dec.finish().unwrap();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn round_trip_random_streams(
            seed in 0u64..1000,
            n in 1usize..400,
            sigma in 0.05f64..30.0,
        ) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let table = gaussian_cdf_table(sigma, 16, -64, 63, true).unwrap();
            let symbols: Vec<i32> = (0..n)
                .map(|_| rng.gen_range(-255..=255))
                .collect();
            let refs: Vec<&QuantizedCdfTable> = symbols.iter().map(|_| &table).collect();
            let bytes = rc_encode(&symbols, &refs).unwrap();
            let back = rc_decode(&bytes, &refs).unwrap();
            prop_assert_eq!(back, symbols);
        }
    }
}
