//! Byte-oriented range coder with 16-bit probability precision.
//!
//! The encoder keeps a 64-bit `low` (carry lands in bit 32) and a 32-bit
//! `range`, renormalising a byte at a time whenever `range < 2^24`. The
//! first cached byte is always zero and is not written; trailing zero bytes
//! are trimmed because the decoder reads zeros past the end of its input.

use crate::error::{Error, Result};

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;
const TOP: u32 = 1 << 24;
/// Trailing zero bytes `finish` may drop.
const FLUSH_TRIM: usize = 4;
/// Bytes a decoder reads past the end of a complete stream: one byte of
/// lookahead plus whatever the flush trimmed.
pub const MAX_TAIL_READ: usize = 1 + FLUSH_TRIM;

/// Frequency table over `len()` symbols whose frequencies sum to [`PROB_TOTAL`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreqTable {
    /// `cum[i]` is the start of symbol `i`; `cum[len]` is `PROB_TOTAL`.
    cum: Vec<u32>,
}

impl FreqTable {
    /// Quantise a probability vector so every symbol keeps a non-zero frequency.
    ///
    /// Each symbol gets `1 + floor(p_i * (T - n))`; the remainder goes to the
    /// most probable symbol (lowest index on ties).
    pub fn from_probs(probs: &[f64]) -> Self {
        let n = probs.len();
        assert!(n >= 1 && (n as u32) < PROB_TOTAL, "unsupported alphabet size {n}");
        let spare = (PROB_TOTAL - n as u32) as f64;
        let mut freqs: Vec<u32> = probs
            .iter()
            .map(|&p| {
                let p = if p.is_finite() { p.clamp(0.0, 1.0) } else { 0.0 };
                1 + (p * spare).floor() as u32
            })
            .collect();
        let total: u64 = freqs.iter().map(|&f| f as u64).sum();
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        if total <= PROB_TOTAL as u64 {
            freqs[best] += PROB_TOTAL - total as u32;
        } else {
            // Only reachable when the input sums above one.
            let mut excess = total - PROB_TOTAL as u64;
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| freqs[b].cmp(&freqs[a]).then(a.cmp(&b)));
            for i in order {
                let take = excess.min((freqs[i] - 1) as u64);
                freqs[i] -= take as u32;
                excess -= take;
                if excess == 0 {
                    break;
                }
            }
        }
        Self::from_freqs(&freqs)
    }

    pub fn from_freqs(freqs: &[u32]) -> Self {
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        cum.push(0);
        for &f in freqs {
            assert!(f > 0, "zero frequency");
            acc += f;
            cum.push(acc);
        }
        assert_eq!(acc, PROB_TOTAL, "frequencies must sum to {PROB_TOTAL}");
        Self { cum }
    }

    pub fn len(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn freq(&self, sym: usize) -> u32 {
        self.cum[sym + 1] - self.cum[sym]
    }

    pub fn start(&self, sym: usize) -> u32 {
        self.cum[sym]
    }

    /// Symbol whose interval contains `target`.
    fn lookup(&self, target: u32) -> usize {
        // partition_point over cum[1..]: first index with cum[i+1] > target
        self.cum[1..].partition_point(|&c| c <= target)
    }

    /// Cost in bits of coding `sym` with this table.
    pub fn cost_bits(&self, sym: usize) -> f64 {
        PROB_BITS as f64 - (self.freq(sym) as f64).log2()
    }
}

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    first: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self { low: 0, range: u32::MAX, cache: 0, cache_size: 1, first: true, out: Vec::new() }
    }

    fn emit(&mut self, byte: u8) {
        if self.first {
            debug_assert_eq!(byte, 0);
            self.first = false;
        } else {
            self.out.push(byte);
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.emit(temp.wrapping_add(carry));
                temp = 0xFF;
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

    /// Code the interval `[start, start + freq)` out of [`PROB_TOTAL`].
    pub fn encode(&mut self, start: u32, freq: u32) {
        debug_assert!(freq > 0 && start + freq <= PROB_TOTAL);
        let r = self.range >> PROB_BITS;
        self.low += r as u64 * start as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode_symbol(&mut self, table: &FreqTable, sym: usize) {
        self.encode(table.start(sym), table.freq(sym));
    }

    /// One equiprobable bit.
    pub fn encode_bit(&mut self, bit: bool) {
        let half = PROB_TOTAL / 2;
        self.encode(if bit { half } else { 0 }, half);
    }

    /// Elias-gamma code of `value + 1` using equiprobable bits.
    pub fn encode_gamma(&mut self, value: u32) {
        let v = value as u64 + 1;
        let nbits = 64 - v.leading_zeros();
        for _ in 1..nbits {
            self.encode_bit(false);
        }
        for i in (0..nbits).rev() {
            self.encode_bit((v >> i) & 1 == 1);
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        // Pick the value in [low, low + range) with the most trailing zero bytes.
        let hi = self.low + self.range as u64;
        for keep in 0..=4u32 {
            let unit = 1u64 << (32 - 8 * keep);
            let v = (self.low + unit - 1) & !(unit - 1);
            if v < hi {
                self.low = v;
                break;
            }
        }
        for _ in 0..5 {
            self.shift_low();
        }
        for _ in 0..FLUSH_TRIM {
            if self.out.last() != Some(&0) {
                break;
            }
            self.out.pop();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    data: &'a [u8],
    pos: usize,
}

/// Zero bytes the decoder may read past the end before the stream is
/// considered corrupt.
const MAX_OVERREAD: usize = 8;

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut d = Self { code: 0, range: u32::MAX, data, pos: 0 };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Bytes consumed so far, counting implicit zeros past the end.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// True once the decoder has consumed far more bytes than exist.
    pub fn overran(&self) -> bool {
        self.pos > self.data.len() + MAX_OVERREAD
    }

    fn target(&self) -> (u32, u32) {
        let r = self.range >> PROB_BITS;
        ((self.code / r).min(PROB_TOTAL - 1), r)
    }

    fn consume(&mut self, r: u32, start: u32, freq: u32) {
        self.code -= r * start;
        self.range = r * freq;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
    }

    pub fn decode_symbol(&mut self, table: &FreqTable) -> Result<usize> {
        let (t, r) = self.target();
        let sym = table.lookup(t);
        if sym >= table.len() {
            return Err(Error::CorruptStream("symbol lookup out of range".into()));
        }
        self.consume(r, table.start(sym), table.freq(sym));
        if self.overran() {
            return Err(Error::CorruptStream("payload truncated".into()));
        }
        Ok(sym)
    }

    pub fn decode_bit(&mut self) -> Result<bool> {
        let (t, r) = self.target();
        let half = PROB_TOTAL / 2;
        let bit = t >= half;
        self.consume(r, if bit { half } else { 0 }, half);
        if self.overran() {
            return Err(Error::CorruptStream("payload truncated".into()));
        }
        Ok(bit)
    }

    pub fn decode_gamma(&mut self) -> Result<u32> {
        let mut zeros = 0;
        while !self.decode_bit()? {
            zeros += 1;
            if zeros > 32 {
                return Err(Error::CorruptStream("escape value too long".into()));
            }
        }
        let mut v: u64 = 1;
        for _ in 0..zeros {
            v = (v << 1) | self.decode_bit()? as u64;
        }
        u32::try_from(v - 1).map_err(|_| Error::CorruptStream("escape value overflow".into()))
    }
}
