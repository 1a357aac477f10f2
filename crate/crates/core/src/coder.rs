//! Integer range coder with 16-bit probability resolution.
//!
//! State is a 64-bit range and a 64-bit low word with one carry bit. The
//! range is kept at or above 2^56 by emitting one byte at a time; carries
//! propagate through a pending run of 0xFF bytes. The encoder's first byte
//! is always zero and is not written. The decoder treats up to eight bytes
//! past the end of a segment as zeros, which is what the flush assumes.

use crate::error::{corrupt, invalid, Result};

/// Every static table sums to this.
pub const TOTAL: u32 = 1 << 16;

const TOP: u64 = 1 << 56;
const MAX_PAD: usize = 8;

/// Cumulative frequencies: symbol `s` owns `[cum[s], cum[s + 1])`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTable {
    cum: Vec<u32>,
}

impl CdfTable {
    /// Builds a table from per-symbol frequencies, each at least 1.
    pub fn from_freqs(freqs: &[u32]) -> Result<Self> {
        if freqs.is_empty() || freqs.iter().any(|&f| f == 0) {
            return invalid("every symbol needs a nonzero frequency");
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u64;
        cum.push(0);
        for &f in freqs {
            acc += f as u64;
            if acc > TOTAL as u64 {
                return invalid("frequencies exceed 65536");
            }
            cum.push(acc as u32);
        }
        Ok(CdfTable { cum })
    }

    pub fn symbols(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn total(&self) -> u32 {
        *self.cum.last().unwrap()
    }

    pub fn freq(&self, s: usize) -> u32 {
        self.cum[s + 1] - self.cum[s]
    }

    pub fn start(&self, s: usize) -> u32 {
        self.cum[s]
    }

    pub fn freqs(&self) -> Vec<u32> {
        self.cum.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Probability of `s` as coded.
    pub fn prob(&self, s: usize) -> f64 {
        self.freq(s) as f64 / self.total() as f64
    }

    fn lookup(&self, v: u32) -> usize {
        // largest s with cum[s] <= v
        self.cum.partition_point(|&c| c <= v) - 1
    }
}

/// Apportions 65536 among the symbols of `p` by largest remainder after
/// giving every symbol a count of one. Ties go to the smaller index.
pub fn quantize_pmf(p: &[f64]) -> Result<CdfTable> {
    let n = p.len();
    if n == 0 {
        return invalid("empty distribution");
    }
    if n > TOTAL as usize {
        return invalid(format!("alphabet of {n} symbols exceeds 65536"));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return invalid("distribution has negative or non-finite entries");
    }
    let sum: f64 = p.iter().sum();
    if sum <= 0.0 {
        return invalid("distribution has zero mass");
    }
    let spare = (TOTAL as usize - n) as f64;
    let mut freqs = Vec::with_capacity(n);
    let mut rema = Vec::with_capacity(n);
    let mut used = 0u64;
    for (i, &v) in p.iter().enumerate() {
        let share = v / sum * spare;
        let whole = share.floor();
        freqs.push(1 + whole as u32);
        used += whole as u64;
        rema.push((share - whole, i));
    }
    let left = (spare as u64).saturating_sub(used) as usize;
    rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rema.iter().take(left) {
        freqs[i] += 1;
    }
    CdfTable::from_freqs(&freqs)
}

/// Ideal code length of `symbols` under `tables`, in bits.
pub fn cross_entropy_bits(symbols: &[usize], tables: &[&CdfTable]) -> f64 {
    symbols
        .iter()
        .zip(tables)
        .map(|(&s, t)| -t.prob(s).log2())
        .sum()
}

#[derive(Debug)]
pub struct RangeEncoder {
    low: u128,
    range: u64,
    cache: u8,
    pending: u64,
    skip_first: bool,
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
            range: u64::MAX,
            cache: 0,
            pending: 1,
            skip_first: true,
            out: Vec::new(),
        }
    }

    fn emit(&mut self, b: u8) {
        if self.skip_first {
            self.skip_first = false;
        } else {
            self.out.push(b);
        }
    }

    fn shift_low(&mut self) {
        let carry = (self.low >> 64) as u8;
        let low64 = self.low as u64;
        if low64 < 0xFF << 56 || carry != 0 {
            let mut c = self.cache;
            while self.pending > 0 {
                self.emit(c.wrapping_add(carry));
                c = 0xFF;
                self.pending -= 1;
            }
            self.cache = (low64 >> 56) as u8;
        }
        self.pending += 1;
        self.low = ((low64 << 8) & u64::MAX) as u128;
    }

    /// Codes the interval `[start, start + freq)` out of `total` (at most 2^16).
    pub fn encode(&mut self, start: u32, freq: u32, total: u32) {
        debug_assert!(freq > 0 && start + freq <= total && total <= TOTAL);
        let r = self.range / total as u64;
        self.low += (r * start as u64) as u128;
        self.range = r * freq as u64;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode_symbol(&mut self, s: usize, table: &CdfTable) -> Result<()> {
        if s >= table.symbols() {
            return invalid(format!("symbol {s} outside a {}-symbol table", table.symbols()));
        }
        self.encode(table.start(s), table.freq(s), table.total());
        Ok(())
    }

    pub fn finish(mut self) -> Vec<u8> {
        // Pick the multiple of 2^56 inside [low, low + range); only its top
        // byte needs writing, the decoder supplies the zeros.
        let mask = (TOP - 1) as u128;
        self.low = (self.low + mask) & !mask;
        self.shift_low();
        self.shift_low();
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u64,
    range: u64,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder {
            data,
            pos: 0,
            code: 0,
            range: u64::MAX,
        };
        for _ in 0..8 {
            d.code = (d.code << 8) | d.next_byte()? as u64;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = match self.data.get(self.pos) {
            Some(&b) => b,
            None if self.pos < self.data.len() + MAX_PAD => 0,
            None => return corrupt("range coder segment exhausted"),
        };
        self.pos += 1;
        Ok(b)
    }

    /// Returns the frequency slot of the next symbol; follow with [`Self::consume`].
    pub fn peek(&mut self, total: u32) -> u32 {
        let r = self.range / total as u64;
        ((self.code / r).min(total as u64 - 1)) as u32
    }

    pub fn consume(&mut self, start: u32, freq: u32, total: u32) -> Result<()> {
        let r = self.range / total as u64;
        let off = r * start as u64;
        if off > self.code {
            return corrupt("range coder state out of bounds");
        }
        self.code -= off;
        self.range = r * freq as u64;
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte()? as u64;
        }
        Ok(())
    }

    pub fn decode_symbol(&mut self, table: &CdfTable) -> Result<usize> {
        let v = self.peek(table.total());
        let s = table.lookup(v);
        self.consume(table.start(s), table.freq(s), table.total())?;
        Ok(s)
    }
}

/// Encodes `symbols[i]` under `tables[i]`.
pub fn range_encode(symbols: &[usize], tables: &[&CdfTable]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return invalid("one table per symbol required");
    }
    let mut enc = RangeEncoder::new();
    for (&s, t) in symbols.iter().zip(tables) {
        enc.encode_symbol(s, t)?;
    }
    Ok(enc.finish())
}

pub fn range_decode(data: &[u8], tables: &[&CdfTable]) -> Result<Vec<usize>> {
    if tables.is_empty() {
        return Ok(Vec::new());
    }
    let mut dec = RangeDecoder::new(data)?;
    tables.iter().map(|t| dec.decode_symbol(t)).collect()
}

/// Adaptive byte model: every count starts at one and grows by
/// [`Adaptive::INCREMENT`] per observation; counts halve once their sum
/// passes 2^16.
#[derive(Debug, Clone)]
pub struct Adaptive {
    counts: [u32; 256],
    total: u32,
}

impl Default for Adaptive {
    fn default() -> Self {
        Adaptive {
            counts: [1; 256],
            total: 256,
        }
    }
}

impl Adaptive {
    pub const INCREMENT: u32 = 32;

    fn start(&self, s: usize) -> u32 {
        self.counts[..s].iter().sum()
    }

    /// Current probability of `s`.
    pub fn prob(&self, s: u8) -> f64 {
        self.counts[s as usize] as f64 / self.total as f64
    }

    pub fn update(&mut self, s: u8) {
        self.counts[s as usize] += Self::INCREMENT;
        self.total += Self::INCREMENT;
        if self.total > TOTAL {
            self.total = 0;
            for c in &mut self.counts {
                *c = (*c + 1) / 2;
                self.total += *c;
            }
        }
    }
}

pub fn adaptive_encode(symbols: &[u8]) -> Vec<u8> {
    if symbols.is_empty() {
        return Vec::new();
    }
    let mut m = Adaptive::default();
    let mut enc = RangeEncoder::new();
    for &s in symbols {
        enc.encode(m.start(s as usize), m.counts[s as usize], m.total);
        m.update(s);
    }
    enc.finish()
}

/// Streaming counterpart of [`adaptive_encode`].
#[derive(Debug)]
pub struct AdaptiveDecoder<'a> {
    model: Adaptive,
    dec: RangeDecoder<'a>,
}

impl<'a> AdaptiveDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        Ok(AdaptiveDecoder {
            model: Adaptive::default(),
            dec: RangeDecoder::new(data)?,
        })
    }

    pub fn decode(&mut self) -> Result<u8> {
        let m = &mut self.model;
        let v = self.dec.peek(m.total);
        let mut s = 0usize;
        let mut start = 0u32;
        while start + m.counts[s] <= v {
            start += m.counts[s];
            s += 1;
        }
        self.dec.consume(start, m.counts[s], m.total)?;
        m.update(s as u8);
        Ok(s as u8)
    }
}

pub fn adaptive_decode(data: &[u8], count: usize) -> Result<Vec<u8>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut dec = AdaptiveDecoder::new(data)?;
    (0..count).map(|_| dec.decode()).collect()
}

/// Ideal code length of `symbols` under the adaptive model, in bits.
pub fn adaptive_code_length(symbols: &[u8]) -> f64 {
    let mut m = Adaptive::default();
    symbols
        .iter()
        .map(|&s| {
            let b = -m.prob(s).log2();
            m.update(s);
            b
        })
        .sum()
}
