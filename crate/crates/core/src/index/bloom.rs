//! The XSet: a Bloom filter over canonical xtag encodings.

use std::f64::consts::LN_2;

use sha2::{Digest, Sha256};

/// Default false-positive target.
pub const DEFAULT_FP_RATE: f64 = 1e-6;
const MIN_BITS: u64 = 64;

/// Optimal (m, k) for `n` elements at false-positive rate `p`:
/// m = ceil(-n ln p / ln^2 2) (at least 64), k = ceil(m/n ln 2).
pub fn optimal_params(n: u64, p: f64) -> (u64, u32) {
    assert!(p > 0.0 && p < 1.0, "false-positive rate must lie in (0, 1)");
    if n == 0 {
        return (MIN_BITS, 1);
    }
    let m = ((-(n as f64) * p.ln()) / (LN_2 * LN_2)).ceil() as u64;
    let m = m.max(MIN_BITS);
    let k = ((m as f64 / n as f64) * LN_2).ceil() as u32;
    (m, k.max(1))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BloomFilter {
    m: u64,
    k: u32,
    words: Vec<u64>,
}

impl BloomFilter {
    pub fn new(n_expected: u64, p_fp: f64) -> Self {
        let (m, k) = optimal_params(n_expected, p_fp);
        Self::with_params(m, k)
    }

    pub fn with_params(m: u64, k: u32) -> Self {
        assert!(m > 0 && k > 0);
        BloomFilter {
            m,
            k,
            words: vec![0; m.div_ceil(64) as usize],
        }
    }

    /// Rebuilds a filter from its serialized bit vector (`ceil(m/8)` bytes, LSB first).
    pub fn from_parts(m: u64, k: u32, bits: &[u8]) -> Option<Self> {
        if m == 0 || k == 0 || bits.len() as u64 != m.div_ceil(8) {
            return None;
        }
        let mut filter = Self::with_params(m, k);
        for (i, chunk) in bits.chunks(8).enumerate() {
            let mut word = [0u8; 8];
            word[..chunk.len()].copy_from_slice(chunk);
            filter.words[i] = u64::from_le_bytes(word);
        }
        // Bits past m must be clear.
        if m % 64 != 0 && filter.words.last().is_some_and(|w| w >> (m % 64) != 0) {
            return None;
        }
        Some(filter)
    }

    pub fn bits(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        out.truncate(self.m.div_ceil(8) as usize);
        out
    }

    pub fn m(&self) -> u64 {
        self.m
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    // Kirsch-Mitzenmacher double hashing over one SHA-256 digest.
    fn positions(&self, elem: &[u8]) -> impl Iterator<Item = u64> {
        let digest = Sha256::digest(elem);
        let h1 = u64::from_le_bytes(digest[..8].try_into().unwrap());
        let h2 = u64::from_le_bytes(digest[8..16].try_into().unwrap()) | 1;
        let m = self.m;
        (0..self.k as u64).map(move |i| h1.wrapping_add(i.wrapping_mul(h2)) % m)
    }

    pub fn insert(&mut self, elem: &[u8]) {
        for pos in self.positions(elem).collect::<Vec<_>>() {
            self.words[(pos / 64) as usize] |= 1 << (pos % 64);
        }
    }

    pub fn contains(&self, elem: &[u8]) -> bool {
        self.positions(elem)
            .all(|pos| self.words[(pos / 64) as usize] & (1 << (pos % 64)) != 0)
    }

    pub fn ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }
}
