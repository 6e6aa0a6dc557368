//! Privacy amplification: the eavesdropper-knowledge bound, final key
//! length, seeded Toeplitz hashing over GF(2) and final-key digests.

use crate::error::{Error, Result};

/// Fraction of the corrected key an eavesdropper may know when every
/// observed error is attributed to an attack:
/// `0.5 * [(1+z) log2(1+z) + (1-z) log2(1-z)]` with `z = 2 sqrt(eta (1-eta))`.
pub fn eve_fraction(eta: f64) -> Result<f64> {
    if !(0.0..=0.5).contains(&eta) {
        return Err(Error::OutOfDomain(eta));
    }
    let z = (2.0 * (eta * (1.0 - eta)).sqrt()).min(1.0);
    let plus = (1.0 + z) * z.ln_1p();
    let minus = if z < 1.0 { (1.0 - z) * (-z).ln_1p() } else { 0.0 };
    Ok((0.5 * (plus + minus) / std::f64::consts::LN_2).clamp(0.0, 1.0))
}

/// Budget of one cluster: `m = r - ceil(e) - c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PaBudget {
    pub r: usize,
    pub eta: f64,
    /// Eavesdropper knowledge in bits, already rounded up.
    pub e: usize,
    pub c: usize,
    /// Final length; `None` when the cluster must be discarded.
    pub m: Option<usize>,
}

impl PaBudget {
    pub fn new(r: usize, eta: f64, c: usize) -> Result<Self> {
        let e = (r as f64 * eve_fraction(eta)?).ceil() as usize;
        let m = r.checked_sub(e).and_then(|x| x.checked_sub(c)).filter(|&m| m > 0);
        Ok(PaBudget { r, eta, e, c, m })
    }
}

/// Final key length for `r` corrected bits with error fraction `eta` and `c`
/// disclosed parities; `None` signals a discarded cluster.
pub fn final_length(r: usize, eta: f64, c: usize) -> Result<Option<usize>> {
    if r == 0 {
        return Err(Error::contract("cluster length must be positive"));
    }
    Ok(PaBudget::new(r, eta, c)?.m)
}

/// SplitMix64 generator; the public seed expansion for hashing and shared
/// permutations.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform index below `n` (multiply-high reduction).
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }
}

/// Bit stream of a seed: successive SplitMix64 words, each consumed most
/// significant bit first.
pub fn expand_seed(seed: u64) -> impl Iterator<Item = u8> {
    let mut g = SplitMix64::new(seed);
    std::iter::from_fn(move || Some(g.next_u64())).flat_map(|w| (0..64).rev().map(move |i| ((w >> i) & 1) as u8))
}

/// First `n` seed bits packed little-endian by bit index: bit `k` of the
/// stream lands in word `k / 64`, bit `k % 64`. One extra zero word is
/// appended so unaligned 64-bit windows can always be read.
fn seed_words(seed: u64, n: usize) -> Vec<u64> {
    let mut g = SplitMix64::new(seed);
    let words = n.div_ceil(64);
    let mut out = Vec::with_capacity(words + 1);
    for _ in 0..words {
        // MSB-first consumption means stream bit b of a word is bit 63-b.
        out.push(g.next_u64().reverse_bits());
    }
    if !n.is_multiple_of(64) {
        let last = out.last_mut().expect("at least one word");
        *last &= (1u64 << (n % 64)) - 1;
    }
    out.push(0);
    out
}

fn window(words: &[u64], pos: usize) -> u64 {
    let (q, sh) = (pos / 64, pos % 64);
    if sh == 0 {
        words[q]
    } else {
        (words[q] >> sh) | (words[q + 1] << (64 - sh))
    }
}

/// Compresses `bits` (one bit per byte) to `m` bits with the Toeplitz matrix
/// `T[i][j] = s[i - j + r - 1]`, where `s` is the first `m + r - 1` bits of
/// [`expand_seed`].
pub fn toeplitz_compress(bits: &[u8], seed: u64, m: usize) -> Result<Vec<u8>> {
    let r = bits.len();
    if m > r {
        return Err(Error::contract(format!("output length {m} exceeds input length {r}")));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let s = seed_words(seed, m + r - 1);
    // y[l] = x[r - 1 - l] turns each row into an aligned dot product with a
    // sliding window of s.
    let mut y = vec![0u64; r.div_ceil(64)];
    for (j, &b) in bits.iter().enumerate() {
        if b & 1 == 1 {
            let l = r - 1 - j;
            y[l / 64] |= 1 << (l % 64);
        }
    }
    let out = (0..m)
        .map(|i| {
            let acc = y.iter().enumerate().fold(0u64, |acc, (w, &yw)| acc ^ (window(&s, i + 64 * w) & yw));
            (acc.count_ones() & 1) as u8
        })
        .collect();
    Ok(out)
}

/// 64-bit FNV-1a digest of a final key (length prefix plus packed bits).
pub fn key_digest(bits: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let len = (bits.len() as u64).to_le_bytes();
    for byte in len.iter().chain(crate::types::pack_bits(bits).iter()) {
        h ^= *byte as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Keep/drop decision after exchanging digests.
pub fn key_verify(local: &[u8], remote_digest: u64) -> bool {
    key_digest(local) == remote_digest
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eve_fraction_spot_values() {
        assert_eq!(eve_fraction(0.0).unwrap(), 0.0);
        assert!((eve_fraction(0.5).unwrap() - 1.0).abs() < 1e-12);
        // 50-digit reference evaluation.
        assert!((eve_fraction(0.054).unwrap() - 0.152_878_873_319_311_53).abs() < 1e-12);
        assert!((eve_fraction(1e-6).unwrap() - 2.885_389_119_980_463_5e-6).abs() < 1e-16);
        assert!(matches!(eve_fraction(0.51), Err(Error::OutOfDomain(_))));
        assert!(eve_fraction(-0.1).is_err());
        assert!(eve_fraction(f64::NAN).is_err());
    }

    #[test]
    fn final_length_examples() {
        assert_eq!(final_length(5000, 0.0, 0).unwrap(), Some(5000));
        let b = PaBudget::new(5000, 0.054, 1700).unwrap();
        assert_eq!(b.e, 765);
        assert_eq!(b.m, Some(2535));
        assert_eq!(final_length(5000, 0.054, 4500).unwrap(), None);
        assert_eq!(final_length(5000, 0.0, 5000).unwrap(), None);
        assert!(final_length(5000, 0.7, 0).is_err());
    }

    #[test]
    fn splitmix_reference_words() {
        let mut g = SplitMix64::new(0);
        assert_eq!(g.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(g.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        let first: Vec<u8> = expand_seed(0).take(8).collect();
        assert_eq!(first, vec![1, 1, 1, 0, 0, 0, 1, 0]);
    }

    #[test]
    fn seed_avalanche() {
        let mut total = 0u64;
        let n = 4096u64;
        let mut g = SplitMix64::new(99);
        for _ in 0..n {
            let s = g.next_u64();
            let bit = g.below(64);
            let a = SplitMix64::new(s).next_u64();
            let b = SplitMix64::new(s ^ (1 << bit)).next_u64();
            total += (a ^ b).count_ones() as u64;
        }
        let mean = total as f64 / n as f64;
        // Binomial(64, 1/2) mean 32, sd 4 -> sd of mean 4/64.
        assert!((mean - 32.0).abs() < 5.0 * 4.0 / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn toeplitz_small_cases() {
        assert!(toeplitz_compress(&[1, 0, 1], 3, 0).unwrap().is_empty());
        assert!(toeplitz_compress(&[1, 0], 3, 3).is_err());
        // 1x1: T = [s0]; find a seed whose first bit is 1.
        let seed = (0..).find(|&s| expand_seed(s).next() == Some(1)).unwrap();
        assert_eq!(toeplitz_compress(&[1], seed, 1).unwrap(), vec![1]);
        assert_eq!(toeplitz_compress(&[0], seed, 1).unwrap(), vec![0]);
    }

    #[test]
    fn digest_detects_single_flip() {
        let a = vec![1u8, 0, 1, 1, 0, 1, 0, 0, 1];
        let mut b = a.clone();
        b[4] ^= 1;
        assert!(key_verify(&a, key_digest(&a)));
        assert!(!key_verify(&b, key_digest(&a)));
        assert_ne!(key_digest(&a[..8]), key_digest(&[&a[..8], &[0]].concat()));
    }
}
