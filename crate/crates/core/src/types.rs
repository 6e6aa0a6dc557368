//! Shared vocabulary: tick arithmetic, detection events, basis conventions and
//! key buffers.

use std::fmt;

use crate::error::{Error, Result};

/// Ticks per nanosecond (one tick is 125 ps).
pub const TICKS_PER_NS: u64 = 8;
/// Ticks per second.
pub const TICKS_PER_SEC: u64 = 8_000_000_000;
/// Coarse correlation bin, 2.048 us.
pub const COARSE_BIN_TICKS: u64 = 1 << 14;
/// Fine correlation bin, 2 ns.
pub const FINE_BIN_TICKS: u64 = 16;
/// One timing epoch, 2^29 ns.
pub const EPOCH_TICKS: u64 = 1 << 32;
pub const EPOCH_SHIFT: u32 = 32;

/// A photodetection instant in 125 ps ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub fn ticks(self) -> u64 {
        self.0
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        Timestamp((secs * TICKS_PER_SEC as f64).round().max(0.0) as u64)
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / TICKS_PER_SEC as f64
    }

    pub fn epoch(self) -> EpochIndex {
        epoch_of(self)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}t", self.0)
    }
}

/// Index of a 2^32-tick timing epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct EpochIndex(pub u32);

impl EpochIndex {
    pub fn start(self) -> Timestamp {
        Timestamp((self.0 as u64) << EPOCH_SHIFT)
    }

    pub fn next(self) -> EpochIndex {
        EpochIndex(self.0 + 1)
    }
}

pub fn epoch_of(t: Timestamp) -> EpochIndex {
    EpochIndex((t.0 >> EPOCH_SHIFT) as u32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Basis {
    /// Horizontal / vertical.
    HV,
    /// Diagonal, +45 / -45.
    DA,
}

impl Basis {
    pub fn flag(self) -> bool {
        matches!(self, Basis::DA)
    }

    pub fn from_flag(flag: bool) -> Self {
        if flag {
            Basis::DA
        } else {
            Basis::HV
        }
    }
}

/// One avalanche on one of the four detectors of a polarization analyzer.
///
/// Ordering is by time, then detector index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DetectionEvent {
    pub time: Timestamp,
    pub detector: u8,
}

impl DetectionEvent {
    pub fn new(ticks: u64, detector: u8) -> Self {
        DetectionEvent { time: Timestamp(ticks), detector }
    }

    pub fn basis_bit(&self) -> Result<(Basis, u8)> {
        detector_to_basis_bit(self.detector)
    }
}

/// Detector wiring shared by both parties and the simulator:
/// 0 -> (HV, 0), 1 -> (HV, 1), 2 -> (DA, 0), 3 -> (DA, 1).
pub fn detector_to_basis_bit(detector: u8) -> Result<(Basis, u8)> {
    match detector {
        0 => Ok((Basis::HV, 0)),
        1 => Ok((Basis::HV, 1)),
        2 => Ok((Basis::DA, 0)),
        3 => Ok((Basis::DA, 1)),
        d => Err(Error::InvalidDetector(d)),
    }
}

pub fn basis_bit_to_detector(basis: Basis, bit: u8) -> u8 {
    match basis {
        Basis::HV => bit & 1,
        Basis::DA => 2 + (bit & 1),
    }
}

/// True when `events` is non-decreasing in (time, detector).
pub fn is_sorted(events: &[DetectionEvent]) -> bool {
    events.windows(2).all(|w| w[0] <= w[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyStage {
    Sifted,
    Corrected,
    Final,
}

/// A key bit string plus the bookkeeping privacy amplification needs.
///
/// Bits are stored one per byte (0 or 1).
#[derive(Debug, Clone, PartialEq)]
pub struct KeyBuffer {
    pub bits: Vec<u8>,
    pub stage: KeyStage,
    /// Parity bits disclosed while reconciling this buffer.
    pub disclosed: usize,
    /// Observed error fraction.
    pub qber: f64,
}

impl KeyBuffer {
    pub fn sifted(bits: Vec<u8>) -> Self {
        KeyBuffer { bits, stage: KeyStage::Sifted, disclosed: 0, qber: 0.0 }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Packs bits MSB-first into bytes; the final byte is zero padded.
    pub fn to_packed(&self) -> Vec<u8> {
        pack_bits(&self.bits)
    }
}

pub fn pack_bits(bits: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b & 1 == 1 {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], n: usize) -> Vec<u8> {
    (0..n).map(|i| (bytes[i / 8] >> (7 - i % 8)) & 1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_identities() {
        assert_eq!(TICKS_PER_NS, 8);
        assert_eq!(COARSE_BIN_TICKS, 2048 * TICKS_PER_NS);
        assert_eq!(FINE_BIN_TICKS, 2 * TICKS_PER_NS);
        assert_eq!(EPOCH_TICKS, (1u64 << 29) * TICKS_PER_NS);
        assert_eq!(TICKS_PER_SEC, 1_000_000_000 * TICKS_PER_NS);
    }

    #[test]
    fn detector_table() {
        assert_eq!(detector_to_basis_bit(0).unwrap(), (Basis::HV, 0));
        assert_eq!(detector_to_basis_bit(1).unwrap(), (Basis::HV, 1));
        assert_eq!(detector_to_basis_bit(2).unwrap(), (Basis::DA, 0));
        assert_eq!(detector_to_basis_bit(3).unwrap(), (Basis::DA, 1));
        assert!(matches!(detector_to_basis_bit(4), Err(Error::InvalidDetector(4))));
    }

    #[test]
    fn detector_table_is_bijective() {
        let mut seen = std::collections::HashSet::new();
        for d in 0..4u8 {
            let (b, bit) = detector_to_basis_bit(d).unwrap();
            assert!(seen.insert((b, bit)));
            assert_eq!(basis_bit_to_detector(b, bit), d);
        }
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn epoch_examples() {
        assert_eq!(epoch_of(Timestamp(0)), EpochIndex(0));
        assert_eq!(epoch_of(Timestamp(1 << 32)), EpochIndex(1));
        assert_eq!(epoch_of(Timestamp((1 << 33) - 1)), EpochIndex(1));
        assert_eq!(EpochIndex(3).start(), Timestamp(3 << 32));
    }

    #[test]
    fn pack_roundtrip() {
        let bits = vec![1, 0, 1, 1, 0, 0, 0, 1, 1, 1];
        let packed = pack_bits(&bits);
        assert_eq!(packed, vec![0b1011_0001, 0b1100_0000]);
        assert_eq!(unpack_bits(&packed, bits.len()), bits);
    }

    proptest::proptest! {
        #[test]
        fn epoch_is_monotone(a in proptest::num::u64::ANY, b in proptest::num::u64::ANY) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            proptest::prop_assert!(epoch_of(Timestamp(lo)) <= epoch_of(Timestamp(hi)));
        }
    }
}
