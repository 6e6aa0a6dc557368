//! Coincidence identification, accidental monitoring and basis sifting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{detector_to_basis_bit, DetectionEvent, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    /// Coincidences kept for the key, |dt| <= this many ticks.
    pub accept_half_width: u64,
    /// Coincidences fed to the clock servo.
    pub servo_half_width: u64,
    /// Centre of the displaced reference window.
    pub accidental_center: i64,
    pub accidental_half_width: u64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { accept_half_width: 14, servo_half_width: 30, accidental_center: 160, accidental_half_width: 15 }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.accept_half_width > self.servo_half_width {
            return Err(Error::Config("accept window must not exceed the servo window".into()));
        }
        let near = self.accidental_center.unsigned_abs().saturating_sub(self.accidental_half_width);
        if near <= self.servo_half_width {
            return Err(Error::Config("accidental window overlaps the servo window".into()));
        }
        Ok(())
    }

    /// Half-open delta range `[lo, hi)` of the accidental window.
    pub fn accidental_range(&self) -> (i64, i64) {
        let h = self.accidental_half_width as i64;
        (self.accidental_center - h, self.accidental_center + h)
    }

    /// Width of the accidental window in ticks.
    pub fn accidental_width(&self) -> u64 {
        2 * self.accidental_half_width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct CoincidenceMatch {
    pub local_index: usize,
    pub remote_index: usize,
    /// Corrected remote time minus local time, ticks.
    pub delta: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchOutcome {
    /// Pairs with |delta| inside the accept window, by local index.
    pub accepted: Vec<CoincidenceMatch>,
    /// All pairs inside the servo window (a superset of `accepted`).
    pub servo: Vec<CoincidenceMatch>,
    pub unmatched_local: usize,
    pub unmatched_remote: usize,
}

fn check_sorted(ts: &[Timestamp], what: &str) -> Result<()> {
    if ts.windows(2).all(|w| w[0] <= w[1]) {
        Ok(())
    } else {
        Err(Error::contract(format!("{what} times must be sorted")))
    }
}

fn delta(remote: Timestamp, local: Timestamp) -> i64 {
    remote.0 as i64 - local.0 as i64
}

/// Every (local, remote) pair with `lo <= remote - local <= hi`.
fn candidate_pairs(local: &[Timestamp], remote: &[Timestamp], lo: i64, hi: i64) -> Vec<CoincidenceMatch> {
    let mut out = Vec::new();
    let mut start = 0;
    for (ri, &r) in remote.iter().enumerate() {
        while start < local.len() && delta(r, local[start]) > hi {
            start += 1;
        }
        for (li, &l) in local.iter().enumerate().skip(start) {
            let d = delta(r, l);
            if d < lo {
                break;
            }
            out.push(CoincidenceMatch { local_index: li, remote_index: ri, delta: d });
        }
    }
    out
}

/// Greedy nearest-|dt| pairing: candidate pairs inside the servo window are
/// taken in order of (|dt|, local index, remote index) and accepted while
/// both events are still free.
pub fn match_coincidences(local: &[Timestamp], remote: &[Timestamp], w: &WindowConfig) -> Result<MatchOutcome> {
    check_sorted(local, "local")?;
    check_sorted(remote, "remote")?;
    let s = w.servo_half_width as i64;
    let mut cands = candidate_pairs(local, remote, -s, s);
    cands.sort_unstable_by_key(|m| (m.delta.unsigned_abs(), m.local_index, m.remote_index));
    let mut used_l = vec![false; local.len()];
    let mut used_r = vec![false; remote.len()];
    let mut servo = Vec::new();
    for m in cands {
        if !used_l[m.local_index] && !used_r[m.remote_index] {
            used_l[m.local_index] = true;
            used_r[m.remote_index] = true;
            servo.push(m);
        }
    }
    servo.sort_unstable();
    let accepted: Vec<CoincidenceMatch> =
        servo.iter().filter(|m| m.delta.unsigned_abs() <= w.accept_half_width).copied().collect();
    Ok(MatchOutcome {
        unmatched_local: local.len() - accepted.len(),
        unmatched_remote: remote.len() - accepted.len(),
        accepted,
        servo,
    })
}

/// Pairs whose delta falls in the displaced reference window. Every pair
/// counts; no event exclusivity.
pub fn count_accidentals(local: &[Timestamp], remote: &[Timestamp], w: &WindowConfig) -> Result<u64> {
    check_sorted(local, "local")?;
    check_sorted(remote, "remote")?;
    let (lo, hi) = w.accidental_range();
    let mut n = 0u64;
    let mut start = 0;
    for &r in remote {
        while start < local.len() && delta(r, local[start]) >= hi {
            start += 1;
        }
        n += local[start..].iter().take_while(|&&l| delta(r, l) >= lo).count() as u64;
    }
    Ok(n)
}

/// Same-basis coincidences, ordered by remote index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Sifted {
    pub bits: Vec<u8>,
    pub local_indices: Vec<usize>,
    /// Remote indices to announce in COINC_REPLY.
    pub kept_remote: Vec<u32>,
}

/// Keeps the matches where the local basis equals the remote basis flag.
pub fn sift(matches: &[CoincidenceMatch], local: &[DetectionEvent], remote_flags: &[bool]) -> Result<Sifted> {
    let mut kept: Vec<(usize, usize, u8)> = Vec::new();
    for m in matches {
        let ev = local
            .get(m.local_index)
            .ok_or_else(|| Error::contract(format!("local index {} out of range", m.local_index)))?;
        let flag = *remote_flags
            .get(m.remote_index)
            .ok_or_else(|| Error::contract(format!("remote index {} out of range", m.remote_index)))?;
        let (basis, bit) = detector_to_basis_bit(ev.detector)?;
        if basis.flag() == flag {
            kept.push((m.remote_index, m.local_index, bit));
        }
    }
    kept.sort_unstable();
    let kept_remote = kept
        .iter()
        .map(|k| u32::try_from(k.0).map_err(|_| Error::contract("remote index exceeds u32")))
        .collect::<Result<_>>()?;
    Ok(Sifted {
        bits: kept.iter().map(|k| k.2).collect(),
        local_indices: kept.iter().map(|k| k.1).collect(),
        kept_remote,
    })
}

/// The remote side's key bits for the announced indices: its own outcome,
/// inverted to undo the singlet anti-correlation.
pub fn remote_bits(kept: &[u32], events: &[DetectionEvent]) -> Result<Vec<u8>> {
    kept.iter()
        .map(|&i| {
            let ev = events.get(i as usize).ok_or_else(|| Error::protocol(format!("kept index {i} out of range")))?;
            Ok(1 - detector_to_basis_bit(ev.detector)?.1)
        })
        .collect()
}

/// Subtracts a calibrated delay per detector and restores time order.
pub fn equalize(events: &[DetectionEvent], delays: &[i64; 4]) -> Vec<DetectionEvent> {
    let mut out: Vec<DetectionEvent> = events
        .iter()
        .map(|ev| {
            let d = delays.get(ev.detector as usize).copied().unwrap_or(0);
            DetectionEvent { time: Timestamp(ev.time.0.saturating_add_signed(-d)), ..*ev }
        })
        .collect();
    if delays.iter().any(|&d| d != 0) {
        out.sort_unstable();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{basis_bit_to_detector, Basis};
    use proptest::prelude::*;

    fn ts(v: &[u64]) -> Vec<Timestamp> {
        v.iter().map(|&t| Timestamp(t)).collect()
    }

    /// Repeatedly takes the globally nearest free pair.
    fn brute_force(local: &[Timestamp], remote: &[Timestamp], half: i64) -> Vec<CoincidenceMatch> {
        let mut used_l = vec![false; local.len()];
        let mut used_r = vec![false; remote.len()];
        let mut out = Vec::new();
        loop {
            let mut best: Option<(u64, usize, usize)> = None;
            for (i, l) in local.iter().enumerate() {
                for (j, r) in remote.iter().enumerate() {
                    let d = r.0 as i64 - l.0 as i64;
                    if used_l[i] || used_r[j] || d.abs() > half {
                        continue;
                    }
                    let key = (d.unsigned_abs(), i, j);
                    if best.is_none_or(|b| key < b) {
                        best = Some(key);
                    }
                }
            }
            let Some((_, i, j)) = best else { break };
            used_l[i] = true;
            used_r[j] = true;
            out.push(CoincidenceMatch {
                local_index: i,
                remote_index: j,
                delta: remote[j].0 as i64 - local[i].0 as i64,
            });
        }
        out.sort_unstable();
        out
    }

    #[test]
    fn default_windows_are_consistent() {
        let w = WindowConfig::default();
        w.validate().unwrap();
        assert_eq!(w.accidental_range(), (145, 175));
        assert_eq!(w.accidental_width(), 30);
        assert!(WindowConfig { accept_half_width: 40, ..w }.validate().is_err());
        assert!(WindowConfig { accidental_center: 40, ..w }.validate().is_err());
    }

    #[test]
    fn exact_pairs_all_match() {
        let t = ts(&[100, 500, 900, 5000]);
        let out = match_coincidences(&t, &t, &WindowConfig::default()).unwrap();
        assert_eq!(out.accepted.len(), 4);
        assert!(out.accepted.iter().all(|m| m.delta == 0 && m.local_index == m.remote_index));
        assert_eq!(out.unmatched_local, 0);
    }

    #[test]
    fn window_edges() {
        let w = WindowConfig::default();
        // 1.8 ns: outside accept, inside servo.
        let out = match_coincidences(&ts(&[1000]), &ts(&[1000 + 14 + 1]), &w).unwrap();
        assert!(out.accepted.is_empty());
        assert_eq!(out.servo.len(), 1);
        let out = match_coincidences(&ts(&[1000]), &ts(&[1000 - 14]), &w).unwrap();
        assert_eq!(out.accepted.len(), 1);
        let out = match_coincidences(&ts(&[1000]), &ts(&[1031]), &w).unwrap();
        assert!(out.servo.is_empty());
    }

    #[test]
    fn nearest_wins() {
        let out = match_coincidences(&ts(&[100, 110]), &ts(&[108]), &WindowConfig::default()).unwrap();
        assert_eq!(out.accepted, vec![CoincidenceMatch { local_index: 1, remote_index: 0, delta: -2 }]);
    }

    #[test]
    fn unsorted_is_rejected() {
        let w = WindowConfig::default();
        assert!(match_coincidences(&ts(&[5, 1]), &ts(&[1]), &w).is_err());
        assert!(count_accidentals(&ts(&[1]), &ts(&[5, 1]), &w).is_err());
    }

    #[test]
    fn accidental_window_is_half_open() {
        let w = WindowConfig::default();
        assert_eq!(count_accidentals(&ts(&[0]), &[], &w).unwrap(), 0);
        let l = ts(&[1000]);
        let r: Vec<Timestamp> = (1100..1200).map(Timestamp).collect();
        assert_eq!(count_accidentals(&l, &r, &w).unwrap(), 30);
        // No exclusivity: two locals see the same remote event.
        assert_eq!(count_accidentals(&ts(&[1000, 1001]), &ts(&[1160]), &w).unwrap(), 2);
    }

    #[test]
    fn sift_keeps_same_basis() {
        let local: Vec<DetectionEvent> = (0..4).map(|d| DetectionEvent::new(10 * d as u64, d)).collect();
        let matches: Vec<CoincidenceMatch> =
            (0..4).map(|i| CoincidenceMatch { local_index: i, remote_index: 3 - i, delta: 0 }).collect();
        let flags = [true, true, false, false];
        let s = sift(&matches, &local, &flags).unwrap();
        // Remote 3 and 2 are HV, paired with locals 0 and 1 (HV).
        assert_eq!(s.kept_remote, vec![0, 1, 2, 3]);
        assert_eq!(s.local_indices, vec![3, 2, 1, 0]);
        assert_eq!(s.bits, vec![1, 0, 1, 0]);
        let bad = [CoincidenceMatch { local_index: 9, remote_index: 0, delta: 0 }];
        assert!(sift(&bad, &local, &flags).is_err());
    }

    #[test]
    fn remote_bits_are_inverted() {
        let ev = [DetectionEvent::new(1, basis_bit_to_detector(Basis::DA, 1)), DetectionEvent::new(2, 0)];
        assert_eq!(remote_bits(&[0, 1], &ev).unwrap(), vec![0, 1]);
        assert!(remote_bits(&[2], &ev).is_err());
    }

    #[test]
    fn equalize_restores_order() {
        let ev = [DetectionEvent::new(100, 0), DetectionEvent::new(105, 1)];
        let out = equalize(&ev, &[0, 10, 0, 0]);
        assert_eq!(out, vec![DetectionEvent::new(95, 1), DetectionEvent::new(100, 0)]);
    }

    proptest! {
        #[test]
        fn greedy_equals_brute_force(
            mut l in proptest::collection::vec(0u64..2_000, 0..100),
            mut r in proptest::collection::vec(0u64..2_000, 0..100),
        ) {
            l.sort_unstable();
            r.sort_unstable();
            let (l, r) = (ts(&l), ts(&r));
            let w = WindowConfig::default();
            let out = match_coincidences(&l, &r, &w).unwrap();
            prop_assert_eq!(&out.servo, &brute_force(&l, &r, w.servo_half_width as i64));
            let mut seen_l = std::collections::HashSet::new();
            let mut seen_r = std::collections::HashSet::new();
            for m in &out.accepted {
                prop_assert!(m.delta.unsigned_abs() <= w.accept_half_width);
                prop_assert!(seen_l.insert(m.local_index) && seen_r.insert(m.remote_index));
            }
        }
    }
}
