//! Clock synchronization between the two time taggers.
//!
//! Acquisition runs in two tiers. First an FFT cross-correlation of both
//! streams folded onto one epoch at 2.048 us resolution, then a histogram
//! of pairwise differences at 2 ns resolution. A drift search between the
//! tiers removes the smear that a relative frequency error causes over the
//! acquisition span. Once locked, a per-epoch servo tracks offset and drift
//! from the coincidences themselves.
//!
//! Sign convention: a positive offset means the remote clock reads ahead of
//! the local one.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::physim::SideConfig;
use crate::types::{EpochIndex, Timestamp, COARSE_BIN_TICKS, EPOCH_TICKS, FINE_BIN_TICKS};

pub const COARSE_BINS: usize = (EPOCH_TICKS / COARSE_BIN_TICKS) as usize;
pub const SIGNIFICANCE_THRESHOLD: f64 = 6.0;
/// Half range of the fine histogram around the coarse offset.
pub const FINE_HALF_RANGE: i64 = COARSE_BIN_TICKS as i64;
pub const SERVO_GAIN: f64 = 0.5;
pub const MAX_DRIFT: f64 = 1e-4;
/// Relative frequency errors covered by the acquisition search.
pub const DRIFT_SEARCH_RANGE: f64 = 2e-6;

/// Linear map between the remote and the local clock: at remote time `t`,
/// remote minus local equals `offset + drift * (t - reference_epoch.start())`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockModel {
    /// Ticks.
    pub offset: f64,
    pub drift: f64,
    pub reference_epoch: EpochIndex,
}

impl Default for ClockModel {
    fn default() -> Self {
        ClockModel::identity()
    }
}

impl ClockModel {
    pub fn identity() -> Self {
        ClockModel { offset: 0.0, drift: 0.0, reference_epoch: EpochIndex(0) }
    }

    pub fn new(offset: f64, drift: f64, reference_epoch: EpochIndex) -> Result<Self> {
        if !offset.is_finite() || !(drift.abs() < MAX_DRIFT) {
            return Err(Error::contract(format!("implausible clock model: offset {offset}, drift {drift}")));
        }
        Ok(ClockModel { offset, drift, reference_epoch })
    }

    fn reference_ticks(&self) -> f64 {
        self.reference_epoch.start().0 as f64
    }

    /// Remote minus local at remote time `t`.
    pub fn offset_at(&self, t: f64) -> f64 {
        self.offset + self.drift * (t - self.reference_ticks())
    }

    /// Local-frame time of remote time `t`, unrounded.
    pub fn to_local_f64(&self, t: f64) -> f64 {
        t - self.offset_at(t)
    }

    /// The same map expressed against another reference epoch.
    pub fn rebased(&self, reference_epoch: EpochIndex) -> Self {
        ClockModel { offset: self.offset_at(reference_epoch.start().0 as f64), drift: self.drift, reference_epoch }
    }

    /// Exact relation between two simulated clocks, `remote` seen from
    /// `local`, referenced to `reference_epoch` on the remote clock.
    pub fn between(local: &SideConfig, remote: &SideConfig, reference_epoch: EpochIndex) -> Self {
        let (da, oa) = (local.clock_drift, local.clock_offset as f64);
        let (db, ob) = (remote.clock_drift, remote.clock_offset as f64);
        let r = reference_epoch.start().0 as f64;
        let drift = (db - da) / (1.0 + db);
        ClockModel { offset: drift * (r - ob) + ob - oa, drift, reference_epoch }
    }
}

/// Maps a remote timestamp into the local frame, rounding to the nearest
/// tick. The flag is set when the result would be negative and was clamped.
pub fn apply_model(model: &ClockModel, t: Timestamp) -> (Timestamp, bool) {
    let x = model.to_local_f64(t.0 as f64).round();
    if x < 0.0 {
        (Timestamp(0), true)
    } else {
        (Timestamp(x as u64), false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationResult {
    /// Signed peak position in bins; positive when the remote clock is ahead.
    pub peak_bin: i64,
    pub bin_width: u64,
    pub significance: f64,
    /// Centroid-refined offset estimate in ticks.
    pub offset: f64,
}

fn stats(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (n, sum) = xs.clone().fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    let mean = sum / n as f64;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Significance is judged on the sum of two neighbouring bins so that a
/// peak straddling a bin edge is not split in half.
fn significance(h: &[f64], circular: bool) -> (usize, f64) {
    let n = h.len();
    let pairs = if circular { n } else { n - 1 };
    let pair = |k: usize| h[k] + h[(k + 1) % n];
    let (mean, sd) = stats((0..pairs).map(pair));
    let best = (0..pairs).max_by(|&a, &b| pair(a).total_cmp(&pair(b)).then(b.cmp(&a))).unwrap_or(0);
    let peak = if h[(best + 1) % n] > h[best] { (best + 1) % n } else { best };
    let sig = if sd > 0.0 { ((pair(best) - mean) / sd).max(0.0) } else { 0.0 };
    (peak, sig)
}

/// Background-subtracted centroid of bins `k-1..=k+1`, as a bin offset
/// relative to `k`.
fn centroid(h: &[f64], k: usize, background: f64, circular: bool) -> f64 {
    let n = h.len() as i64;
    let (mut w, mut m) = (0.0, 0.0);
    for j in -1i64..=1 {
        let idx = k as i64 + j;
        let idx = if circular {
            idx.rem_euclid(n)
        } else if (0..n).contains(&idx) {
            idx
        } else {
            continue;
        };
        let x = (h[idx as usize] - background).max(0.0);
        w += x;
        m += j as f64 * x;
    }
    if w > 0.0 {
        m / w
    } else {
        0.0
    }
}

fn fold(times: &[Timestamp], h: &mut [Complex<f64>]) {
    h.fill(Complex::new(0.0, 0.0));
    for t in times {
        h[((t.0 % EPOCH_TICKS) / COARSE_BIN_TICKS) as usize].re += 1.0;
    }
}

/// Circular cross-correlation over one epoch, accumulated epoch by epoch:
/// remote events of epoch k are correlated only with local events of the
/// same epoch, so background grows linearly with the data, like the peak.
pub fn coarse_histogram(local: &[Timestamp], remote: &[Timestamp]) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(COARSE_BINS);
    let inv = planner.plan_fft_inverse(COARSE_BINS);
    let mut acc = vec![Complex::new(0.0, 0.0); COARSE_BINS];
    let mut l = vec![Complex::new(0.0, 0.0); COARSE_BINS];
    let mut r = vec![Complex::new(0.0, 0.0); COARSE_BINS];
    for chunk in remote.chunk_by(|a, b| a.epoch() == b.epoch()) {
        let epoch = chunk[0].epoch();
        let a = local.partition_point(|t| t.epoch() < epoch);
        let b = local.partition_point(|t| t.epoch() <= epoch);
        if a == b {
            continue;
        }
        fold(&local[a..b], &mut l);
        fold(chunk, &mut r);
        fwd.process(&mut l);
        fwd.process(&mut r);
        for (c, (x, y)) in acc.iter_mut().zip(l.iter().zip(&r)) {
            *c += x.conj() * y;
        }
    }
    inv.process(&mut acc);
    let scale = COARSE_BINS as f64;
    acc.iter().map(|z| (z.re / scale).round().max(0.0)).collect()
}

/// Coarse tier at 2.048 us resolution. Both streams should cover at least
/// an epoch and the true offset must be well inside half an epoch. Both
/// inputs must be sorted.
pub fn coarse_correlate(local: &[Timestamp], remote: &[Timestamp]) -> Result<CorrelationResult> {
    if local.is_empty() || remote.is_empty() {
        return Err(Error::NoPeak { significance: 0.0 });
    }
    let h = coarse_histogram(local, remote);
    let (k, sig) = significance(&h, true);
    if sig < SIGNIFICANCE_THRESHOLD {
        return Err(Error::NoPeak { significance: sig });
    }
    let mean = h.iter().sum::<f64>() / h.len() as f64;
    let peak_bin = if k >= COARSE_BINS / 2 { k as i64 - COARSE_BINS as i64 } else { k as i64 };
    let offset = (peak_bin as f64 + centroid(&h, k, mean, true)) * COARSE_BIN_TICKS as f64;
    Ok(CorrelationResult { peak_bin, bin_width: COARSE_BIN_TICKS, significance: sig, offset })
}

/// Calls `f(local, remote)` for every pair whose difference `remote - local`
/// lies within `half` ticks of `center`.
fn for_pairs(local: &[Timestamp], remote: &[f64], center: f64, half: f64, mut f: impl FnMut(f64, f64)) {
    let mut lo = 0;
    for &r in remote {
        let from = r - center - half;
        while lo < local.len() && (local[lo].0 as f64) < from {
            lo += 1;
        }
        for l in local[lo..].iter().map(|t| t.0 as f64) {
            if l > r - center + half {
                break;
            }
            f(l, r);
        }
    }
}

fn fine_histogram(local: &[Timestamp], remote: &[f64], center: f64, half: i64, bin: u64) -> Vec<f64> {
    let nbins = (2 * half as u64).div_ceil(bin) as usize;
    let mut h = vec![0.0; nbins];
    for_pairs(local, remote, center, half as f64, |l, r| {
        let d = r - l - center + half as f64;
        if d >= 0.0 {
            let i = (d / bin as f64) as usize;
            if i < nbins {
                h[i] += 1.0;
            }
        }
    });
    h
}

fn fine_from(local: &[Timestamp], remote: &[f64], coarse_offset: f64) -> Result<CorrelationResult> {
    let center = coarse_offset.round();
    let h = fine_histogram(local, remote, center, FINE_HALF_RANGE, FINE_BIN_TICKS);
    if h.iter().all(|&x| x == 0.0) {
        return Err(Error::NoPeak { significance: 0.0 });
    }
    let (k, sig) = significance(&h, false);
    if sig < SIGNIFICANCE_THRESHOLD {
        return Err(Error::NoPeak { significance: sig });
    }
    let mean = h.iter().sum::<f64>() / h.len() as f64;
    let zero = (FINE_HALF_RANGE as u64 / FINE_BIN_TICKS) as i64;
    let peak_bin = k as i64 - zero;
    let w = FINE_BIN_TICKS as f64;
    let offset = center + (peak_bin as f64 + centroid(&h, k, mean, false)) * w + w / 2.0;
    Ok(CorrelationResult { peak_bin, bin_width: FINE_BIN_TICKS, significance: sig, offset })
}

/// Fine tier at 2 ns resolution around a coarse estimate good to one
/// coarse bin. `offset` in the result is the total refined offset.
pub fn fine_correlate(local: &[Timestamp], remote: &[Timestamp], coarse_offset: f64) -> Result<CorrelationResult> {
    let r: Vec<f64> = remote.iter().map(|t| t.0 as f64).collect();
    fine_from(local, &r, coarse_offset)
}

/// Best relative drift (and the offset it implies at `t0`) found by a
/// two-stage grid search over pair differences.
fn drift_search(local: &[Timestamp], remote: &[Timestamp], coarse_offset: f64, t0: f64) -> (f64, f64) {
    let (Some(first), Some(last)) = (remote.first(), remote.last()) else {
        return (0.0, coarse_offset);
    };
    let span = ((first.0 as f64 - t0).abs()).max((last.0 as f64 - t0).abs()).max(1.0);
    let half = COARSE_BIN_TICKS as f64 + DRIFT_SEARCH_RANGE * span;
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    let rf: Vec<f64> = remote.iter().map(|t| t.0 as f64).collect();
    for_pairs(local, &rf, coarse_offset, half, |l, r| pairs.push((r - l - coarse_offset, r - t0)));

    // Returns (score, offset correction) of the best bin for drift `d`.
    let score = |d: f64, bin: f64, hist: &mut Vec<u32>| {
        let n = (2.0 * half / bin).ceil() as usize + 2;
        hist.clear();
        hist.resize(n, 0);
        for &(dt, x) in &pairs {
            let i = ((dt - d * x + half) / bin).floor();
            if i >= 0.0 && (i as usize) < n {
                hist[i as usize] += 1;
            }
        }
        let (best, s) = (0..n - 1)
            .map(|i| (i, hist[i] + hist[i + 1]))
            .max_by_key(|&(i, s)| (s, std::cmp::Reverse(i)))
            .unwrap_or((0, 0));
        (s, (best as f64 + 1.0) * bin - half)
    };
    let mut hist = Vec::new();
    let mut search = |center: f64, reach: f64, step: f64, bin: f64| {
        let steps = (reach / step).ceil() as i64;
        let mut best = (0u32, center, 0.0);
        for i in -steps..=steps {
            let d = center + i as f64 * step;
            let (s, off) = score(d, bin, &mut hist);
            if s > best.0 || (s == best.0 && d.abs() < best.1.abs()) {
                best = (s, d, off);
            }
        }
        (best.1, best.2)
    };
    let coarse_bin = 256.0;
    let (d1, _) = search(0.0, DRIFT_SEARCH_RANGE, coarse_bin / span, coarse_bin);
    let (d2, off) = search(d1, 2.0 * coarse_bin / span, 8.0 / span, FINE_BIN_TICKS as f64);
    (d2, coarse_offset + off)
}

/// Outcome of a full acquisition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Acquisition {
    pub model: ClockModel,
    pub coarse: CorrelationResult,
    pub fine: CorrelationResult,
}

/// Coarse correlation, drift search and fine correlation in sequence.
/// The returned model is referenced to `reference`, which should lie inside
/// the span covered by `remote`.
pub fn acquire(local: &[Timestamp], remote: &[Timestamp], reference: EpochIndex) -> Result<Acquisition> {
    let coarse = coarse_correlate(local, remote)?;
    let t0 = reference.start().0 as f64;
    let (drift, offset0) = drift_search(local, remote, coarse.offset, t0);
    let straightened: Vec<f64> = remote.iter().map(|t| t.0 as f64 - drift * (t.0 as f64 - t0)).collect();
    let fine = fine_from(local, &straightened, offset0)?;
    let model = ClockModel::new(fine.offset, drift, reference)?;
    Ok(Acquisition { model, coarse, fine })
}

/// Result of one servo step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServoUpdate {
    pub model: ClockModel,
    /// No samples were available; the model is unchanged.
    pub starved: bool,
    /// Fitted residual offset at the new reference, ticks.
    pub residual: f64,
}

/// Fits `dt = a + b (t - t_mean)` to one epoch's residuals (remote time,
/// corrected remote minus local) and moves the model reference to the next
/// epoch. The offset is corrected in full at the new reference; the drift
/// correction is damped by [`SERVO_GAIN`].
pub fn servo_update(model: &ClockModel, samples: &[(Timestamp, f64)]) -> ServoUpdate {
    let Some(last) = samples.last() else {
        return ServoUpdate { model: *model, starved: true, residual: 0.0 };
    };
    let n = samples.len() as f64;
    let tm = samples.iter().map(|s| s.0 .0 as f64).sum::<f64>() / n;
    let dm = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let (sxy, sxx) = samples.iter().fold((0.0, 0.0), |(sxy, sxx), s| {
        let x = s.0 .0 as f64 - tm;
        (sxy + x * (s.1 - dm), sxx + x * x)
    });
    // A slope needs a lever arm of at least a millisecond.
    let b = if samples.len() >= 3 && sxx > n * 8e6f64.powi(2) { sxy / sxx } else { 0.0 };
    let next = last.0.epoch().next();
    let t_next = next.start().0 as f64;
    let residual = dm + b * (t_next - tm);
    let mut m = model.rebased(next);
    m.offset += residual;
    let drift = m.drift + SERVO_GAIN * b;
    if drift.abs() < MAX_DRIFT {
        m.drift = drift;
    }
    ServoUpdate { model: m, starved: false, residual }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp, Normal};

    /// Local Poisson stream plus a remote stream holding a thinned copy of
    /// it shifted by `offset` (and scaled by `drift`), with extra noise.
    #[allow(clippy::too_many_arguments)]
    fn correlated(
        rate_l: f64,
        pairs: f64,
        noise_r: f64,
        secs: f64,
        offset: f64,
        drift: f64,
        jitter: f64,
        seed: u64,
    ) -> (Vec<Timestamp>, Vec<Timestamp>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let span = secs * 8e9;
        let base = 2e8;
        let mut l = Vec::new();
        let mut r = Vec::new();
        let gap = Exp::new(rate_l / 8e9).unwrap();
        let j = Normal::new(0.0, jitter.max(1e-9)).unwrap();
        let mut t = base + gap.sample(&mut rng);
        while t < base + span {
            l.push(t.round() as u64);
            if rng.random::<f64>() < pairs / rate_l {
                let x = t + offset + drift * t + j.sample(&mut rng);
                r.push(x.round() as u64);
            }
            t += gap.sample(&mut rng);
        }
        let ng = Exp::new(noise_r / 8e9).unwrap();
        let mut t = base + ng.sample(&mut rng);
        while t < base + span {
            r.push((t + offset).round() as u64);
            t += ng.sample(&mut rng);
        }
        l.sort_unstable();
        l.dedup();
        r.sort_unstable();
        r.dedup();
        (l.into_iter().map(Timestamp).collect(), r.into_iter().map(Timestamp).collect())
    }

    #[test]
    fn coarse_recovers_shift() {
        let (l, r) = correlated(50_000.0, 2_000.0, 10_000.0, 0.6, 5e-3 * 8e9, 0.0, 0.0, 1);
        let c = coarse_correlate(&l, &r).unwrap();
        assert!((c.peak_bin - 2441).abs() <= 1, "{c:?}");
        assert!((c.offset - 4e7).abs() < COARSE_BIN_TICKS as f64);
    }

    #[test]
    fn coarse_zero_shift() {
        let (l, r) = correlated(50_000.0, 2_000.0, 10_000.0, 0.6, 0.0, 0.0, 0.0, 2);
        assert_eq!(coarse_correlate(&l, &r).unwrap().peak_bin, 0);
    }

    #[test]
    fn coarse_negative_shift() {
        let (l, r) = correlated(50_000.0, 2_000.0, 10_000.0, 0.6, -77e-3 * 8e9, 0.0, 0.0, 3);
        let c = coarse_correlate(&l, &r).unwrap();
        assert!((c.offset + 77e-3 * 8e9).abs() < COARSE_BIN_TICKS as f64, "{c:?}");
    }

    #[test]
    fn coarse_rejects_independent_streams() {
        let (l, _) = correlated(50_000.0, 0.0, 0.0, 0.6, 0.0, 0.0, 0.0, 4);
        let (_, r) = correlated(10.0, 0.0, 10_000.0, 0.6, 0.0, 0.0, 0.0, 5);
        assert!(matches!(coarse_correlate(&l, &r), Err(Error::NoPeak { .. })));
    }

    #[test]
    fn coarse_is_shift_equivariant() {
        let (l, r) = correlated(50_000.0, 2_000.0, 10_000.0, 0.6, 3e6, 0.0, 0.0, 6);
        let base = coarse_correlate(&l, &r).unwrap().peak_bin;
        for k in [1i64, 17, 300] {
            let shifted: Vec<Timestamp> = r.iter().map(|t| Timestamp(t.0 + k as u64 * COARSE_BIN_TICKS)).collect();
            assert_eq!(coarse_correlate(&l, &shifted).unwrap().peak_bin, base + k);
        }
    }

    #[test]
    fn fine_recovers_sub_bin_offset() {
        let off = 5e-3 * 8e9 + 37.0 * 8.0;
        let (l, r) = correlated(50_000.0, 2_000.0, 10_000.0, 0.6, off, 0.0, 5.0, 7);
        let c = coarse_correlate(&l, &r).unwrap();
        let f = fine_correlate(&l, &r, c.offset).unwrap();
        assert!((f.offset - off).abs() <= 16.0, "{f:?}");
    }

    #[test]
    fn fine_zero_jitter_single_bin() {
        let (l, r) = correlated(20_000.0, 2_000.0, 0.0, 0.3, 1000.0, 0.0, 0.0, 8);
        let r_only_pairs = r.clone();
        let center = 0.0;
        let h = fine_histogram(
            &l,
            &r_only_pairs.iter().map(|t| t.0 as f64).collect::<Vec<_>>(),
            center,
            FINE_HALF_RANGE,
            FINE_BIN_TICKS,
        );
        let zero = (FINE_HALF_RANGE as u64 / FINE_BIN_TICKS) as usize;
        let peak = zero + (1000 / FINE_BIN_TICKS) as usize;
        // Every true pair sits in one bin; the rest is accidental background.
        assert!(h[peak] >= r.len() as f64);
    }

    #[test]
    fn acquire_with_drift() {
        let off = -42e-3 * 8e9 + 123.0;
        let drift = 7e-7;
        let (l, r) = correlated(60_000.0, 1_500.0, 10_000.0, 1.0, off, drift, 5.0, 9);
        let reference = EpochIndex(0);
        let a = acquire(&l, &r, reference).unwrap();
        assert!((a.model.drift - drift).abs() < 1e-8, "{:?}", a.model);
        // Truth: remote - local = off + drift * local.
        let mid = 0.5 * (r[0].0 as f64 + r[r.len() - 1].0 as f64);
        let truth = off + drift * (mid - off) / (1.0 + drift);
        assert!((a.model.offset_at(mid) - truth).abs() < 16.0, "{} vs {truth}", a.model.offset_at(mid));
    }

    #[test]
    fn apply_model_examples() {
        let id = ClockModel::identity();
        assert_eq!(apply_model(&id, Timestamp(12345)), (Timestamp(12345), false));
        let m = ClockModel::new(8.0, 0.0, EpochIndex(0)).unwrap();
        assert_eq!(apply_model(&m, Timestamp(100)), (Timestamp(92), false));
        assert_eq!(apply_model(&m, Timestamp(3)), (Timestamp(0), true));
        assert!(ClockModel::new(0.0, 2e-4, EpochIndex(0)).is_err());
    }

    #[test]
    fn between_matches_simulated_clocks() {
        let a = SideConfig { clock_offset: 1000, clock_drift: -2e-7, ..SideConfig::ideal() };
        let b = SideConfig { clock_offset: 8_000_000, clock_drift: 3e-7, ..SideConfig::ideal() };
        let m = ClockModel::between(&a, &b, EpochIndex(2));
        for t in [0.0, 1e9, 3e10] {
            let (tl, tr) = (a.to_local(t), b.to_local(t));
            assert!((m.to_local_f64(tr) - tl).abs() < 1e-3);
        }
    }

    #[test]
    fn servo_zero_residuals_keep_model() {
        let m = ClockModel::new(100.0, 1e-7, EpochIndex(0)).unwrap();
        let samples: Vec<(Timestamp, f64)> = (0..100).map(|i| (Timestamp(i * 40_000_000), 0.0)).collect();
        let u = servo_update(&m, &samples);
        assert!(!u.starved);
        assert_eq!(u.model.reference_epoch, EpochIndex(1));
        assert!((u.model.drift - 1e-7).abs() < 1e-15);
        let t = 6e9;
        assert!((u.model.offset_at(t) - m.offset_at(t)).abs() < 1e-6);
    }

    #[test]
    fn servo_starvation() {
        let m = ClockModel::new(5.0, 0.0, EpochIndex(3)).unwrap();
        let u = servo_update(&m, &[]);
        assert!(u.starved);
        assert_eq!(u.model, m);
    }

    #[test]
    fn servo_tracks_drift() {
        // Truth: remote - local = 50 + 1e-7 * t. Start from a model as
        // acquisition leaves it: a few ticks and a few 1e-9 off.
        let truth = |t: f64| 50.0 + 1e-7 * t;
        let mut m = ClockModel::new(56.0, 1.04e-7, EpochIndex(0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 4.0).unwrap();
        let mut residuals = Vec::new();
        for epoch in 0..10u64 {
            let start = epoch * EPOCH_TICKS;
            let mut samples = Vec::new();
            for i in 0..1_000u64 {
                let t = start + i * (EPOCH_TICKS / 1_000);
                let dt = truth(t as f64) - m.offset_at(t as f64) + noise.sample(&mut rng);
                if dt.abs() < 30.0 {
                    samples.push((Timestamp(t), dt));
                }
                if epoch == 9 {
                    residuals.push((truth(t as f64) - m.offset_at(t as f64)).abs());
                }
            }
            m = servo_update(&m, &samples).model;
        }
        residuals.sort_by(f64::total_cmp);
        assert!(residuals[residuals.len() / 2] < 8.0, "median {}", residuals[residuals.len() / 2]);
        assert!((m.drift - 1e-7).abs() < 2e-10, "{m:?}");
    }
}
