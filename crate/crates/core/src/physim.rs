//! Timestamp-level simulation of an entangled-pair link: a cw-pumped pair
//! source with singlet polarization correlations, two passive-basis-choice
//! detection units with four detectors each, dark counts, timing jitter,
//! detector delays, dead time and free-running clocks.

use std::io::{self, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{basis_bit_to_detector, Basis, DetectionEvent, Timestamp, TICKS_PER_SEC};

/// Per-side jitter that yields a 1.4 ns FWHM coincidence peak when both
/// sides contribute equally: 1.4 ns / (2.355 * sqrt 2), in ticks.
pub const DEFAULT_JITTER_SIGMA_TICKS: f64 = 1.4 * 8.0 / (2.354_820_045 * std::f64::consts::SQRT_2);

/// Jitter draws are clamped to this many standard deviations so that the
/// streaming simulator can release events in order.
const JITTER_CLAMP_SIGMAS: f64 = 8.0;

/// True-time span simulated per streaming slice (2^28 ticks, about 34 ms).
const SLICE_TICKS: f64 = (1u64 << 28) as f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    /// Emitted pairs per second.
    pub pair_rate: f64,
    pub visibility_hv: f64,
    pub visibility_da: f64,
    /// Seconds of simulated time.
    pub duration: f64,
    pub rng_seed: u64,
    /// Linear visibility loss reached at the end of the session (0 = off).
    pub visibility_drop: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            // 24 000 coincidences/s at 22 % overall efficiency per arm.
            pair_rate: 24_000.0 / (0.22 * 0.22),
            visibility_hv: 0.98,
            visibility_da: 0.92,
            duration: 10.0,
            rng_seed: 1,
            visibility_drop: 0.0,
        }
    }
}

impl SourceConfig {
    pub fn validate(&self) -> Result<()> {
        let vis_ok = |v: f64| (0.0..=1.0).contains(&v);
        if !vis_ok(self.visibility_hv) || !vis_ok(self.visibility_da) {
            return Err(Error::Config("visibility must lie in [0, 1]".into()));
        }
        if !(self.pair_rate >= 0.0) || !self.pair_rate.is_finite() {
            return Err(Error::Config("pair_rate must be a finite non-negative rate".into()));
        }
        if !(self.duration >= 0.0) || !self.duration.is_finite() {
            return Err(Error::Config("duration must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.visibility_drop) {
            return Err(Error::Config("visibility_drop must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn duration_ticks(&self) -> f64 {
        self.duration * TICKS_PER_SEC as f64
    }

    fn visibility(&self, basis: Basis, t: f64) -> f64 {
        let base = match basis {
            Basis::HV => self.visibility_hv,
            Basis::DA => self.visibility_da,
        };
        let total = self.duration_ticks();
        let ramp = if total > 0.0 { self.visibility_drop * (t / total).clamp(0.0, 1.0) } else { 0.0 };
        (base - ramp).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SideConfig {
    /// Probability that a photon of a pair is registered on this side.
    pub efficiency: f64,
    /// Gaussian timing jitter, standard deviation in ticks.
    pub jitter_sigma: f64,
    /// Fixed per-detector delays in ticks.
    pub detector_delays: [i64; 4],
    /// Dark counts per second, per detector.
    pub dark_rate: f64,
    /// Minimum spacing of two events on one detector, ticks.
    pub dead_time: u64,
    /// Clock offset in ticks: local = (1 + drift) * true + offset.
    pub clock_offset: i64,
    pub clock_drift: f64,
}

impl Default for SideConfig {
    fn default() -> Self {
        SideConfig {
            efficiency: 0.22,
            jitter_sigma: DEFAULT_JITTER_SIGMA_TICKS,
            detector_delays: [0; 4],
            dark_rate: 1_000.0,
            dead_time: 0,
            clock_offset: 0,
            clock_drift: 0.0,
        }
    }
}

impl SideConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(Error::Config("efficiency must lie in [0, 1]".into()));
        }
        if !(self.dark_rate >= 0.0) || !self.dark_rate.is_finite() {
            return Err(Error::Config("dark_rate must be finite and non-negative".into()));
        }
        if !(self.jitter_sigma >= 0.0) || !self.jitter_sigma.is_finite() {
            return Err(Error::Config("jitter_sigma must be finite and non-negative".into()));
        }
        if !(self.clock_drift.abs() < 1e-4) {
            return Err(Error::Config("|clock_drift| must be below 1e-4".into()));
        }
        Ok(())
    }

    /// Maps true time to this side's clock reading.
    pub fn to_local(&self, true_ticks: f64) -> f64 {
        (1.0 + self.clock_drift) * true_ticks + self.clock_offset as f64
    }

    /// Noiseless, lossless, skew-free detection.
    pub fn ideal() -> Self {
        SideConfig {
            efficiency: 1.0,
            jitter_sigma: 0.0,
            detector_delays: [0; 4],
            dark_rate: 0.0,
            dead_time: 0,
            clock_offset: 0,
            clock_drift: 0.0,
        }
    }
}

/// Complete description of a simulated link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct LinkConfig {
    pub source: SourceConfig,
    pub alice: SideConfig,
    pub bob: SideConfig,
}

impl LinkConfig {
    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        self.alice.validate()?;
        self.bob.validate()
    }

    /// Rates of the remote night-time run: about 2 200 accepted
    /// coincidences/s, 99 692 singles/s on the source side and 18 325/s on
    /// the receiver side, remote QBER near 5.4 %.
    pub fn remote_night(duration: f64, seed: u64) -> Self {
        let dark_total = 4.0 * 1_000.0;
        let photons_a = 99_692.0 - dark_total;
        let photons_b = 18_325.0 - dark_total;
        let coincidences = 2_200.0;
        let pair_rate = photons_a * photons_b / coincidences;
        LinkConfig {
            source: SourceConfig {
                pair_rate,
                // Visibilities give (1 - V)/2 near 4.97 %; accidentals add
                // about 0.15 %, for 5.4 % wrong over correct bits.
                visibility_hv: 0.915,
                visibility_da: 0.886,
                duration,
                rng_seed: seed,
                visibility_drop: 0.0,
            },
            alice: SideConfig { efficiency: photons_a / pair_rate, ..SideConfig::default() },
            bob: SideConfig {
                efficiency: photons_b / pair_rate,
                clock_offset: 37_000_000 * 8,
                clock_drift: 4.0e-8,
                ..SideConfig::default()
            },
        }
    }
}

/// Polarization measurement result of one photon.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhotonOutcome {
    pub basis: Basis,
    pub bit: u8,
}

impl PhotonOutcome {
    pub fn detector(&self) -> u8 {
        basis_bit_to_detector(self.basis, self.bit)
    }
}

/// Ground truth for one emitted pair with at least one registered photon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthRecord {
    /// Emission instant in true (unskewed) ticks.
    pub emission: f64,
    pub alice: PhotonOutcome,
    pub bob: PhotonOutcome,
    /// Registered time in Alice's clock when the photon survived.
    pub alice_time: Option<Timestamp>,
    pub bob_time: Option<Timestamp>,
}

impl TruthRecord {
    pub fn alice_survived(&self) -> bool {
        self.alice_time.is_some()
    }

    pub fn bob_survived(&self) -> bool {
        self.bob_time.is_some()
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn exp_dist(rate_per_tick: f64) -> Option<Exp<f64>> {
    (rate_per_tick > 0.0).then(|| Exp::new(rate_per_tick).expect("positive rate"))
}

/// Homogeneous Poisson emission times over `[0, duration)`.
pub fn simulate_pairs(cfg: &SourceConfig) -> Vec<Timestamp> {
    let mut rng = rng_for(cfg.rng_seed, 0);
    let end = cfg.duration_ticks();
    let Some(gap) = exp_dist(cfg.pair_rate / TICKS_PER_SEC as f64) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    let mut t = 0.0;
    loop {
        t += gap.sample(&mut rng);
        if t >= end {
            break;
        }
        out.push(Timestamp(t as u64));
    }
    out
}

fn random_basis<R: Rng + ?Sized>(rng: &mut R) -> Basis {
    Basis::from_flag(rng.random::<bool>())
}

fn joint_outcome<R: Rng + ?Sized>(basis_a: Basis, basis_b: Basis, visibility: f64, rng: &mut R) -> (u8, u8) {
    let bit_a = rng.random::<bool>() as u8;
    if basis_a == basis_b {
        let anti = rng.random::<f64>() < 0.5 * (1.0 + visibility);
        (bit_a, if anti { 1 - bit_a } else { bit_a })
    } else {
        (bit_a, rng.random::<bool>() as u8)
    }
}

/// Draws one pair's polarization outcomes for the given analyzer bases.
///
/// In a common basis Bob's bit is anti-correlated with Alice's with
/// probability (1 + V)/2; conjugate bases give independent fair bits.
pub fn sample_joint_outcome<R: Rng + ?Sized>(
    basis_a: Basis,
    basis_b: Basis,
    cfg: &SourceConfig,
    rng: &mut R,
) -> (u8, u8) {
    joint_outcome(basis_a, basis_b, cfg.visibility(basis_a, 0.0), rng)
}

/// Random passive basis choice on both sides plus joint outcomes, one entry
/// per pair.
pub fn assign_outcomes<R: Rng + ?Sized>(
    pairs: &[Timestamp],
    cfg: &SourceConfig,
    rng: &mut R,
) -> Vec<(PhotonOutcome, PhotonOutcome)> {
    pairs
        .iter()
        .map(|t| {
            let ba = random_basis(rng);
            let bb = random_basis(rng);
            let v = cfg.visibility(ba, t.0 as f64);
            let (a, b) = joint_outcome(ba, bb, v, rng);
            (PhotonOutcome { basis: ba, bit: a }, PhotonOutcome { basis: bb, bit: b })
        })
        .collect()
}

struct Jitter {
    normal: Option<Normal<f64>>,
    clamp: f64,
}

impl Jitter {
    fn new(sigma: f64) -> Self {
        Jitter {
            normal: (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma")),
            clamp: JITTER_CLAMP_SIGMAS * sigma,
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.normal {
            Some(n) => n.sample(rng).clamp(-self.clamp, self.clamp),
            None => 0.0,
        }
    }
}

fn local_ticks(side: &SideConfig, true_ticks: f64) -> Option<u64> {
    let t = side.to_local(true_ticks).round();
    (t >= 0.0).then_some(t as u64)
}

/// Dead-time and duplicate filter applied to a time-ordered event stream.
#[derive(Debug, Clone)]
struct DeadTimeFilter {
    dead_time: u64,
    last: [Option<u64>; 4],
    prev: Option<DetectionEvent>,
}

impl DeadTimeFilter {
    fn new(dead_time: u64) -> Self {
        DeadTimeFilter { dead_time, last: [None; 4], prev: None }
    }

    fn admit(&mut self, ev: DetectionEvent) -> bool {
        if self.prev == Some(ev) {
            return false;
        }
        let d = ev.detector as usize;
        if let Some(last) = self.last[d] {
            if ev.time.0 - last < self.dead_time {
                return false;
            }
        }
        self.last[d] = Some(ev.time.0);
        self.prev = Some(ev);
        true
    }
}

/// Registers one side's photons: loss, jitter, detector delay, dark counts,
/// clock skew, merge and dead time. Returns the sorted stream.
///
/// `outcomes[i]` is the polarization result of the photon emitted at
/// `pairs[i]`; dark counts are drawn over `[0, duration_ticks)`.
pub fn detect_side<R: Rng + ?Sized>(
    pairs: &[Timestamp],
    outcomes: &[PhotonOutcome],
    side: &SideConfig,
    duration_ticks: f64,
    rng: &mut R,
) -> Result<Vec<DetectionEvent>> {
    if pairs.len() != outcomes.len() {
        return Err(Error::contract("one outcome per pair required"));
    }
    if !pairs.windows(2).all(|w| w[0] <= w[1]) {
        return Err(Error::contract("pair emission times must be sorted"));
    }
    let jitter = Jitter::new(side.jitter_sigma);
    let mut events = Vec::new();
    for (t, o) in pairs.iter().zip(outcomes) {
        if rng.random::<f64>() >= side.efficiency {
            continue;
        }
        let d = o.detector();
        let x = t.0 as f64 + jitter.sample(rng) + side.detector_delays[d as usize] as f64;
        if let Some(ticks) = local_ticks(side, x) {
            events.push(DetectionEvent::new(ticks, d));
        }
    }
    if let Some(gap) = exp_dist(side.dark_rate / TICKS_PER_SEC as f64) {
        for d in 0..4u8 {
            let mut t = 0.0;
            loop {
                t += gap.sample(rng);
                if t >= duration_ticks {
                    break;
                }
                if let Some(ticks) = local_ticks(side, t) {
                    events.push(DetectionEvent::new(ticks, d));
                }
            }
        }
    }
    events.sort_unstable();
    let mut filter = DeadTimeFilter::new(side.dead_time);
    events.retain(|ev| filter.admit(*ev));
    Ok(events)
}

/// Event waiting for in-order release; `truth` indexes the truth table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Pending {
    ev: DetectionEvent,
    truth: u32,
}

const NO_TRUTH: u32 = u32::MAX;

struct SideState {
    cfg: SideConfig,
    rng: ChaCha8Rng,
    jitter: Jitter,
    dark_gap: Option<Exp<f64>>,
    next_dark: [f64; 4],
    pending: Vec<Pending>,
    filter: DeadTimeFilter,
    /// Earliest true-time shift a photon can have relative to its emission.
    min_shift: f64,
}

impl SideState {
    fn new(cfg: SideConfig, seed: u64, stream: u64) -> Self {
        let mut rng = rng_for(seed, stream);
        let dark_gap = exp_dist(cfg.dark_rate / TICKS_PER_SEC as f64);
        let mut next_dark = [f64::INFINITY; 4];
        if let Some(gap) = &dark_gap {
            for slot in next_dark.iter_mut() {
                *slot = gap.sample(&mut rng);
            }
        }
        let min_delay = cfg.detector_delays.iter().copied().min().unwrap_or(0).min(0) as f64;
        let jitter = Jitter::new(cfg.jitter_sigma);
        let min_shift = min_delay - jitter.clamp - 1.0;
        SideState {
            filter: DeadTimeFilter::new(cfg.dead_time),
            cfg,
            rng,
            jitter,
            dark_gap,
            next_dark,
            pending: Vec::new(),
            min_shift,
        }
    }

    fn photon(&mut self, emission: f64, outcome: PhotonOutcome, truth: u32) -> bool {
        if self.rng.random::<f64>() >= self.cfg.efficiency {
            return false;
        }
        let d = outcome.detector();
        let x = emission + self.jitter.sample(&mut self.rng) + self.cfg.detector_delays[d as usize] as f64;
        match local_ticks(&self.cfg, x) {
            Some(ticks) => {
                self.pending.push(Pending { ev: DetectionEvent::new(ticks, d), truth });
                true
            }
            None => false,
        }
    }

    fn darks_until(&mut self, end: f64) {
        let Some(gap) = self.dark_gap else { return };
        for d in 0..4u8 {
            while self.next_dark[d as usize] < end {
                let t = self.next_dark[d as usize];
                if let Some(ticks) = local_ticks(&self.cfg, t) {
                    self.pending.push(Pending { ev: DetectionEvent::new(ticks, d), truth: NO_TRUTH });
                }
                self.next_dark[d as usize] += gap.sample(&mut self.rng);
            }
        }
    }

    /// Releases every pending event that no later slice can precede.
    fn release(&mut self, slice_end: Option<f64>, truth: &mut [TruthRecord], alice: bool) -> Vec<DetectionEvent> {
        self.pending.sort_unstable();
        let cut = match slice_end {
            Some(end) => {
                let bound = self.cfg.to_local(end + self.min_shift).floor();
                if bound <= 0.0 {
                    0
                } else {
                    let bound = bound as u64;
                    self.pending.partition_point(|p| p.ev.time.0 < bound)
                }
            }
            None => self.pending.len(),
        };
        let mut out = Vec::with_capacity(cut);
        for p in self.pending.drain(..cut) {
            let admitted = self.filter.admit(p.ev);
            if p.truth != NO_TRUTH {
                let rec = &mut truth[p.truth as usize];
                let slot = if alice { &mut rec.alice_time } else { &mut rec.bob_time };
                *slot = admitted.then_some(p.ev.time);
            }
            if admitted {
                out.push(p.ev);
            }
        }
        out
    }
}

/// Events released by one simulation step.
#[derive(Debug, Clone, Default)]
pub struct LinkSlice {
    pub alice: Vec<DetectionEvent>,
    pub bob: Vec<DetectionEvent>,
}

/// Streaming link simulator.
///
/// Simulates the link slice by slice in true time and releases each side's
/// events in sorted order, so arbitrarily long sessions run in bounded
/// memory. Concatenating all slices of one side yields its full stream.
pub struct LinkSimulator {
    source: SourceConfig,
    rng: ChaCha8Rng,
    pair_gap: Option<Exp<f64>>,
    next_pair: f64,
    end: f64,
    slice_start: f64,
    alice: SideState,
    bob: SideState,
    record_truth: bool,
    truth: Vec<TruthRecord>,
    done: bool,
}

impl LinkSimulator {
    pub fn new(cfg: &LinkConfig) -> Result<Self> {
        Self::build(cfg, false)
    }

    /// Like [`LinkSimulator::new`] but keeps a [`TruthRecord`] for every pair
    /// that registered on at least one side.
    pub fn with_truth(cfg: &LinkConfig) -> Result<Self> {
        Self::build(cfg, true)
    }

    fn build(cfg: &LinkConfig, record_truth: bool) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.source.rng_seed;
        let mut rng = rng_for(seed, 0);
        let pair_gap = exp_dist(cfg.source.pair_rate / TICKS_PER_SEC as f64);
        let next_pair = pair_gap.as_ref().map_or(f64::INFINITY, |g| g.sample(&mut rng));
        Ok(LinkSimulator {
            source: cfg.source.clone(),
            rng,
            pair_gap,
            next_pair,
            end: cfg.source.duration_ticks(),
            slice_start: 0.0,
            alice: SideState::new(cfg.alice.clone(), seed, 1),
            bob: SideState::new(cfg.bob.clone(), seed, 2),
            record_truth,
            truth: Vec::new(),
            done: false,
        })
    }

    pub fn next_slice(&mut self) -> Option<LinkSlice> {
        if self.done {
            return None;
        }
        let slice_end = (self.slice_start + SLICE_TICKS).min(self.end);
        while self.next_pair < slice_end {
            let t = self.next_pair;
            let ba = random_basis(&mut self.rng);
            let bb = random_basis(&mut self.rng);
            let v = self.source.visibility(ba, t);
            let (a, b) = joint_outcome(ba, bb, v, &mut self.rng);
            let oa = PhotonOutcome { basis: ba, bit: a };
            let ob = PhotonOutcome { basis: bb, bit: b };
            let idx = if self.record_truth { self.truth.len() as u32 } else { NO_TRUTH };
            let ka = self.alice.photon(t, oa, idx);
            let kb = self.bob.photon(t, ob, idx);
            if self.record_truth && (ka || kb) {
                // Times are filled in on release.
                self.truth.push(TruthRecord { emission: t, alice: oa, bob: ob, alice_time: None, bob_time: None });
            }
            self.next_pair += self.pair_gap.as_ref().map_or(f64::INFINITY, |g| g.sample(&mut self.rng));
        }
        self.alice.darks_until(slice_end);
        self.bob.darks_until(slice_end);
        let last = slice_end >= self.end;
        let boundary = (!last).then_some(slice_end);
        let slice = LinkSlice {
            alice: self.alice.release(boundary, &mut self.truth, true),
            bob: self.bob.release(boundary, &mut self.truth, false),
        };
        self.slice_start = slice_end;
        self.done = last;
        Some(slice)
    }

    pub fn truth(&self) -> &[TruthRecord] {
        &self.truth
    }

    /// Collects the whole session.
    pub fn run(mut self) -> (Vec<DetectionEvent>, Vec<DetectionEvent>, Vec<TruthRecord>) {
        let mut a = Vec::new();
        let mut b = Vec::new();
        while let Some(s) = self.next_slice() {
            a.extend(s.alice);
            b.extend(s.bob);
        }
        (a, b, self.truth)
    }
}

/// Simulates both sides of a link in one go. Truth is recorded for every
/// pair that registered on at least one side.
pub fn simulate_link(cfg: &LinkConfig) -> Result<(Vec<DetectionEvent>, Vec<DetectionEvent>, Vec<TruthRecord>)> {
    Ok(LinkSimulator::with_truth(cfg)?.run())
}

/// Which party a stream dump belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Alice = 0,
    Bob = 1,
}

impl Side {
    fn from_u8(v: u8) -> Option<Side> {
        match v {
            0 => Some(Side::Alice),
            1 => Some(Side::Bob),
            _ => None,
        }
    }
}

pub const STREAM_MAGIC: &[u8; 4] = b"ETKD";
pub const STREAM_VERSION: u16 = 1;
const STREAM_HEADER_LEN: usize = 7;
const STREAM_RECORD_LEN: usize = 9;

/// Writes a stream dump: header {"ETKD", version u16 LE, side u8} followed
/// by records [u64 ticks LE][u8 detector].
pub fn write_stream<W: Write>(mut w: W, side: Side, events: &[DetectionEvent]) -> io::Result<()> {
    let mut writer = StreamWriter::new(&mut w, side)?;
    for ev in events {
        writer.push(ev)?;
    }
    Ok(())
}

pub struct StreamWriter<W: Write> {
    inner: W,
}

impl<W: Write> StreamWriter<W> {
    pub fn new(mut inner: W, side: Side) -> io::Result<Self> {
        inner.write_all(STREAM_MAGIC)?;
        inner.write_all(&STREAM_VERSION.to_le_bytes())?;
        inner.write_all(&[side as u8])?;
        Ok(StreamWriter { inner })
    }

    pub fn push(&mut self, ev: &DetectionEvent) -> io::Result<()> {
        let mut rec = [0u8; STREAM_RECORD_LEN];
        rec[..8].copy_from_slice(&ev.time.0.to_le_bytes());
        rec[8] = ev.detector;
        self.inner.write_all(&rec)
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

/// Iterator over the records of a stream dump.
pub struct StreamReader<R: Read> {
    inner: R,
    side: Side,
    offset: usize,
}

impl<R: Read> StreamReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut header = [0u8; STREAM_HEADER_LEN];
        inner.read_exact(&mut header).map_err(|_| Error::decode(0, "truncated stream header"))?;
        if &header[..4] != STREAM_MAGIC {
            return Err(Error::decode(0, "bad stream magic"));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != STREAM_VERSION {
            return Err(Error::decode(4, format!("unsupported stream version {version}")));
        }
        let side = Side::from_u8(header[6]).ok_or_else(|| Error::decode(6, "bad side byte"))?;
        Ok(StreamReader { inner, side, offset: STREAM_HEADER_LEN })
    }

    pub fn side(&self) -> Side {
        self.side
    }
}

impl<R: Read> Iterator for StreamReader<R> {
    type Item = Result<DetectionEvent>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut rec = [0u8; STREAM_RECORD_LEN];
        let mut filled = 0;
        while filled < rec.len() {
            match self.inner.read(&mut rec[filled..]) {
                Ok(0) if filled == 0 => return None,
                Ok(0) => return Some(Err(Error::decode(self.offset + filled, "truncated record"))),
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Some(Err(e.into())),
            }
        }
        let at = self.offset;
        self.offset += STREAM_RECORD_LEN;
        let ticks = u64::from_le_bytes(rec[..8].try_into().expect("8 bytes"));
        if rec[8] > 3 {
            return Some(Err(Error::decode(at + 8, format!("invalid detector {}", rec[8]))));
        }
        Some(Ok(DetectionEvent::new(ticks, rec[8])))
    }
}

pub fn read_stream<R: Read>(r: R) -> Result<(Side, Vec<DetectionEvent>)> {
    let reader = StreamReader::new(r)?;
    let side = reader.side();
    let events = reader.collect::<Result<Vec<_>>>()?;
    Ok((side, events))
}
