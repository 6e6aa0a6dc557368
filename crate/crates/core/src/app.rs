//! Session orchestration: configuration, the Alice and Bob pipelines, the
//! in-process loopback harness, two-process node mode, metrics and key
//! files.
//!
//! Bob streams one TIMING packet per epoch and waits for the matching
//! COINC_REPLY before sending the next. Alice, the high-rate side, locks
//! onto Bob's clock, matches, sifts and replies. Whenever both sides have
//! collated a full cluster it is reconciled, compressed and verified before
//! the next packet moves. The exchange is therefore fully deterministic:
//! the same events and seed give the same keys whatever the transport.

use std::collections::{HashSet, VecDeque};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::coinc::{count_accidentals, match_coincidences, remote_bits, sift, CoincidenceMatch, WindowConfig};
use crate::ecorr::{corrected_buffer, reconcile_alice, reconcile_bob, Cluster, ClusterAccumulator, EtaEstimator};
use crate::error::{Error, Result};
use crate::physim::{LinkConfig, LinkSimulator, SideConfig, SourceConfig, StreamReader, StreamWriter};
use crate::privamp::{key_digest, toeplitz_compress, PaBudget, SplitMix64};
use crate::tsync::{acquire, servo_update, ClockModel};
use crate::types::{epoch_of, pack_bits, unpack_bits, DetectionEvent, EpochIndex, Timestamp, TICKS_PER_SEC};
use crate::wire::{
    decode_timing, encode_timing, expect, packetize, Channel, CoincReply, Hello, KeyHash, MemoryChannel, Message,
    MessageType, PaSeed, StreamChannel, TimingPacket, PROTOCOL_VERSION,
};

pub const KEY_MAGIC: &[u8; 4] = b"ETKY";
pub const KEY_VERSION: u16 = 1;
pub const METRICS_HEADER: &str = "t_s,raw_cps,sifted_cps,secret_cps,qber,accidental_cps,mismatched_clusters";

/// Bound on the initial clock offset, with margin over the coarse 100 ms
/// pre-synchronization.
const MAX_PRIOR_OFFSET: u64 = 150_000_000 * 8;
/// Packets kept while acquiring lock.
pub const ACQUIRE_MAX_PACKETS: usize = 8;
/// Consecutive starved epochs before lock is declared lost.
const LOCK_LOSS_EPOCHS: usize = 3;
/// A starved epoch only counts when the packet had at least this many events.
const LOCK_LOSS_MIN_EVENTS: usize = 200;
const CHUNK_EVENTS: usize = 1 << 16;
/// Simulator slices queued per side in loopback. Must cover Bob's epoch of
/// look-ahead plus Alice's prior-offset margin, about 1 s or 30 slices.
const SIM_QUEUE_SLICES: usize = 96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Alice,
    Bob,
    Loopback,
}

impl Role {
    fn wire(self) -> u8 {
        match self {
            Role::Alice => 0,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionSection {
    pub role: Option<Role>,
    /// Listen address for Alice, connect address for Bob.
    pub peer: Option<String>,
    /// Master seed. Overrides `source.rng_seed` and derives every public
    /// protocol seed.
    pub seed: Option<u64>,
    /// Simulated seconds; overrides `source.duration`.
    pub duration: Option<f64>,
    pub cluster_threshold: usize,
    /// Metrics row length in simulated seconds.
    pub metrics_interval: f64,
    /// Subtract each side's configured detector delays before matching.
    pub equalize_delays: bool,
    /// Seconds Bob keeps retrying to reach Alice.
    pub connect_timeout: f64,
    /// Recorded event streams replacing the simulator.
    pub alice_stream: Option<PathBuf>,
    pub bob_stream: Option<PathBuf>,
    /// Key output: a file for a node, a directory for loopback.
    pub keys: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

impl Default for SessionSection {
    fn default() -> Self {
        SessionSection {
            role: None,
            peer: None,
            seed: None,
            duration: None,
            cluster_threshold: crate::ecorr::DEFAULT_CLUSTER_THRESHOLD,
            metrics_interval: 10.0,
            equalize_delays: true,
            connect_timeout: 10.0,
            alice_stream: None,
            bob_stream: None,
            keys: None,
            metrics: None,
        }
    }
}

/// Deliberate faults for end-to-end tests.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultConfig {
    /// Clusters in which Bob flips one corrected bit before compression.
    pub flip_bob_bit: Vec<u32>,
    /// Bob drops the connection after this many verified clusters.
    pub bob_disconnect_after: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub session: SessionSection,
    pub source: SourceConfig,
    pub alice: SideConfig,
    pub bob: SideConfig,
    pub window: WindowConfig,
    pub faults: FaultConfig,
}

impl SessionConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: SessionConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let s = &mut cfg.session;
        for p in [&mut s.alice_stream, &mut s.bob_stream, &mut s.keys, &mut s.metrics].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// The remote night-time link with default windows.
    pub fn remote_night(duration: f64, seed: u64) -> Self {
        let link = LinkConfig::remote_night(duration, seed);
        SessionConfig {
            session: SessionSection { seed: Some(seed), duration: Some(duration), ..Default::default() },
            source: link.source,
            alice: link.alice,
            bob: link.bob,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        self.link().validate()?;
        let s = &self.session;
        if s.cluster_threshold == 0 {
            return Err(Error::Config("cluster_threshold must be positive".into()));
        }
        if !(s.metrics_interval > 0.0) || !s.metrics_interval.is_finite() {
            return Err(Error::Config("metrics_interval must be positive".into()));
        }
        if s.connect_timeout < 0.0 || !s.connect_timeout.is_finite() {
            return Err(Error::Config("connect_timeout must be non-negative".into()));
        }
        Ok(())
    }

    pub fn link(&self) -> LinkConfig {
        let mut source = self.source.clone();
        if let Some(seed) = self.session.seed {
            source.rng_seed = seed;
        }
        if let Some(d) = self.session.duration {
            source.duration = d;
        }
        LinkConfig { source, alice: self.alice.clone(), bob: self.bob.clone() }
    }

    pub fn master_seed(&self) -> u64 {
        self.session.seed.unwrap_or(self.source.rng_seed)
    }
}

/// Public per-cluster seed, derived from the master seed.
pub fn derive_seed(master: u64, cluster: u32, purpose: u8) -> u64 {
    let mut g = SplitMix64::new(master);
    let k = g.next_u64();
    SplitMix64::new(k ^ ((cluster as u64) << 8) ^ purpose as u64).next_u64()
}

const SEED_PERMUTE: u8 = 1;
const SEED_HASH: u8 = 2;

/// One metrics row; rates are per simulated second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub t_s: f64,
    pub raw_cps: f64,
    pub sifted_cps: f64,
    pub secret_cps: f64,
    pub qber: f64,
    pub accidental_cps: f64,
    pub mismatched_clusters: u32,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.3},{:.3},{:.3},{:.6},{:.3},{}",
            self.t_s,
            self.raw_cps,
            self.sifted_cps,
            self.secret_cps,
            self.qber,
            self.accidental_cps,
            self.mismatched_clusters
        )
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return Err(Error::Config(format!("metrics row needs 7 columns: {line:?}")));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::Config(format!("bad metrics value {:?}", f[i])))
        };
        Ok(MetricsRow {
            t_s: num(0)?,
            raw_cps: num(1)?,
            sifted_cps: num(2)?,
            secret_cps: num(3)?,
            qber: num(4)?,
            accidental_cps: num(5)?,
            mismatched_clusters: f[6].parse().map_err(|_| Error::Config(format!("bad count {:?}", f[6])))?,
        })
    }

    /// METRICS payload: six f64 LE then the mismatch count u32 LE.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(52);
        for x in [self.t_s, self.raw_cps, self.sifted_cps, self.secret_cps, self.qber, self.accidental_cps] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&self.mismatched_clusters.to_le_bytes());
        out
    }

    pub fn decode(b: &[u8]) -> Result<Self> {
        if b.len() != 52 {
            return Err(Error::decode(b.len().min(52), format!("METRICS: expected 52 bytes, got {}", b.len())));
        }
        let f = |i: usize| f64::from_le_bytes(b[8 * i..8 * i + 8].try_into().expect("8 bytes"));
        Ok(MetricsRow {
            t_s: f(0),
            raw_cps: f(1),
            sifted_cps: f(2),
            secret_cps: f(3),
            qber: f(4),
            accidental_cps: f(5),
            mismatched_clusters: u32::from_le_bytes(b[48..52].try_into().expect("4 bytes")),
        })
    }
}

/// Parses a metrics CSV, header included.
pub fn read_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Config("metrics file lacks the expected header".into()));
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricsRow::parse_csv).collect()
}

/// Append-only CSV writer, flushed per row.
pub struct MetricsSink {
    out: Option<BufWriter<File>>,
    rows: Vec<MetricsRow>,
}

impl MetricsSink {
    pub fn new(path: Option<&Path>) -> Result<Self> {
        let out = match path {
            Some(p) => {
                let mut w = BufWriter::new(File::create(p)?);
                writeln!(w, "{METRICS_HEADER}")?;
                w.flush()?;
                Some(w)
            }
            None => None,
        };
        Ok(MetricsSink { out, rows: Vec::new() })
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(w) = &mut self.out {
            writeln!(w, "{}", row.csv())?;
            w.flush()?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }
}

#[derive(Debug, Default)]
struct IntervalCounts {
    raw: u64,
    sifted: u64,
    secret: u64,
    accidentals: u64,
    mismatched: u32,
    errors: u64,
    reconciled: u64,
}

/// Bins per-epoch and per-cluster counts into fixed simulated-time rows.
struct MetricsClock {
    interval: f64,
    current: Option<u64>,
    counts: IntervalCounts,
    qber: f64,
    last_time: f64,
}

impl MetricsClock {
    fn new(interval: f64) -> Self {
        MetricsClock { interval, current: None, counts: IntervalCounts::default(), qber: 0.0, last_time: 0.0 }
    }

    /// Moves to the interval holding `t` (seconds), returning the rows of
    /// every interval closed on the way.
    fn advance(&mut self, t: f64) -> Vec<MetricsRow> {
        let idx = (t / self.interval).floor().max(0.0) as u64;
        let mut rows = Vec::new();
        match self.current {
            None => self.current = Some(idx),
            Some(cur) if idx > cur => {
                rows.push(self.close(cur, self.interval));
                for empty in cur + 1..idx {
                    rows.push(self.close(empty, self.interval));
                }
                self.current = Some(idx);
            }
            _ => {}
        }
        self.last_time = self.last_time.max(t);
        rows
    }

    /// Extends the span of the open interval without closing it.
    fn touch(&mut self, t: f64) {
        self.last_time = self.last_time.max(t);
    }

    fn close(&mut self, idx: u64, span: f64) -> MetricsRow {
        let c = std::mem::take(&mut self.counts);
        if c.reconciled > 0 {
            self.qber = c.errors as f64 / c.reconciled as f64;
        }
        let span = span.max(1e-9);
        MetricsRow {
            t_s: idx as f64 * self.interval,
            raw_cps: c.raw as f64 / span,
            sifted_cps: c.sifted as f64 / span,
            secret_cps: c.secret as f64 / span,
            qber: self.qber,
            accidental_cps: c.accidentals as f64 / span,
            mismatched_clusters: c.mismatched,
        }
    }

    fn finish(&mut self) -> Option<MetricsRow> {
        let cur = self.current.take()?;
        let span = (self.last_time - cur as f64 * self.interval).clamp(0.0, self.interval);
        Some(self.close(cur, span))
    }
}

fn epoch_seconds(e: EpochIndex) -> f64 {
    e.start().0 as f64 / TICKS_PER_SEC as f64
}

/// Writes verified final keys: header {"ETKY", version u16 LE}, then per
/// cluster {id u32 LE, m u32 LE, packed bits}.
pub struct KeyWriter {
    out: Option<BufWriter<File>>,
}

impl KeyWriter {
    pub fn create(path: Option<&Path>) -> Result<Self> {
        let out = match path {
            Some(p) => {
                let mut w = BufWriter::new(File::create(p)?);
                w.write_all(KEY_MAGIC)?;
                w.write_all(&KEY_VERSION.to_le_bytes())?;
                w.flush()?;
                Some(w)
            }
            None => None,
        };
        Ok(KeyWriter { out })
    }

    pub fn append(&mut self, cluster: u32, bits: &[u8]) -> Result<()> {
        if let Some(w) = &mut self.out {
            w.write_all(&cluster.to_le_bytes())?;
            w.write_all(&(bits.len() as u32).to_le_bytes())?;
            w.write_all(&pack_bits(bits))?;
            w.flush()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyRecord {
    pub cluster: u32,
    pub bits: Vec<u8>,
}

pub fn read_keys<R: Read>(mut r: R) -> Result<Vec<KeyRecord>> {
    let mut b = Vec::new();
    r.read_to_end(&mut b)?;
    if b.len() < 6 || &b[..4] != KEY_MAGIC {
        return Err(Error::decode(0, "bad key file magic"));
    }
    let version = u16::from_le_bytes([b[4], b[5]]);
    if version != KEY_VERSION {
        return Err(Error::decode(4, format!("unsupported key file version {version}")));
    }
    let mut pos = 6;
    let mut out = Vec::new();
    while pos < b.len() {
        if b.len() - pos < 8 {
            return Err(Error::decode(pos, "truncated key record header"));
        }
        let cluster = u32::from_le_bytes(b[pos..pos + 4].try_into().expect("4 bytes"));
        let m = u32::from_le_bytes(b[pos + 4..pos + 8].try_into().expect("4 bytes")) as usize;
        pos += 8;
        let n = m.div_ceil(8);
        if b.len() - pos < n {
            return Err(Error::decode(pos, "truncated key bits"));
        }
        out.push(KeyRecord { cluster, bits: unpack_bits(&b[pos..pos + n], m) });
        pos += n;
    }
    Ok(out)
}

pub fn read_key_file(path: &Path) -> Result<Vec<KeyRecord>> {
    read_keys(File::open(path)?)
}

/// Per-cluster outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterRecord {
    pub id: u32,
    pub r: usize,
    pub errors: usize,
    pub disclosed: usize,
    pub eta: f64,
    /// Eavesdropper knowledge, bits, rounded up.
    pub e: usize,
    /// Final length; zero for a discarded cluster.
    pub m: usize,
    pub verified: bool,
    pub aborted: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionReport {
    pub epochs: u64,
    pub raw_coincidences: u64,
    pub accidentals: u64,
    pub sifted_bits: u64,
    pub clusters: Vec<ClusterRecord>,
    pub secret_bits: u64,
    pub mismatched_clusters: u32,
    /// First epoch matched under a locked clock model.
    pub lock_epoch: Option<EpochIndex>,
    pub lock_losses: u32,
    /// Sifted bits left in the final partial cluster.
    pub leftover_bits: usize,
    pub final_model: Option<ClockModel>,
}

impl SessionReport {
    pub fn reconciled_bits(&self) -> u64 {
        self.clusters.iter().map(|c| c.r as u64).sum()
    }

    pub fn discarded_clusters(&self) -> usize {
        self.clusters.iter().filter(|c| c.m == 0).count()
    }

    /// Secret over sifted bits of reconciled clusters.
    pub fn secret_fraction(&self) -> f64 {
        let r = self.reconciled_bits();
        if r == 0 {
            0.0
        } else {
            self.secret_bits as f64 / r as f64
        }
    }

    /// Error fraction over all reconciled clusters.
    pub fn error_fraction(&self) -> f64 {
        let r = self.reconciled_bits();
        let e: usize = self.clusters.iter().map(|c| c.errors).sum();
        if r == 0 {
            0.0
        } else {
            e as f64 / r as f64
        }
    }
}

/// Source of one side's detections, in time order, chunk by chunk.
pub type EventChunks = Box<dyn Iterator<Item = Result<Vec<DetectionEvent>>> + Send>;

/// Applies detector-delay equalization to a chunked stream, holding back
/// events that a later chunk could still precede.
struct EventFeed {
    inner: EventChunks,
    delays: [i64; 4],
    max_delay: i64,
    hold: Vec<DetectionEvent>,
    done: bool,
}

impl EventFeed {
    fn new(inner: EventChunks, delays: Option<[i64; 4]>) -> Self {
        let delays = delays.unwrap_or([0; 4]);
        let max_delay = delays.iter().copied().max().unwrap_or(0);
        EventFeed { inner, delays, max_delay, hold: Vec::new(), done: false }
    }

    fn next_chunk(&mut self) -> Result<Option<Vec<DetectionEvent>>> {
        loop {
            if self.done {
                return Ok((!self.hold.is_empty()).then(|| std::mem::take(&mut self.hold)));
            }
            let Some(chunk) = self.inner.next() else {
                self.done = true;
                continue;
            };
            let chunk = chunk?;
            let Some(last_raw) = chunk.last().map(|e| e.time.0) else { continue };
            if self.delays == [0; 4] {
                return Ok(Some(chunk));
            }
            self.hold.extend(crate::coinc::equalize(&chunk, &self.delays));
            self.hold.sort_unstable();
            // Later raw times are >= last_raw, so later equalized times are
            // >= last_raw - max_delay.
            let bound = last_raw as i128 - self.max_delay as i128;
            let cut = self.hold.partition_point(|e| (e.time.0 as i128) < bound);
            if cut > 0 {
                let rest = self.hold.split_off(cut);
                return Ok(Some(std::mem::replace(&mut self.hold, rest)));
            }
        }
    }
}

fn chunked<I>(it: I) -> EventChunks
where
    I: Iterator<Item = Result<DetectionEvent>> + Send + 'static,
{
    let mut it = it.peekable();
    Box::new(std::iter::from_fn(move || {
        it.peek()?;
        let mut chunk = Vec::with_capacity(CHUNK_EVENTS);
        for r in it.by_ref().take(CHUNK_EVENTS) {
            match r {
                Ok(ev) => chunk.push(ev),
                Err(e) => return Some(Err(e)),
            }
        }
        Some(Ok(chunk))
    }))
}

/// Events of a recorded stream file.
pub fn file_events(path: &Path) -> Result<EventChunks> {
    let reader = StreamReader::new(std::io::BufReader::new(File::open(path)?))?;
    Ok(chunked(reader))
}

/// One side of a simulated link. Each call runs its own simulator, so two
/// nodes with the same config see consistent streams.
pub fn simulated_events(link: &LinkConfig, role: Role) -> Result<EventChunks> {
    let mut sim = LinkSimulator::new(link)?;
    let alice = role == Role::Alice;
    Ok(Box::new(std::iter::from_fn(move || sim.next_slice().map(|s| Ok(if alice { s.alice } else { s.bob })))))
}

fn receiver_events(rx: mpsc::Receiver<Vec<DetectionEvent>>) -> EventChunks {
    Box::new(rx.into_iter().map(Ok))
}

/// Alice's rolling window of local events, indexed globally.
struct LocalBuffer {
    feed: EventFeed,
    events: VecDeque<DetectionEvent>,
    base: u64,
    exhausted: bool,
}

impl LocalBuffer {
    fn new(feed: EventFeed) -> Self {
        LocalBuffer { feed, events: VecDeque::new(), base: 0, exhausted: false }
    }

    fn fill_until(&mut self, t: f64) -> Result<()> {
        while !self.exhausted && self.events.back().is_none_or(|e| (e.time.0 as f64) <= t) {
            match self.feed.next_chunk()? {
                Some(c) => self.events.extend(c),
                None => self.exhausted = true,
            }
        }
        Ok(())
    }

    /// Global index of the first event and the events with `lo <= t < hi`.
    fn range(&mut self, lo: f64, hi: f64) -> (u64, &[DetectionEvent]) {
        let s = self.events.make_contiguous();
        let a = s.partition_point(|e| (e.time.0 as f64) < lo);
        let b = s.partition_point(|e| (e.time.0 as f64) < hi);
        (self.base + a as u64, &s[a..b.max(a)])
    }

    fn prune_before(&mut self, t: f64) {
        while self.events.front().is_some_and(|e| (e.time.0 as f64) < t) {
            self.events.pop_front();
            self.base += 1;
        }
    }
}

/// Decoded TIMING packet with absolute times.
struct RemotePacket {
    packet: TimingPacket,
    times: Vec<Timestamp>,
}

/// Outcome of matching one packet.
struct EpochMatch {
    kept: Vec<u32>,
    bits: Vec<u8>,
    raw: u64,
    accidentals: u64,
}

/// Alice's synchronization and matching state.
struct Matcher {
    window: WindowConfig,
    model: Option<ClockModel>,
    held: VecDeque<Vec<Timestamp>>,
    starved: usize,
    used: HashSet<u64>,
}

impl Matcher {
    fn new(window: WindowConfig) -> Self {
        Matcher { window, model: None, held: VecDeque::new(), starved: 0, used: HashSet::new() }
    }

    fn try_lock(&mut self, local: &mut LocalBuffer, times: &[Timestamp]) -> Result<bool> {
        self.held.push_back(times.to_vec());
        while self.held.len() > ACQUIRE_MAX_PACKETS {
            self.held.pop_front();
        }
        let remote: Vec<Timestamp> = self.held.iter().flatten().copied().collect();
        let (first, last) = (remote[0].0 as f64, remote[remote.len() - 1].0 as f64);
        let margin = MAX_PRIOR_OFFSET as f64;
        local.fill_until(last + margin)?;
        let (_, ev) = local.range(first - margin, last + margin);
        let local_times: Vec<Timestamp> = ev.iter().map(|e| e.time).collect();
        let reference = epoch_of(Timestamp(((first + last) / 2.0) as u64));
        match acquire(&local_times, &remote, reference) {
            Ok(a) => {
                self.model = Some(a.model);
                self.held.clear();
                self.starved = 0;
                Ok(true)
            }
            Err(Error::NoPeak { .. }) => Ok(false),
            Err(e) => Err(e),
        }
    }

    fn process(
        &mut self,
        local: &mut LocalBuffer,
        rp: &RemotePacket,
        report: &mut SessionReport,
    ) -> Result<EpochMatch> {
        let empty = EpochMatch { kept: Vec::new(), bits: Vec::new(), raw: 0, accidentals: 0 };
        if self.model.is_none() {
            if !self.try_lock(local, &rp.times)? {
                let first = rp.times[0].0 as f64;
                let keep_from = self.held.front().map_or(first, |h| h[0].0 as f64);
                local.prune_before(keep_from - MAX_PRIOR_OFFSET as f64);
                return Ok(empty);
            }
            report.lock_epoch.get_or_insert(rp.packet.epoch);
        }
        let model = self.model.expect("locked");
        let corrected: Vec<f64> = rp.times.iter().map(|t| model.to_local_f64(t.0 as f64)).collect();
        let rc: Vec<Timestamp> = corrected.iter().map(|&x| Timestamp(x.round().max(0.0) as u64)).collect();
        let w = &self.window;
        let s = w.servo_half_width as f64;
        let (acc_lo, acc_hi) = w.accidental_range();
        let lo = corrected[0] - s.max(acc_hi as f64) - 1.0;
        let hi = corrected[corrected.len() - 1] + s.max(-acc_lo as f64) + 1.0;
        local.fill_until(hi)?;
        let (base, ev) = local.range(lo, hi);
        let all_times: Vec<Timestamp> = ev.iter().map(|e| e.time).collect();
        let free: Vec<usize> = (0..ev.len()).filter(|&i| !self.used.contains(&(base + i as u64))).collect();
        let free_times: Vec<Timestamp> = free.iter().map(|&i| ev[i].time).collect();
        let outcome = match_coincidences(&free_times, &rc, w)?;
        let to_slice = |m: &CoincidenceMatch| CoincidenceMatch { local_index: free[m.local_index], ..*m };
        let accepted: Vec<CoincidenceMatch> = outcome.accepted.iter().map(to_slice).collect();
        let accidentals = count_accidentals(&all_times, &rc, w)?;
        let sifted = sift(&accepted, ev, &rp.packet.basis_flags)?;
        let mut samples = Vec::with_capacity(outcome.servo.len());
        for m in outcome.servo.iter().map(to_slice) {
            self.used.insert(base + m.local_index as u64);
            samples.push((rp.times[m.remote_index], corrected[m.remote_index] - ev[m.local_index].time.0 as f64));
        }
        samples.sort_by_key(|s| s.0);
        let u = servo_update(&model, &samples);
        if u.starved && rp.times.len() >= LOCK_LOSS_MIN_EVENTS {
            self.starved += 1;
        } else if !u.starved {
            self.starved = 0;
        }
        if self.starved >= LOCK_LOSS_EPOCHS {
            self.model = None;
            self.starved = 0;
            report.lock_losses += 1;
        } else {
            self.model = Some(u.model);
        }
        report.final_model = self.model;
        let keep_from = corrected[corrected.len() - 1] - MAX_PRIOR_OFFSET as f64;
        local.prune_before(lo.min(keep_from));
        let floor = local.base;
        self.used.retain(|&i| i >= floor);
        Ok(EpochMatch { kept: sifted.kept_remote, bits: sifted.bits, raw: accepted.len() as u64, accidentals })
    }
}

fn hello(role: Role, threshold: usize) -> Message {
    let h = Hello { version: PROTOCOL_VERSION, role: role.wire(), cluster_threshold: threshold as u32, first_epoch: 0 };
    Message::new(MessageType::Hello, h.encode())
}

fn check_hello(m: &Message, peer: Role, threshold: usize) -> Result<()> {
    let h = Hello::decode(&m.payload)?;
    if h.version != PROTOCOL_VERSION {
        return Err(Error::protocol(format!("peer speaks protocol version {}", h.version)));
    }
    if h.role != peer.wire() {
        return Err(Error::protocol("peer announced the same role"));
    }
    if h.cluster_threshold as usize != threshold {
        return Err(Error::protocol(format!(
            "cluster threshold mismatch: {} here, {} at peer",
            threshold, h.cluster_threshold
        )));
    }
    if h.first_epoch != 0 {
        return Err(Error::protocol("epoch numbering must start at clock zero"));
    }
    Ok(())
}

/// Everything a node needs besides its transport and events.
pub struct NodeOptions {
    pub window: WindowConfig,
    pub cluster_threshold: usize,
    pub metrics_interval: f64,
    pub master_seed: u64,
    pub delays: Option<[i64; 4]>,
    pub keys: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub faults: FaultConfig,
}

impl NodeOptions {
    pub fn from_config(cfg: &SessionConfig, role: Role) -> Self {
        let side = if role == Role::Alice { &cfg.alice } else { &cfg.bob };
        NodeOptions {
            window: cfg.window,
            cluster_threshold: cfg.session.cluster_threshold,
            metrics_interval: cfg.session.metrics_interval,
            master_seed: cfg.master_seed(),
            delays: cfg.session.equalize_delays.then_some(side.detector_delays),
            keys: cfg.session.keys.clone(),
            metrics: cfg.session.metrics.clone(),
            faults: cfg.faults.clone(),
        }
    }
}

fn cluster_record(
    cluster: &Cluster,
    report: &crate::ecorr::ReconciliationReport,
) -> Result<(ClusterRecord, Option<usize>)> {
    let r = cluster.len();
    let mut rec = ClusterRecord {
        id: cluster.id,
        r,
        errors: report.errors_found,
        disclosed: report.disclosed,
        eta: report.eta,
        e: 0,
        m: 0,
        verified: false,
        aborted: report.aborted,
    };
    if report.aborted || report.eta > 0.5 {
        return Ok((rec, None));
    }
    let budget = PaBudget::new(r, report.eta, report.disclosed)?;
    rec.e = budget.e;
    Ok((rec, budget.m))
}

/// Runs Alice's side of a session over `chan`.
pub fn run_alice<C: Channel + ?Sized>(chan: &mut C, events: EventChunks, opts: &NodeOptions) -> Result<SessionReport> {
    chan.send(hello(Role::Alice, opts.cluster_threshold))?;
    check_hello(&expect(chan, MessageType::Hello)?, Role::Bob, opts.cluster_threshold)?;

    let mut local = LocalBuffer::new(EventFeed::new(events, opts.delays));
    let mut matcher = Matcher::new(opts.window);
    let mut acc = ClusterAccumulator::new(opts.cluster_threshold);
    let mut eta = EtaEstimator::default();
    let mut clock = MetricsClock::new(opts.metrics_interval);
    let mut sink = MetricsSink::new(opts.metrics.as_deref())?;
    let mut keys = KeyWriter::create(opts.keys.as_deref())?;
    let mut report = SessionReport::default();

    loop {
        let m = chan.recv()?;
        match m.kind {
            MessageType::Timing => {
                let packet = decode_timing(&m.payload)?;
                let times = packet.times();
                let rp = RemotePacket { packet, times };
                let epoch = rp.packet.epoch;
                for row in clock.advance(epoch_seconds(epoch)) {
                    chan.send(Message::new(MessageType::Metrics, row.encode()))?;
                    sink.push(row)?;
                }
                let em = matcher.process(&mut local, &rp, &mut report)?;
                clock.touch(rp.times[rp.times.len() - 1].as_secs_f64());
                report.epochs += 1;
                report.raw_coincidences += em.raw;
                report.accidentals += em.accidentals;
                report.sifted_bits += em.bits.len() as u64;
                clock.counts.raw += em.raw;
                clock.counts.accidentals += em.accidentals;
                clock.counts.sifted += em.bits.len() as u64;
                let reply = CoincReply { epoch, kept: em.kept };
                chan.send(Message::new(MessageType::CoincReply, reply.encode()?))?;
                if let Some(cluster) = acc.push(epoch, &em.bits) {
                    let rec = alice_cluster(chan, cluster, opts, &mut eta, &mut keys)?;
                    clock.counts.errors += rec.errors as u64;
                    clock.counts.reconciled += rec.r as u64;
                    if rec.verified {
                        clock.counts.secret += rec.m as u64;
                        report.secret_bits += rec.m as u64;
                    } else if rec.m > 0 {
                        clock.counts.mismatched += 1;
                        report.mismatched_clusters += 1;
                    }
                    report.clusters.push(rec);
                }
            }
            MessageType::Bye => {
                if let Some(row) = clock.finish() {
                    chan.send(Message::new(MessageType::Metrics, row.encode()))?;
                    sink.push(row)?;
                }
                chan.send(Message::bye())?;
                report.leftover_bits = acc.finish();
                return Ok(report);
            }
            other => return Err(Error::protocol(format!("unexpected {other:?} while streaming"))),
        }
    }
}

fn alice_cluster<C: Channel + ?Sized>(
    chan: &mut C,
    cluster: Cluster,
    opts: &NodeOptions,
    eta: &mut EtaEstimator,
    keys: &mut KeyWriter,
) -> Result<ClusterRecord> {
    let id = cluster.id;
    let seed = derive_seed(opts.master_seed, id, SEED_PERMUTE);
    let (bits, ec) = reconcile_alice(chan, id, cluster.key.bits.clone(), seed, eta.estimate())?;
    let (mut rec, m) = cluster_record(&cluster, &ec)?;
    if !ec.aborted {
        eta.update(ec.eta);
    }
    let m = m.unwrap_or(0);
    let hash_seed = derive_seed(opts.master_seed, id, SEED_HASH);
    chan.send(Message::new(MessageType::PaSeed, PaSeed { cluster: id, m: m as u32, seed: hash_seed }.encode()))?;
    rec.m = m;
    if m == 0 {
        return Ok(rec);
    }
    let key = corrected_buffer(bits, &ec);
    let fin = toeplitz_compress(&key.bits, hash_seed, m)?;
    let digest = key_digest(&fin);
    chan.send(Message::new(MessageType::KeyHash, KeyHash { cluster: id, digest }.encode()))?;
    let theirs = KeyHash::decode(&expect(chan, MessageType::KeyHash)?.payload)?;
    if theirs.cluster != id {
        return Err(Error::protocol(format!("KEY_HASH for cluster {}, expected {id}", theirs.cluster)));
    }
    rec.verified = theirs.digest == digest;
    if rec.verified {
        keys.append(id, &fin)?;
    }
    Ok(rec)
}

/// Splits Bob's stream into complete epochs with strictly increasing times.
struct EpochAssembler {
    feed: EventFeed,
    pending: VecDeque<DetectionEvent>,
    last: Option<u64>,
    exhausted: bool,
}

impl EpochAssembler {
    fn new(feed: EventFeed) -> Self {
        EpochAssembler { feed, pending: VecDeque::new(), last: None, exhausted: false }
    }

    fn next_epoch(&mut self) -> Result<Option<Vec<DetectionEvent>>> {
        loop {
            if let (Some(first), Some(back)) = (self.pending.front(), self.pending.back()) {
                let epoch = epoch_of(first.time);
                if epoch_of(back.time) > epoch || self.exhausted {
                    let n = self.pending.iter().take_while(|e| epoch_of(e.time) == epoch).count();
                    return Ok(Some(self.pending.drain(..n).collect()));
                }
            } else if self.exhausted {
                return Ok(None);
            }
            match self.feed.next_chunk()? {
                Some(chunk) => {
                    for ev in chunk {
                        if self.last.is_some_and(|l| ev.time.0 <= l) {
                            continue;
                        }
                        self.last = Some(ev.time.0);
                        self.pending.push_back(ev);
                    }
                }
                None => self.exhausted = true,
            }
        }
    }
}

/// Runs Bob's side of a session over `chan`.
pub fn run_bob<C: Channel + ?Sized>(chan: &mut C, events: EventChunks, opts: &NodeOptions) -> Result<SessionReport> {
    chan.send(hello(Role::Bob, opts.cluster_threshold))?;
    check_hello(&expect(chan, MessageType::Hello)?, Role::Alice, opts.cluster_threshold)?;

    let mut epochs = EpochAssembler::new(EventFeed::new(events, opts.delays));
    let mut acc = ClusterAccumulator::new(opts.cluster_threshold);
    let mut eta = EtaEstimator::default();
    let mut sink = MetricsSink::new(opts.metrics.as_deref())?;
    let mut keys = KeyWriter::create(opts.keys.as_deref())?;
    let mut report = SessionReport::default();
    let mut verified = 0u32;

    while let Some(events) = epochs.next_epoch()? {
        let packet = packetize(&events)?.pop().expect("one epoch yields one packet");
        let epoch = packet.epoch;
        chan.send(Message::new(MessageType::Timing, encode_timing(&packet)?))?;
        let reply = loop {
            let m = chan.recv()?;
            match m.kind {
                MessageType::Metrics => sink.push(MetricsRow::decode(&m.payload)?)?,
                MessageType::CoincReply => break CoincReply::decode(&m.payload)?,
                other => return Err(Error::protocol(format!("unexpected {other:?} awaiting COINC_REPLY"))),
            }
        };
        if reply.epoch != epoch {
            return Err(Error::protocol(format!("COINC_REPLY for epoch {}, expected {}", reply.epoch.0, epoch.0)));
        }
        let bits = remote_bits(&reply.kept, &events)?;
        report.epochs += 1;
        report.sifted_bits += bits.len() as u64;
        if let Some(cluster) = acc.push(epoch, &bits) {
            let rec = bob_cluster(chan, cluster, opts, &mut eta, &mut keys)?;
            if rec.verified {
                report.secret_bits += rec.m as u64;
                verified += 1;
            } else if rec.m > 0 {
                report.mismatched_clusters += 1;
            }
            report.clusters.push(rec);
            if opts.faults.bob_disconnect_after.is_some_and(|n| verified >= n) {
                return Err(Error::ChannelClosed);
            }
        }
    }
    chan.send(Message::bye())?;
    loop {
        let m = chan.recv()?;
        match m.kind {
            MessageType::Metrics => sink.push(MetricsRow::decode(&m.payload)?)?,
            MessageType::Bye => break,
            other => return Err(Error::protocol(format!("unexpected {other:?} after BYE"))),
        }
    }
    report.leftover_bits = acc.finish();
    Ok(report)
}

fn bob_cluster<C: Channel + ?Sized>(
    chan: &mut C,
    cluster: Cluster,
    opts: &NodeOptions,
    eta: &mut EtaEstimator,
    keys: &mut KeyWriter,
) -> Result<ClusterRecord> {
    let id = cluster.id;
    let (mut bits, ec) = reconcile_bob(chan, id, cluster.key.bits.clone(), eta.estimate())?;
    let (mut rec, m) = cluster_record(&cluster, &ec)?;
    if !ec.aborted {
        eta.update(ec.eta);
    }
    let m = m.unwrap_or(0);
    let pa = PaSeed::decode(&expect(chan, MessageType::PaSeed)?.payload)?;
    if pa.cluster != id || pa.m as usize != m {
        return Err(Error::protocol(format!(
            "PA_SEED cluster {} m {} disagrees with local cluster {id} m {m}",
            pa.cluster, pa.m
        )));
    }
    rec.m = m;
    if m == 0 {
        return Ok(rec);
    }
    if opts.faults.flip_bob_bit.contains(&id) {
        bits[0] ^= 1;
    }
    let fin = toeplitz_compress(&bits, pa.seed, m)?;
    let digest = key_digest(&fin);
    let theirs = KeyHash::decode(&expect(chan, MessageType::KeyHash)?.payload)?;
    if theirs.cluster != id {
        return Err(Error::protocol(format!("KEY_HASH for cluster {}, expected {id}", theirs.cluster)));
    }
    chan.send(Message::new(MessageType::KeyHash, KeyHash { cluster: id, digest }.encode()))?;
    rec.verified = theirs.digest == digest;
    if rec.verified {
        keys.append(id, &fin)?;
    }
    Ok(rec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopbackReport {
    pub alice: SessionReport,
    pub bob: SessionReport,
    pub metrics: Vec<MetricsRow>,
}

impl LoopbackReport {
    pub fn alice_keys_path(dir: &Path) -> PathBuf {
        dir.join("alice.etky")
    }

    pub fn bob_keys_path(dir: &Path) -> PathBuf {
        dir.join("bob.etky")
    }
}

fn events_for(cfg: &SessionConfig, role: Role, link: &LinkConfig) -> Result<Option<EventChunks>> {
    let path = if role == Role::Alice { &cfg.session.alice_stream } else { &cfg.session.bob_stream };
    path.as_deref()
        .map(file_events)
        .transpose()
        .map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("cannot open stream file: {io}")),
            e => e,
        })
        .and_then(|f| match f {
            Some(f) => Ok(Some(f)),
            None => {
                link.validate()?;
                Ok(None)
            }
        })
}

/// Both pipelines in one process over an in-memory channel. With a
/// `keys` directory, writes `alice.etky` and `bob.etky` into it.
pub fn run_loopback(cfg: &SessionConfig) -> Result<LoopbackReport> {
    cfg.validate()?;
    let link = cfg.link();
    let mut a_opts = NodeOptions::from_config(cfg, Role::Alice);
    let mut b_opts = NodeOptions::from_config(cfg, Role::Bob);
    if let Some(dir) = &cfg.session.keys {
        std::fs::create_dir_all(dir)?;
        a_opts.keys = Some(LoopbackReport::alice_keys_path(dir));
        b_opts.keys = Some(LoopbackReport::bob_keys_path(dir));
    }
    b_opts.metrics = None;

    let a_file = events_for(cfg, Role::Alice, &link)?;
    let b_file = events_for(cfg, Role::Bob, &link)?;
    let mut sim_handle = None;
    let (a_events, b_events) = match (a_file, b_file) {
        (Some(a), Some(b)) => (a, b),
        (a, b) => {
            let (ta, ra) = mpsc::sync_channel::<Vec<DetectionEvent>>(SIM_QUEUE_SLICES);
            let (tb, rb) = mpsc::sync_channel::<Vec<DetectionEvent>>(SIM_QUEUE_SLICES);
            let mut sim = LinkSimulator::new(&link)?;
            let need_a = a.is_none();
            let need_b = b.is_none();
            sim_handle = Some(thread::spawn(move || {
                let (mut a_open, mut b_open) = (need_a, need_b);
                while let Some(s) = sim.next_slice() {
                    if a_open && ta.send(s.alice).is_err() {
                        a_open = false;
                    }
                    if b_open && tb.send(s.bob).is_err() {
                        b_open = false;
                    }
                    if !a_open && !b_open {
                        break;
                    }
                }
            }));
            (a.unwrap_or_else(|| receiver_events(ra)), b.unwrap_or_else(|| receiver_events(rb)))
        }
    };

    let (mut ca, mut cb) = MemoryChannel::pair();
    let alice = thread::spawn(move || {
        let r = run_alice(&mut ca, a_events, &a_opts);
        drop(ca);
        r
    });
    let bob = run_bob(&mut cb, b_events, &b_opts);
    drop(cb);
    let alice = alice.join().map_err(|_| Error::protocol("alice pipeline panicked"))?;
    if let Some(h) = sim_handle {
        h.join().map_err(|_| Error::protocol("simulator panicked"))?;
    }
    let (alice, bob) = match (alice, bob) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(Error::ChannelClosed), Err(e)) | (Err(e), _) | (_, Err(e)) => return Err(e),
    };
    let metrics = metrics_rows_of(cfg, &alice)?;
    Ok(LoopbackReport { alice, bob, metrics })
}

fn metrics_rows_of(cfg: &SessionConfig, _alice: &SessionReport) -> Result<Vec<MetricsRow>> {
    match &cfg.session.metrics {
        Some(p) => read_metrics(&std::fs::read_to_string(p)?),
        None => Ok(Vec::new()),
    }
}

fn connect(addr: &str, timeout: f64) -> Result<TcpStream> {
    let deadline = Instant::now() + Duration::from_secs_f64(timeout);
    let addrs: Vec<_> = addr.to_socket_addrs()?.collect();
    loop {
        let mut last = None;
        for a in &addrs {
            match TcpStream::connect(a) {
                Ok(s) => return Ok(s),
                Err(e) => last = Some(e),
            }
        }
        if Instant::now() >= deadline {
            return Err(last.map_or(Error::ChannelClosed, Error::Io));
        }
        thread::sleep(Duration::from_millis(50));
    }
}

/// One party of a two-process session. Alice listens on `session.peer`,
/// Bob connects to it.
pub fn run_node(cfg: &SessionConfig, role: Role) -> Result<SessionReport> {
    cfg.validate()?;
    let peer = cfg.session.peer.as_deref().ok_or_else(|| Error::Config("node mode needs a peer address".into()))?;
    let link = cfg.link();
    let events = match events_for(cfg, role, &link)? {
        Some(e) => e,
        None => simulated_events(&link, role)?,
    };
    let opts = NodeOptions::from_config(cfg, role);
    match role {
        Role::Alice => {
            let listener = TcpListener::bind(peer)?;
            let (stream, _) = listener.accept()?;
            stream.set_nodelay(true)?;
            run_alice(&mut StreamChannel::new(stream), events, &opts)
        }
        Role::Bob => {
            let stream = connect(peer, cfg.session.connect_timeout)?;
            stream.set_nodelay(true)?;
            run_bob(&mut StreamChannel::new(stream), events, &opts)
        }
        Role::Loopback => Err(Error::Config("loopback is not a node role".into())),
    }
}

/// Writes both simulated streams to `alice.etkd` and `bob.etkd` in `dir`.
pub fn record_streams(cfg: &SessionConfig, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    let pa = dir.join("alice.etkd");
    let pb = dir.join("bob.etkd");
    let mut wa = StreamWriter::new(BufWriter::new(File::create(&pa)?), crate::physim::Side::Alice)?;
    let mut wb = StreamWriter::new(BufWriter::new(File::create(&pb)?), crate::physim::Side::Bob)?;
    let mut sim = LinkSimulator::new(&cfg.link())?;
    while let Some(s) = sim.next_slice() {
        for ev in &s.alice {
            wa.push(ev)?;
        }
        for ev in &s.bob {
            wb.push(ev)?;
        }
    }
    wa.into_inner().flush()?;
    wb.into_inner().flush()?;
    Ok((pa, pb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_overrides() {
        let cfg = SessionConfig::parse("[session]\nseed = 7\nduration = 3.5\n\n[bob]\nclock_drift = 1e-7\n").unwrap();
        assert_eq!(cfg.session.cluster_threshold, 5_000);
        assert_eq!(cfg.window, WindowConfig::default());
        let link = cfg.link();
        assert_eq!(link.source.rng_seed, 7);
        assert_eq!(link.source.duration, 3.5);
        assert_eq!(link.bob.clock_drift, 1e-7);
        assert_eq!(link.alice.dark_rate, 1_000.0);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(matches!(SessionConfig::parse("[session]\nbogus = 1\n"), Err(Error::Config(_))));
        assert!(matches!(SessionConfig::parse("[window]\naccept_half_width = 99\n"), Err(Error::Config(_))));
        assert!(matches!(SessionConfig::parse("[alice]\nefficiency = 2.0\n"), Err(Error::Config(_))));
        assert!(matches!(SessionConfig::parse("not toml ["), Err(Error::Config(_))));
    }

    #[test]
    fn metrics_row_roundtrips() {
        let row = MetricsRow {
            t_s: 10.0,
            raw_cps: 2_200.5,
            sifted_cps: 1_100.25,
            secret_cps: 560.0,
            qber: 0.0512,
            accidental_cps: 6.4,
            mismatched_clusters: 1,
        };
        assert_eq!(MetricsRow::decode(&row.encode()).unwrap(), row);
        let parsed = MetricsRow::parse_csv(&row.csv()).unwrap();
        assert_eq!(parsed.mismatched_clusters, 1);
        assert!((parsed.qber - row.qber).abs() < 1e-9);
        assert!(read_metrics(METRICS_HEADER).unwrap().is_empty());
        assert!(read_metrics("t,x\n").is_err());
    }

    #[test]
    fn metrics_clock_carries_qber_and_fills_gaps() {
        let mut c = MetricsClock::new(10.0);
        assert!(c.advance(0.5).is_empty());
        c.counts.reconciled = 1_000;
        c.counts.errors = 50;
        c.counts.sifted = 1_000;
        let rows = c.advance(31.0);
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].t_s, 0.0);
        assert!((rows[0].sifted_cps - 100.0).abs() < 1e-12);
        assert!(rows.iter().all(|r| (r.qber - 0.05).abs() < 1e-12));
        assert_eq!(rows[2].sifted_cps, 0.0);
        let last = c.finish().unwrap();
        assert_eq!(last.t_s, 30.0);
        assert!(c.finish().is_none());
    }

    #[test]
    fn key_file_roundtrip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.etky");
        let mut w = KeyWriter::create(Some(&p)).unwrap();
        w.append(3, &[1, 0, 1, 1, 0, 0, 1, 0, 1]).unwrap();
        w.append(4, &[]).unwrap();
        drop(w);
        let keys = read_key_file(&p).unwrap();
        assert_eq!(
            keys,
            vec![
                KeyRecord { cluster: 3, bits: vec![1, 0, 1, 1, 0, 0, 1, 0, 1] },
                KeyRecord { cluster: 4, bits: vec![] }
            ]
        );
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..6], b"ETKY\x01\x00");
        assert!(read_keys(&bytes[..bytes.len() - 9]).is_err());
        assert!(read_keys(&b"ETKX\x01\x00"[..]).is_err());
    }

    #[test]
    fn seeds_differ_per_cluster_and_purpose() {
        let a = derive_seed(1, 0, SEED_PERMUTE);
        assert_ne!(a, derive_seed(1, 1, SEED_PERMUTE));
        assert_ne!(a, derive_seed(1, 0, SEED_HASH));
        assert_ne!(a, derive_seed(2, 0, SEED_PERMUTE));
        assert_eq!(a, derive_seed(1, 0, SEED_PERMUTE));
    }

    #[test]
    fn feed_equalization_keeps_order_across_chunks() {
        let raw: Vec<DetectionEvent> = (0..1_000u64).map(|i| DetectionEvent::new(100 + i * 3, (i % 4) as u8)).collect();
        let chunks: Vec<Result<Vec<DetectionEvent>>> = raw.chunks(37).map(|c| Ok(c.to_vec())).collect();
        let mut feed = EventFeed::new(Box::new(chunks.into_iter()), Some([0, 10, -5, 2]));
        let mut out = Vec::new();
        while let Some(c) = feed.next_chunk().unwrap() {
            out.extend(c);
        }
        assert_eq!(out, crate::coinc::equalize(&raw, &[0, 10, -5, 2]));
    }

    #[test]
    fn assembler_splits_epochs_and_drops_repeats() {
        let e = crate::types::EPOCH_TICKS;
        let raw = [
            DetectionEvent::new(5, 0),
            DetectionEvent::new(5, 1),
            DetectionEvent::new(9, 2),
            DetectionEvent::new(e + 1, 3),
            DetectionEvent::new(3 * e, 0),
        ];
        let chunks: Vec<Result<Vec<DetectionEvent>>> = vec![Ok(raw[..2].to_vec()), Ok(raw[2..].to_vec())];
        let mut asm = EpochAssembler::new(EventFeed::new(Box::new(chunks.into_iter()), None));
        let sizes: Vec<usize> = std::iter::from_fn(|| asm.next_epoch().unwrap().map(|v| v.len())).collect();
        assert_eq!(sizes, vec![2, 1, 1]);
    }
}
