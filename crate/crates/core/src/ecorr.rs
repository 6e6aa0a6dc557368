//! Interactive error correction: cluster accumulation, the CASCADE pass
//! structure with backtracking, BICONF confirmation rounds and exact
//! disclosed-parity accounting.
//!
//! Both parties run an identical [`CascadeEngine`]. The engine decides which
//! parities are compared in every round from nothing but the shared
//! permutation seed and the sequence of mismatch flags, so Alice only ever
//! discloses parities of her own key and Bob only ever discloses which
//! comparisons failed. Bob flips bits toward Alice's key.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::privamp::SplitMix64;
use crate::types::{EpochIndex, KeyBuffer, KeyStage};
use crate::wire::{expect, Channel, EcParity, EcPermuteSeed, Message, MessageType};

pub const DEFAULT_CLUSTER_THRESHOLD: usize = 5_000;
pub const CASCADE_PASSES: usize = 4;
pub const BICONF_CLEAN_ROUNDS: usize = 12;
pub const DEFAULT_ETA: f64 = 0.05;
pub const MIN_BLOCK: usize = 8;
/// Upper bound on confirmation rounds per cluster. Reaching it aborts the
/// cluster.
pub const MAX_BICONF_ROUNDS: usize = 4_096;

/// A reconciliation unit of collated sifted bits.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: u32,
    pub key: KeyBuffer,
    pub epochs: Vec<EpochIndex>,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.key.is_empty()
    }
}

/// Collates sifted bits, epoch by epoch, into clusters of at least
/// `threshold` bits. An epoch's bits are never split across clusters.
#[derive(Debug, Clone)]
pub struct ClusterAccumulator {
    threshold: usize,
    bits: Vec<u8>,
    epochs: Vec<EpochIndex>,
    next_id: u32,
}

impl ClusterAccumulator {
    pub fn new(threshold: usize) -> Self {
        ClusterAccumulator { threshold: threshold.max(1), bits: Vec::new(), epochs: Vec::new(), next_id: 0 }
    }

    pub fn push(&mut self, epoch: EpochIndex, bits: &[u8]) -> Option<Cluster> {
        if !bits.is_empty() {
            self.bits.extend_from_slice(bits);
            if self.epochs.last() != Some(&epoch) {
                self.epochs.push(epoch);
            }
        }
        (self.bits.len() >= self.threshold).then(|| {
            let id = self.next_id;
            self.next_id += 1;
            Cluster {
                id,
                key: KeyBuffer::sifted(std::mem::take(&mut self.bits)),
                epochs: std::mem::take(&mut self.epochs),
            }
        })
    }

    pub fn pending_bits(&self) -> usize {
        self.bits.len()
    }

    /// Ends the session; returns the number of bits left unreconciled.
    pub fn finish(self) -> usize {
        self.bits.len()
    }
}

/// Exponentially weighted estimate of the error fraction, used to size the
/// first CASCADE pass.
#[derive(Debug, Clone, Copy)]
pub struct EtaEstimator {
    weight: f64,
    value: Option<f64>,
}

impl Default for EtaEstimator {
    fn default() -> Self {
        EtaEstimator { weight: 0.5, value: None }
    }
}

impl EtaEstimator {
    pub fn new(weight: f64) -> Self {
        EtaEstimator { weight, value: None }
    }

    pub fn update(&mut self, eta: f64) {
        self.value = Some(match self.value {
            None => eta,
            Some(v) => self.weight * eta + (1.0 - self.weight) * v,
        });
    }

    pub fn estimate(&self) -> f64 {
        self.value.unwrap_or(DEFAULT_ETA)
    }
}

/// EWMA over `history` (oldest first); 0.05 without history.
pub fn eta_estimate(history: &[f64], weight: f64) -> f64 {
    let mut est = EtaEstimator::new(weight);
    for &h in history {
        est.update(h);
    }
    est.estimate()
}

/// First-pass block size: clamp(round(0.73 / eta), 8, r / 2).
pub fn initial_block_size(r: usize, eta_est: f64) -> usize {
    let hi = (r / 2).max(1);
    let lo = MIN_BLOCK.min(hi);
    let k = if eta_est > 0.0 { (0.73 / eta_est).round() } else { f64::INFINITY };
    if k.is_nan() {
        return hi;
    }
    (k.min(hi as f64) as usize).clamp(lo, hi)
}

/// One parity comparison requested in a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Query {
    /// Positions `lo..hi` of pass `pass`'s permuted order.
    Range { pass: u8, lo: u32, hi: u32 },
    /// Entries `lo..hi` of the current confirmation subset.
    Subset { lo: u32, hi: u32 },
}

const SUBSET_PASS: u8 = u8::MAX;

#[derive(Debug, Clone, Copy)]
struct Search {
    pass: u8,
    lo: u32,
    hi: u32,
    /// Cleared when a flip lands inside `lo..hi`, which leaves the interval
    /// with even error parity.
    live: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Awaiting {
    Nothing,
    TopLevel(u8),
    Bisect,
    Confirm,
}

/// Per-pass slice of the transcript.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PassSummary {
    pub block_size: usize,
    pub block_parities: usize,
    pub bisect_parities: usize,
    pub errors: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReconciliationReport {
    pub r: usize,
    pub errors_found: usize,
    /// Parity bits disclosed; one per comparison.
    pub disclosed: usize,
    pub eta: f64,
    pub passes: Vec<PassSummary>,
    /// Confirmation stage, reported like a pass with `block_size` 0.
    pub biconf: PassSummary,
    pub biconf_rounds: usize,
    pub rounds: usize,
    /// Confirmation did not settle; the cluster yields no key.
    pub aborted: bool,
}

/// Deterministic CASCADE + BICONF state machine shared by both parties.
pub struct CascadeEngine {
    r: usize,
    block_sizes: Vec<usize>,
    perms: Vec<Vec<u32>>,
    inv: Vec<Vec<u32>>,
    err_par: Vec<Vec<bool>>,
    started: usize,
    /// Known error parity of bisection-tree nodes, keyed (pass, lo, hi).
    cache: HashMap<(u8, u32, u32), bool>,
    pending: BTreeSet<(u8, u32)>,
    active: Vec<Search>,
    queries: Vec<Query>,
    /// Search index of each bisect query.
    query_owner: Vec<usize>,
    awaiting: Awaiting,
    subset_rng: SplitMix64,
    subset: Vec<u32>,
    clean_rounds: usize,
    flips: Vec<u32>,
    report: ReconciliationReport,
}

impl CascadeEngine {
    pub fn new(r: usize, eta_est: f64, seed: u64) -> Self {
        let k1 = initial_block_size(r, eta_est);
        let mut g = SplitMix64::new(seed);
        let mut perms = Vec::with_capacity(CASCADE_PASSES);
        let mut inv = Vec::with_capacity(CASCADE_PASSES);
        let mut block_sizes = Vec::with_capacity(CASCADE_PASSES);
        for pass in 0..CASCADE_PASSES {
            let mut p: Vec<u32> = (0..r as u32).collect();
            if pass > 0 {
                for i in (1..r).rev() {
                    let j = g.below(i + 1);
                    p.swap(i, j);
                }
            }
            let mut q = vec![0u32; r];
            for (pos, &orig) in p.iter().enumerate() {
                q[orig as usize] = pos as u32;
            }
            perms.push(p);
            inv.push(q);
            block_sizes.push(k1.saturating_mul(1 << pass).min(r.max(1)));
        }
        let report = ReconciliationReport {
            r,
            passes: block_sizes.iter().map(|&k| PassSummary { block_size: k, ..Default::default() }).collect(),
            ..Default::default()
        };
        CascadeEngine {
            r,
            err_par: vec![Vec::new(); CASCADE_PASSES],
            block_sizes,
            perms,
            inv,
            started: 0,
            cache: HashMap::new(),
            pending: BTreeSet::new(),
            active: Vec::new(),
            queries: Vec::new(),
            query_owner: Vec::new(),
            awaiting: Awaiting::Nothing,
            subset_rng: g,
            subset: Vec::new(),
            clean_rounds: 0,
            flips: Vec::new(),
            report,
        }
    }

    pub fn len(&self) -> usize {
        self.r
    }

    pub fn is_empty(&self) -> bool {
        self.r == 0
    }

    fn block_bounds(&self, pass: usize, block: usize) -> (u32, u32) {
        let k = self.block_sizes[pass];
        let lo = block * k;
        (lo as u32, ((lo + k).min(self.r)) as u32)
    }

    fn blocks(&self, pass: usize) -> usize {
        self.r.div_ceil(self.block_sizes[pass])
    }

    /// Queries of the coming round, or `None` once reconciliation is done.
    pub fn next_round(&mut self) -> Result<Option<&[Query]>> {
        if self.awaiting == Awaiting::Nothing {
            self.prepare()?;
        }
        Ok(match self.awaiting {
            Awaiting::Nothing => None,
            _ => Some(&self.queries),
        })
    }

    fn prepare(&mut self) -> Result<()> {
        loop {
            if !self.active.is_empty() {
                self.descend();
                if !self.queries.is_empty() {
                    self.awaiting = Awaiting::Bisect;
                    return Ok(());
                }
                continue;
            }
            if let Some(&(pass, _)) = self.pending.iter().next() {
                let batch: Vec<(u8, u32)> = self.pending.iter().take_while(|(p, _)| *p == pass).copied().collect();
                for &(p, b) in &batch {
                    self.pending.remove(&(p, b));
                    let (lo, hi) = self.block_bounds(p as usize, b as usize);
                    self.active.push(Search { pass: p, lo, hi, live: true });
                }
                continue;
            }
            if self.started < CASCADE_PASSES {
                let pass = self.started;
                self.queries = (0..self.blocks(pass))
                    .map(|b| {
                        let (lo, hi) = self.block_bounds(pass, b);
                        Query::Range { pass: pass as u8, lo, hi }
                    })
                    .collect();
                self.awaiting = Awaiting::TopLevel(pass as u8);
                return Ok(());
            }
            if self.clean_rounds < BICONF_CLEAN_ROUNDS {
                if self.report.biconf_rounds >= MAX_BICONF_ROUNDS {
                    self.report.aborted = true;
                    self.awaiting = Awaiting::Nothing;
                    return Ok(());
                }
                self.draw_subset();
                self.queries = vec![Query::Subset { lo: 0, hi: self.subset.len() as u32 }];
                self.awaiting = Awaiting::Confirm;
                return Ok(());
            }
            self.awaiting = Awaiting::Nothing;
            return Ok(());
        }
    }

    fn draw_subset(&mut self) {
        self.subset.clear();
        let mut word = 0u64;
        for i in 0..self.r {
            if i % 64 == 0 {
                word = self.subset_rng.next_u64();
            }
            if (word >> (i % 64)) & 1 == 1 {
                self.subset.push(i as u32);
            }
        }
    }

    /// Walks every active search down through already-known node parities,
    /// flipping located errors, and emits one query per search that still
    /// needs a comparison.
    fn descend(&mut self) {
        self.queries.clear();
        self.query_owner.clear();
        let mut i = 0;
        while i < self.active.len() {
            let mut s = self.active[i];
            if !s.live {
                self.active.swap_remove(i);
                continue;
            }
            while s.hi - s.lo > 1 {
                let mid = s.lo + (s.hi - s.lo) / 2;
                let left = self.known(s.pass, s.lo, mid);
                let right = || self.known(s.pass, mid, s.hi).map(|p| !p);
                match left.or_else(right) {
                    Some(true) => s.hi = mid,
                    Some(false) => s.lo = mid,
                    None => break,
                }
            }
            self.active[i] = s;
            if s.hi - s.lo == 1 {
                self.active.swap_remove(i);
                let orig = self.original_index(s.pass, s.lo);
                self.flip(orig, s.pass);
                continue;
            }
            let mid = s.lo + (s.hi - s.lo) / 2;
            self.queries.push(if s.pass == SUBSET_PASS {
                Query::Subset { lo: s.lo, hi: mid }
            } else {
                Query::Range { pass: s.pass, lo: s.lo, hi: mid }
            });
            self.query_owner.push(i);
            i += 1;
        }
    }

    fn known(&self, pass: u8, lo: u32, hi: u32) -> Option<bool> {
        if pass == SUBSET_PASS {
            return None;
        }
        self.cache.get(&(pass, lo, hi)).copied()
    }

    fn original_index(&self, pass: u8, pos: u32) -> u32 {
        if pass == SUBSET_PASS {
            self.subset[pos as usize]
        } else {
            self.perms[pass as usize][pos as usize]
        }
    }

    fn flip(&mut self, orig: u32, found_in: u8) {
        self.flips.push(orig);
        for k in 0..self.active.len() {
            let s = self.active[k];
            let hit = if s.pass == SUBSET_PASS {
                self.subset[s.lo as usize..s.hi as usize].contains(&orig)
            } else {
                (s.lo..s.hi).contains(&self.inv[s.pass as usize][orig as usize])
            };
            if hit {
                self.active[k].live = false;
            }
        }
        self.report.errors_found += 1;
        match found_in {
            SUBSET_PASS => self.report.biconf.errors += 1,
            p => self.report.passes[p as usize].errors += 1,
        }
        for q in 0..self.started {
            let pos = self.inv[q][orig as usize];
            let b = pos as usize / self.block_sizes[q];
            self.err_par[q][b] ^= true;
            let key = (q as u8, b as u32);
            if self.err_par[q][b] {
                self.pending.insert(key);
            } else {
                self.pending.remove(&key);
            }
            // Every cached node on the path from the block root to `pos`
            // contains the flipped bit.
            let (mut lo, mut hi) = self.block_bounds(q, b);
            while hi - lo > 1 {
                let mid = lo + (hi - lo) / 2;
                if pos < mid {
                    hi = mid;
                } else {
                    lo = mid;
                }
                if let Some(v) = self.cache.get_mut(&(q as u8, lo, hi)) {
                    *v ^= true;
                }
            }
        }
    }

    /// Applies the mismatch flags of the current round and returns the key
    /// positions flipped as a consequence.
    pub fn advance(&mut self, flags: &[u8]) -> Result<Vec<u32>> {
        if self.awaiting == Awaiting::Nothing {
            return Err(Error::protocol("no round in progress"));
        }
        if flags.len() != self.queries.len() {
            return Err(Error::protocol(format!("expected {} flags, got {}", self.queries.len(), flags.len())));
        }
        let n = flags.len();
        self.report.disclosed += n;
        self.report.rounds += 1;
        let first_flip = self.flips.len();
        self.apply(flags)?;
        // Searches settled from cached parities flip bits too; run them now
        // so the caller sees every flip before the next round.
        if self.awaiting == Awaiting::Nothing {
            self.prepare()?;
        }
        Ok(self.flips[first_flip..].to_vec())
    }

    fn apply(&mut self, flags: &[u8]) -> Result<()> {
        let n = flags.len();
        match self.awaiting {
            Awaiting::TopLevel(pass) => {
                let p = pass as usize;
                self.report.passes[p].block_parities += n;
                self.err_par[p] = flags.iter().map(|&f| f & 1 == 1).collect();
                self.started = p + 1;
                for (b, &odd) in self.err_par[p].iter().enumerate() {
                    if odd {
                        self.pending.insert((pass, b as u32));
                    }
                }
            }
            Awaiting::Bisect => {
                let owners = std::mem::take(&mut self.query_owner);
                for (&owner, &flag) in owners.iter().zip(flags) {
                    let s = &mut self.active[owner];
                    let live = s.live;
                    let mid = s.lo + (s.hi - s.lo) / 2;
                    let left_odd = flag & 1 == 1;
                    if s.pass == SUBSET_PASS {
                        self.report.biconf.bisect_parities += 1;
                    } else {
                        self.report.passes[s.pass as usize].bisect_parities += 1;
                        let (pass, lo, hi) = (s.pass, s.lo, s.hi);
                        self.cache.insert((pass, lo, mid), left_odd);
                        if live {
                            self.cache.insert((pass, mid, hi), !left_odd);
                        }
                    }
                    let s = &mut self.active[owner];
                    if !live {
                        continue;
                    }
                    if left_odd {
                        s.hi = mid;
                    } else {
                        s.lo = mid;
                    }
                }
                // Resolve finished searches now so the flips are reported
                // together with this round.
                self.descend();
                if self.queries.is_empty() {
                    self.awaiting = Awaiting::Nothing;
                } else {
                    self.awaiting = Awaiting::Bisect;
                }
                return Ok(());
            }
            Awaiting::Confirm => {
                self.report.biconf_rounds += 1;
                self.report.biconf.block_parities += 1;
                if flags[0] & 1 == 1 {
                    self.clean_rounds = 0;
                    self.active.push(Search { pass: SUBSET_PASS, lo: 0, hi: self.subset.len() as u32, live: true });
                    self.descend();
                    if !self.queries.is_empty() {
                        self.awaiting = Awaiting::Bisect;
                        return Ok(());
                    }
                } else {
                    self.clean_rounds += 1;
                }
            }
            Awaiting::Nothing => unreachable!(),
        }
        self.queries.clear();
        self.awaiting = Awaiting::Nothing;
        Ok(())
    }

    /// Parities of `bits` for every query of the current round.
    pub fn parities(&self, bits: &[u8]) -> Vec<u8> {
        self.queries.iter().map(|q| self.parity(bits, q)).collect()
    }

    fn parity(&self, bits: &[u8], q: &Query) -> u8 {
        match *q {
            Query::Range { pass, lo, hi } => {
                self.perms[pass as usize][lo as usize..hi as usize].iter().fold(0, |acc, &i| acc ^ bits[i as usize])
            }
            Query::Subset { lo, hi } => {
                self.subset[lo as usize..hi as usize].iter().fold(0, |acc, &i| acc ^ bits[i as usize])
            }
        }
    }

    pub fn report(&self) -> ReconciliationReport {
        let mut r = self.report.clone();
        r.eta = if self.r == 0 { 0.0 } else { r.errors_found as f64 / self.r as f64 };
        r
    }

    pub fn flipped(&self) -> &[u32] {
        &self.flips
    }
}

/// Reference-side (Alice) driver: discloses her parities round by round.
pub struct AliceReconciler {
    cluster: u32,
    bits: Vec<u8>,
    engine: CascadeEngine,
    round: u16,
}

impl AliceReconciler {
    pub fn new(cluster: u32, bits: Vec<u8>, seed: u64, eta_est: f64) -> Self {
        let engine = CascadeEngine::new(bits.len(), eta_est, seed);
        AliceReconciler { cluster, bits, engine, round: 0 }
    }

    /// Parities for the next round, or `None` when reconciliation is done.
    pub fn next_message(&mut self) -> Result<Option<Message>> {
        if self.engine.next_round()?.is_none() {
            return Ok(None);
        }
        let bits = self.engine.parities(&self.bits);
        let p = EcParity { cluster: self.cluster, round: self.round, bits };
        Ok(Some(Message::new(MessageType::EcParity, p.encode())))
    }

    /// Consumes Bob's mismatch flags for the round just sent.
    pub fn handle_flags(&mut self, m: &Message) -> Result<()> {
        let n = match self.engine.next_round()? {
            Some(q) => q.len(),
            None => return Err(Error::protocol("flags received after reconciliation ended")),
        };
        let f = decode_round(m, n, self.cluster, self.round)?;
        self.engine.advance(&f.bits)?;
        self.round = self.round.wrapping_add(1);
        Ok(())
    }

    pub fn report(&self) -> ReconciliationReport {
        self.engine.report()
    }

    pub fn into_key(self) -> (Vec<u8>, ReconciliationReport) {
        let report = self.engine.report();
        (self.bits, report)
    }
}

/// Correcting-side (Bob) driver: answers each round with mismatch flags
/// and flips located errors in his key.
pub struct BobReconciler {
    cluster: u32,
    bits: Vec<u8>,
    engine: CascadeEngine,
    round: u16,
}

impl BobReconciler {
    pub fn new(cluster: u32, bits: Vec<u8>, seed: u64, eta_est: f64) -> Self {
        let engine = CascadeEngine::new(bits.len(), eta_est, seed);
        BobReconciler { cluster, bits, engine, round: 0 }
    }

    pub fn is_done(&mut self) -> Result<bool> {
        Ok(self.engine.next_round()?.is_none())
    }

    pub fn handle_parities(&mut self, m: &Message) -> Result<Message> {
        let n = match self.engine.next_round()? {
            Some(q) => q.len(),
            None => return Err(Error::protocol("parities received after reconciliation ended")),
        };
        let theirs = decode_round(m, n, self.cluster, self.round)?;
        let mine = self.engine.parities(&self.bits);
        let flags: Vec<u8> = mine.iter().zip(&theirs.bits).map(|(a, b)| a ^ b).collect();
        for pos in self.engine.advance(&flags)? {
            self.bits[pos as usize] ^= 1;
        }
        let reply = EcParity { cluster: self.cluster, round: self.round, bits: flags };
        self.round = self.round.wrapping_add(1);
        Ok(Message::new(MessageType::EcParity, reply.encode()))
    }

    pub fn into_key(self) -> (Vec<u8>, ReconciliationReport) {
        let report = self.engine.report();
        (self.bits, report)
    }
}

fn decode_round(m: &Message, n: usize, cluster: u32, round: u16) -> Result<EcParity> {
    if m.kind != MessageType::EcParity {
        return Err(Error::protocol(format!("expected EC_PARITY, got {:?}", m.kind)));
    }
    let p = EcParity::decode(&m.payload, n)?;
    if p.cluster != cluster || p.round != round {
        return Err(Error::protocol(format!(
            "EC_PARITY for cluster {} round {}, expected cluster {cluster} round {round}",
            p.cluster, p.round
        )));
    }
    Ok(p)
}

/// Runs Alice's half over a channel: announces the permutation seed, then
/// discloses parities until the engine finishes.
pub fn reconcile_alice<C: Channel + ?Sized>(
    chan: &mut C,
    cluster: u32,
    bits: Vec<u8>,
    seed: u64,
    eta_est: f64,
) -> Result<(Vec<u8>, ReconciliationReport)> {
    chan.send(Message::new(MessageType::EcPermuteSeed, EcPermuteSeed { cluster, seed }.encode()))?;
    let mut alice = AliceReconciler::new(cluster, bits, seed, eta_est);
    while let Some(m) = alice.next_message()? {
        chan.send(m)?;
        let reply = expect(chan, MessageType::EcParity)?;
        alice.handle_flags(&reply)?;
    }
    Ok(alice.into_key())
}

/// Runs Bob's half over a channel; returns his corrected key.
pub fn reconcile_bob<C: Channel + ?Sized>(
    chan: &mut C,
    cluster: u32,
    bits: Vec<u8>,
    eta_est: f64,
) -> Result<(Vec<u8>, ReconciliationReport)> {
    let m = expect(chan, MessageType::EcPermuteSeed)?;
    let seed = EcPermuteSeed::decode(&m.payload)?;
    if seed.cluster != cluster {
        return Err(Error::protocol(format!("permutation seed for cluster {}, expected {cluster}", seed.cluster)));
    }
    let mut bob = BobReconciler::new(cluster, bits, seed.seed, eta_est);
    while !bob.is_done()? {
        let m = expect(chan, MessageType::EcParity)?;
        let reply = bob.handle_parities(&m)?;
        chan.send(reply)?;
    }
    Ok(bob.into_key())
}

/// Who sent a transcript entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sender {
    Alice,
    Bob,
}

/// One EC_PARITY message as seen on the channel, with its bit count.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptEntry {
    pub from: Sender,
    pub message: Message,
    pub bits: usize,
}

/// Reconciles two in-process copies of a cluster, passing every message
/// through the wire encoding. Returns Bob's corrected key, the report and
/// the full EC_PARITY transcript.
pub fn cascade(
    alice_bits: &[u8],
    bob_bits: &[u8],
    seed: u64,
    eta_est: f64,
) -> Result<(Vec<u8>, ReconciliationReport, Vec<TranscriptEntry>)> {
    if alice_bits.len() != bob_bits.len() {
        return Err(Error::contract("clusters must have equal length"));
    }
    let mut alice = AliceReconciler::new(0, alice_bits.to_vec(), seed, eta_est);
    let mut bob = BobReconciler::new(0, bob_bits.to_vec(), seed, eta_est);
    let mut transcript = Vec::new();
    while let Some(m) = alice.next_message()? {
        let n = alice.engine.queries.len();
        let m = roundtrip(&m)?;
        transcript.push(TranscriptEntry { from: Sender::Alice, message: m.clone(), bits: n });
        let reply = roundtrip(&bob.handle_parities(&m)?)?;
        transcript.push(TranscriptEntry { from: Sender::Bob, message: reply.clone(), bits: n });
        alice.handle_flags(&reply)?;
    }
    if !bob.is_done()? {
        return Err(Error::protocol("parties disagree on reconciliation end"));
    }
    let (key, report) = bob.into_key();
    if report != alice.report() {
        return Err(Error::protocol("parties disagree on reconciliation report"));
    }
    Ok((key, report, transcript))
}

fn roundtrip(m: &Message) -> Result<Message> {
    let bytes = crate::wire::frame(m)?;
    crate::wire::unframe(&bytes)?.map(|(m, _)| m).ok_or_else(|| Error::protocol("short frame"))
}

/// Marks a key buffer as reconciled with the given report.
pub fn corrected_buffer(bits: Vec<u8>, report: &ReconciliationReport) -> KeyBuffer {
    KeyBuffer { bits, stage: KeyStage::Corrected, disclosed: report.disclosed, qber: report.eta }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy_pair(r: usize, eta: f64, seed: u64) -> (Vec<u8>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<u8> = (0..r).map(|_| rng.random::<bool>() as u8).collect();
        let b = a.iter().map(|&x| x ^ (rng.random::<f64>() < eta) as u8).collect();
        (a, b)
    }

    /// Error parity of a tree node, computed from the true keys.
    fn node_parity(e: &CascadeEngine, a: &[u8], b: &[u8], pass: u8, lo: u32, hi: u32) -> bool {
        let idx = if pass == SUBSET_PASS {
            &e.subset[lo as usize..hi as usize]
        } else {
            &e.perms[pass as usize][lo as usize..hi as usize]
        };
        idx.iter().fold(false, |acc, &i| acc ^ (a[i as usize] != b[i as usize]))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn engine_state_tracks_true_errors(r in 64usize..1_500, eta in 0.01f64..0.2, est in 0.01f64..0.2, seed: u64) {
            let (a, mut b) = noisy_pair(r, eta, seed);
            let mut e = CascadeEngine::new(r, est, seed ^ 1);
            let mut rounds = 0;
            while e.next_round().unwrap().is_some() {
                let f: Vec<u8> = e.parities(&a).iter().zip(e.parities(&b)).map(|(x, y)| x ^ y).collect();
                for p in e.advance(&f).unwrap() {
                    b[p as usize] ^= 1;
                }
                for (&(p, lo, hi), &v) in &e.cache {
                    prop_assert_eq!(node_parity(&e, &a, &b, p, lo, hi), v);
                }
                for s in e.active.iter().filter(|s| s.live) {
                    prop_assert!(node_parity(&e, &a, &b, s.pass, s.lo, s.hi));
                }
                for q in 0..e.started {
                    for blk in 0..e.blocks(q) {
                        let (lo, hi) = e.block_bounds(q, blk);
                        prop_assert_eq!(node_parity(&e, &a, &b, q as u8, lo, hi), e.err_par[q][blk]);
                    }
                }
                rounds += 1;
                prop_assert!(rounds < 2_000);
            }
            if !e.report().aborted {
                prop_assert_eq!(&a, &b);
            }
        }
    }

    #[test]
    fn accumulate_threshold() {
        let mut acc = ClusterAccumulator::new(5_000);
        assert!(acc.push(EpochIndex(0), &vec![1; 4_999]).is_none());
        assert_eq!(acc.finish(), 4_999);
    }

    #[test]
    fn accumulate_keeps_remainder_in_cluster() {
        let mut acc = ClusterAccumulator::new(5_000);
        let c = acc.push(EpochIndex(0), &vec![0; 12_000]).unwrap();
        assert_eq!(c.len(), 12_000);

        let mut acc = ClusterAccumulator::new(5_000);
        let input: Vec<u8> = (0..12_000).map(|i| (i % 3 == 0) as u8).collect();
        let mut out = Vec::new();
        for (e, chunk) in input.chunks(700).enumerate() {
            if let Some(c) = acc.push(EpochIndex(e as u32), chunk) {
                assert!(c.len() >= 5_000);
                out.push(c);
            }
        }
        let lens: Vec<usize> = out.iter().map(Cluster::len).collect();
        assert_eq!(lens, vec![5_600, 5_600]);
        assert_eq!(out[1].id, 1);
        let joined: Vec<u8> = out.iter().flat_map(|c| c.key.bits.clone()).collect();
        assert_eq!(&input[..joined.len()], &joined[..]);
        assert_eq!(acc.finish(), 800);
    }

    #[test]
    fn eta_estimate_examples() {
        assert_eq!(eta_estimate(&[], 0.5), 0.05);
        assert!((eta_estimate(&[0.054; 5], 0.5) - 0.054).abs() < 1e-15);
        assert!((eta_estimate(&[0.04, 0.06], 0.5) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn block_size_rule() {
        assert_eq!(initial_block_size(5_000, 0.05), 15);
        assert_eq!(initial_block_size(5_000, 0.054), 14);
        assert_eq!(initial_block_size(5_000, 0.5), 8);
        assert_eq!(initial_block_size(5_000, 0.0), 2_500);
        assert_eq!(initial_block_size(100, 0.001), 50);
    }

    #[test]
    fn identical_inputs_disclose_structure_only() {
        let (a, _) = noisy_pair(5_000, 0.0, 1);
        let (b, report, _) = cascade(&a, &a, 77, 0.05).unwrap();
        assert_eq!(a, b);
        assert_eq!(report.errors_found, 0);
        let blocks: usize = [15usize, 30, 60, 120].iter().map(|k| 5_000usize.div_ceil(*k)).sum();
        assert_eq!(report.disclosed, blocks + BICONF_CLEAN_ROUNDS);
    }

    #[test]
    fn single_error_is_found() {
        let (a, mut b) = noisy_pair(5_000, 0.0, 2);
        b[1234] ^= 1;
        let (fixed, report, _) = cascade(&a, &b, 5, 0.05).unwrap();
        assert_eq!(fixed, a);
        assert_eq!(report.errors_found, 1);
    }

    #[test]
    fn corrects_typical_noise() {
        for (i, eta) in [0.01, 0.03, 0.054, 0.08, 0.11].into_iter().enumerate() {
            let (a, b) = noisy_pair(5_000, eta, 10 + i as u64);
            let true_errors = a.iter().zip(&b).filter(|(x, y)| x != y).count();
            let (fixed, report, _) = cascade(&a, &b, i as u64, eta).unwrap();
            assert_eq!(fixed, a, "eta {eta}");
            assert_eq!(report.errors_found, true_errors);
        }
    }

    #[test]
    fn transcript_counts_match_report() {
        let (a, b) = noisy_pair(6_000, 0.05, 3);
        let (_, report, transcript) = cascade(&a, &b, 9, 0.05).unwrap();
        let alice_bits: usize = transcript.iter().filter(|e| e.from == Sender::Alice).map(|e| e.bits).sum();
        assert_eq!(alice_bits, report.disclosed);
        let per_pass: usize = report.passes.iter().map(|p| p.block_parities + p.bisect_parities).sum::<usize>()
            + report.biconf.block_parities
            + report.biconf.bisect_parities;
        assert_eq!(per_pass, report.disclosed);
    }

    #[test]
    fn deterministic_transcript() {
        let (a, b) = noisy_pair(5_000, 0.05, 4);
        let (_, r1, t1) = cascade(&a, &b, 42, 0.05).unwrap();
        let (_, r2, t2) = cascade(&a, &b, 42, 0.05).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(t1, t2);
    }

    #[test]
    fn wrong_flag_count_is_protocol_error() {
        let mut e = CascadeEngine::new(100, 0.05, 1);
        let n = e.next_round().unwrap().unwrap().len();
        assert!(e.advance(&vec![0; n + 1]).is_err());
    }

    #[test]
    fn channel_drivers_agree() {
        use crate::wire::MemoryChannel;
        let (a, b) = noisy_pair(5_000, 0.04, 5);
        let (mut ca, mut cb) = MemoryChannel::pair();
        let a2 = a.clone();
        let h = std::thread::spawn(move || reconcile_alice(&mut ca, 7, a2, 99, 0.04));
        let (fixed, rb) = reconcile_bob(&mut cb, 7, b, 0.04).unwrap();
        let (_, ra) = h.join().unwrap().unwrap();
        assert_eq!(fixed, a);
        assert_eq!(ra, rb);
    }

    #[test]
    fn closed_channel_aborts() {
        use crate::wire::MemoryChannel;
        let (a, _) = noisy_pair(5_000, 0.0, 6);
        let (mut ca, cb) = MemoryChannel::pair();
        drop(cb);
        assert!(matches!(reconcile_alice(&mut ca, 0, a, 1, 0.05), Err(Error::ChannelClosed)));
    }
}
