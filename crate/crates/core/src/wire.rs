//! Classical-channel wire format: epoch packetization of detection events,
//! Rice-coded timing packets, message framing and the fixed payload layouts
//! of every post-processing message. All multi-byte integers are little
//! endian; bit fields are packed most-significant-bit first.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::types::{detector_to_basis_bit, epoch_of, DetectionEvent, EpochIndex, Timestamp};

/// Bytes of the fixed timing-packet header: epoch u32, count u32,
/// first_time u64, rice_k u8.
pub const TIMING_HEADER_LEN: usize = 17;
pub const MAX_RICE_K: u8 = 40;

/// One epoch of events from the low-rate side: times as first absolute
/// stamp plus positive deltas, and one basis flag per event (1 = DA).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimingPacket {
    pub epoch: EpochIndex,
    pub first_time: Timestamp,
    pub deltas: Vec<u64>,
    pub basis_flags: Vec<bool>,
}

impl TimingPacket {
    pub fn count(&self) -> usize {
        self.basis_flags.len()
    }

    /// Absolute event times.
    pub fn times(&self) -> Vec<Timestamp> {
        let mut t = self.first_time.0;
        let mut out = Vec::with_capacity(self.count());
        out.push(Timestamp(t));
        for d in &self.deltas {
            t += d;
            out.push(Timestamp(t));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.basis_flags.is_empty() {
            return Err(Error::contract("timing packet holds no events"));
        }
        if self.deltas.len() + 1 != self.basis_flags.len() {
            return Err(Error::contract("delta count must be event count - 1"));
        }
        if epoch_of(self.first_time) != self.epoch {
            return Err(Error::contract("first event outside packet epoch"));
        }
        let mut t = self.first_time.0;
        for &d in &self.deltas {
            if d == 0 {
                return Err(Error::contract("zero delta in timing packet"));
            }
            t = t.checked_add(d).ok_or_else(|| Error::contract("timing packet overflows"))?;
        }
        if epoch_of(Timestamp(t)) != self.epoch {
            return Err(Error::contract("last event outside packet epoch"));
        }
        Ok(())
    }

    /// Rice parameter: round(log2(mean delta)) - 1, clamped to [0, 40].
    pub fn rice_parameter(&self) -> u8 {
        if self.deltas.is_empty() {
            return 0;
        }
        let mean = self.deltas.iter().map(|&d| d as f64).sum::<f64>() / self.deltas.len() as f64;
        let k = mean.log2().round() - 1.0;
        k.clamp(0.0, MAX_RICE_K as f64) as u8
    }
}

/// Drops every event that shares its tick with the previous one, leaving a
/// strictly increasing time sequence. Multi-clicks within one tick cannot
/// be told apart on the channel.
pub fn strict_times(events: &[DetectionEvent]) -> Vec<DetectionEvent> {
    let mut out: Vec<DetectionEvent> = Vec::with_capacity(events.len());
    for ev in events {
        if out.last().is_some_and(|last| last.time == ev.time) {
            continue;
        }
        out.push(*ev);
    }
    out
}

/// Splits a strictly time-ordered stream into one packet per non-empty
/// epoch. Only the basis of each event is carried, never its bit value.
pub fn packetize(events: &[DetectionEvent]) -> Result<Vec<TimingPacket>> {
    if !events.windows(2).all(|w| w[0].time < w[1].time) {
        return Err(Error::contract("packetize needs strictly increasing event times"));
    }
    let mut packets: Vec<TimingPacket> = Vec::new();
    let mut prev = 0u64;
    for ev in events {
        let (basis, _) = detector_to_basis_bit(ev.detector)?;
        let epoch = epoch_of(ev.time);
        match packets.last_mut() {
            Some(p) if p.epoch == epoch => {
                p.deltas.push(ev.time.0 - prev);
                p.basis_flags.push(basis.flag());
            }
            _ => packets.push(TimingPacket {
                epoch,
                first_time: ev.time,
                deltas: Vec::new(),
                basis_flags: vec![basis.flag()],
            }),
        }
        prev = ev.time.0;
    }
    Ok(packets)
}

#[derive(Default)]
struct BitWriter {
    bytes: Vec<u8>,
    used: u32,
}

impl BitWriter {
    fn push_bit(&mut self, bit: bool) {
        if self.used == 0 {
            self.bytes.push(0);
        }
        if bit {
            *self.bytes.last_mut().expect("byte pushed") |= 0x80 >> self.used;
        }
        self.used = (self.used + 1) % 8;
    }

    fn push_bits(&mut self, value: u64, n: u32) {
        for i in (0..n).rev() {
            self.push_bit((value >> i) & 1 == 1);
        }
    }

    fn push_unary(&mut self, q: u64) {
        for _ in 0..q {
            self.push_bit(true);
        }
        self.push_bit(false);
    }

    fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    /// Absolute bit position.
    pos: usize,
    /// Byte offset of `bytes[0]` within the whole buffer, for error reports.
    base: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8], base: usize) -> Self {
        BitReader { bytes, pos: 0, base }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() * 8 - self.pos
    }

    fn byte_offset(&self) -> usize {
        self.base + self.pos / 8
    }

    fn bit(&mut self) -> Result<bool> {
        if self.pos >= self.bytes.len() * 8 {
            return Err(Error::decode(self.byte_offset(), "truncated bit stream"));
        }
        let b = (self.bytes[self.pos / 8] >> (7 - self.pos % 8)) & 1 == 1;
        self.pos += 1;
        Ok(b)
    }

    fn bits(&mut self, n: u32) -> Result<u64> {
        let mut v = 0u64;
        for _ in 0..n {
            v = (v << 1) | self.bit()? as u64;
        }
        Ok(v)
    }

    fn unary(&mut self, limit: u64) -> Result<u64> {
        let mut q = 0u64;
        while self.bit()? {
            q += 1;
            if q > limit {
                return Err(Error::decode(self.byte_offset(), "unary run exceeds epoch span"));
            }
        }
        Ok(q)
    }

    fn align(&mut self) {
        self.pos = self.pos.div_ceil(8) * 8;
    }
}

/// Encodes a packet: fixed header, Rice-coded (delta - 1) values with the
/// per-packet parameter, zero padding to a byte boundary, then the basis
/// flags packed eight per byte.
pub fn encode_timing(p: &TimingPacket) -> Result<Vec<u8>> {
    p.validate()?;
    let count = u32::try_from(p.count()).map_err(|_| Error::contract("too many events for one packet"))?;
    let k = p.rice_parameter();
    let mut out = Vec::with_capacity(TIMING_HEADER_LEN + p.count() * 3);
    out.extend_from_slice(&p.epoch.0.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&p.first_time.0.to_le_bytes());
    out.push(k);
    let mut w = BitWriter::default();
    let mask = if k == 0 { 0 } else { (1u64 << k) - 1 };
    for &d in &p.deltas {
        let v = d - 1;
        w.push_unary(v >> k);
        w.push_bits(v & mask, k as u32);
    }
    out.extend(w.finish());
    let mut flags = BitWriter::default();
    for &f in &p.basis_flags {
        flags.push_bit(f);
    }
    out.extend(flags.finish());
    Ok(out)
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn read_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

/// Exact inverse of [`encode_timing`]. Any malformed buffer yields a decode
/// error carrying the byte offset where decoding failed.
pub fn decode_timing(b: &[u8]) -> Result<TimingPacket> {
    if b.len() < TIMING_HEADER_LEN {
        return Err(Error::decode(b.len(), "truncated timing header"));
    }
    let epoch = EpochIndex(read_u32(b, 0));
    let count = read_u32(b, 4) as usize;
    let first = read_u64(b, 8);
    let k = b[16];
    if count == 0 {
        return Err(Error::decode(4, "empty timing packet"));
    }
    if k > MAX_RICE_K {
        return Err(Error::decode(16, format!("rice parameter {k} out of range")));
    }
    if epoch_of(Timestamp(first)) != epoch {
        return Err(Error::decode(8, "first time outside epoch"));
    }
    let body = &b[TIMING_HEADER_LEN..];
    // Each delta costs at least k + 1 bits and each flag one bit.
    let min_bits = (count - 1) as u128 * (k as u128 + 1) + count as u128;
    if min_bits > body.len() as u128 * 8 {
        return Err(Error::decode(4, "event count exceeds payload"));
    }
    let epoch_end = ((epoch.0 as u64) << 32) | 0xFFFF_FFFF;
    let mut r = BitReader::new(body, TIMING_HEADER_LEN);
    let mut deltas = Vec::with_capacity(count - 1);
    let mut t = first;
    for _ in 1..count {
        let q = r.unary((epoch_end - t) >> k)?;
        let low = r.bits(k as u32)?;
        let v = (q << k) | low;
        let d = v + 1;
        if d > epoch_end - t {
            return Err(Error::decode(r.byte_offset(), "event outside epoch"));
        }
        t += d;
        deltas.push(d);
    }
    r.align();
    let flag_bytes = count.div_ceil(8);
    if r.remaining() / 8 != flag_bytes {
        return Err(Error::decode(
            r.byte_offset(),
            format!("expected {flag_bytes} flag bytes, found {}", r.remaining() / 8),
        ));
    }
    let mut basis_flags = Vec::with_capacity(count);
    for _ in 0..count {
        basis_flags.push(r.bit()?);
    }
    Ok(TimingPacket { epoch, first_time: Timestamp(first), deltas, basis_flags })
}

/// Channel message kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    Hello = 1,
    Timing = 2,
    CoincReply = 3,
    EcParity = 4,
    EcPermuteSeed = 5,
    PaSeed = 6,
    KeyHash = 7,
    Metrics = 8,
    Bye = 9,
}

impl MessageType {
    pub fn from_tag(tag: u8) -> Option<MessageType> {
        use MessageType::*;
        Some(match tag {
            1 => Hello,
            2 => Timing,
            3 => CoincReply,
            4 => EcParity,
            5 => EcPermuteSeed,
            6 => PaSeed,
            7 => KeyHash,
            8 => Metrics,
            9 => Bye,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: MessageType,
    pub payload: Vec<u8>,
}

pub const FRAME_HEADER_LEN: usize = 5;
/// Largest payload accepted when reading from a peer.
pub const MAX_PAYLOAD: usize = 1 << 28;

impl Message {
    pub fn new(kind: MessageType, payload: Vec<u8>) -> Self {
        Message { kind, payload }
    }

    pub fn bye() -> Self {
        Message::new(MessageType::Bye, Vec::new())
    }
}

/// `[u8 tag][u32 length LE][payload]`.
pub fn frame(m: &Message) -> Result<Vec<u8>> {
    let len = u32::try_from(m.payload.len()).map_err(|_| Error::protocol("payload length overflow"))?;
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + m.payload.len());
    out.push(m.kind as u8);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&m.payload);
    Ok(out)
}

/// Parses one frame from the front of `b`, returning the message and the
/// number of bytes consumed (payload length + 5). `Ok(None)` means more
/// bytes are needed.
pub fn unframe(b: &[u8]) -> Result<Option<(Message, usize)>> {
    if b.is_empty() {
        return Ok(None);
    }
    let kind = MessageType::from_tag(b[0]).ok_or_else(|| Error::protocol(format!("unknown tag {:#04x}", b[0])))?;
    if b.len() < FRAME_HEADER_LEN {
        return Ok(None);
    }
    let len = read_u32(b, 1) as usize;
    if len > MAX_PAYLOAD {
        return Err(Error::protocol(format!("payload length {len} exceeds limit")));
    }
    let total = FRAME_HEADER_LEN + len;
    if b.len() < total {
        return Ok(None);
    }
    Ok(Some((Message::new(kind, b[FRAME_HEADER_LEN..total].to_vec()), total)))
}

pub fn write_message<W: Write>(w: &mut W, m: &Message) -> Result<()> {
    w.write_all(&frame(m)?)?;
    Ok(())
}

/// Reads one frame; a clean end of stream before any byte yields `None`.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Message>> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    let mut filled = 0;
    while filled < FRAME_HEADER_LEN {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(Error::ChannelClosed),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let kind =
        MessageType::from_tag(header[0]).ok_or_else(|| Error::protocol(format!("unknown tag {:#04x}", header[0])))?;
    let len = read_u32(&header, 1) as usize;
    if len > MAX_PAYLOAD {
        return Err(Error::protocol(format!("payload length {len} exceeds limit")));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::ChannelClosed,
        _ => e.into(),
    })?;
    Ok(Some(Message::new(kind, payload)))
}

/// Ordered, reliable message transport between the two parties.
pub trait Channel {
    fn send(&mut self, m: Message) -> Result<()>;

    /// Blocks for the next message; a closed peer yields
    /// [`Error::ChannelClosed`].
    fn recv(&mut self) -> Result<Message>;
}

/// Framed messages over any byte stream (a TCP connection, a pipe).
pub struct StreamChannel<S> {
    stream: S,
}

impl<S: Read + Write> StreamChannel<S> {
    pub fn new(stream: S) -> Self {
        StreamChannel { stream }
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}

impl<S: Read + Write> Channel for StreamChannel<S> {
    fn send(&mut self, m: Message) -> Result<()> {
        write_message(&mut self.stream, &m)?;
        self.stream.flush()?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Message> {
        read_message(&mut self.stream)?.ok_or(Error::ChannelClosed)
    }
}

/// One end of an in-process channel. Messages still pass through the frame
/// encoder so both ends see exactly the bytes a socket would carry.
pub struct MemoryChannel {
    tx: std::sync::mpsc::Sender<Vec<u8>>,
    rx: std::sync::mpsc::Receiver<Vec<u8>>,
}

impl MemoryChannel {
    pub fn pair() -> (MemoryChannel, MemoryChannel) {
        let (tx_a, rx_b) = std::sync::mpsc::channel();
        let (tx_b, rx_a) = std::sync::mpsc::channel();
        (MemoryChannel { tx: tx_a, rx: rx_a }, MemoryChannel { tx: tx_b, rx: rx_b })
    }
}

impl Channel for MemoryChannel {
    fn send(&mut self, m: Message) -> Result<()> {
        self.tx.send(frame(&m)?).map_err(|_| Error::ChannelClosed)
    }

    fn recv(&mut self) -> Result<Message> {
        let bytes = self.rx.recv().map_err(|_| Error::ChannelClosed)?;
        match unframe(&bytes)? {
            Some((m, used)) if used == bytes.len() => Ok(m),
            _ => Err(Error::protocol("malformed in-memory frame")),
        }
    }
}

/// Receives the next message and checks its kind.
pub fn expect<C: Channel + ?Sized>(chan: &mut C, kind: MessageType) -> Result<Message> {
    let m = chan.recv()?;
    if m.kind != kind {
        return Err(Error::protocol(format!("expected {kind:?}, got {:?}", m.kind)));
    }
    Ok(m)
}

fn need(b: &[u8], n: usize, what: &str) -> Result<()> {
    if b.len() != n {
        return Err(Error::decode(b.len().min(n), format!("{what}: expected {n} bytes, got {}", b.len())));
    }
    Ok(())
}

/// Protocol version carried in HELLO.
pub const PROTOCOL_VERSION: u16 = 1;

/// HELLO: version u16, role u8 (0 alice, 1 bob), cluster threshold u32,
/// first epoch u32.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hello {
    pub version: u16,
    pub role: u8,
    pub cluster_threshold: u32,
    pub first_epoch: u32,
}

impl Hello {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(11);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.role);
        out.extend_from_slice(&self.cluster_threshold.to_le_bytes());
        out.extend_from_slice(&self.first_epoch.to_le_bytes());
        out
    }

    pub fn decode(b: &[u8]) -> Result<Self> {
        need(b, 11, "HELLO")?;
        Ok(Hello {
            version: u16::from_le_bytes([b[0], b[1]]),
            role: b[2],
            cluster_threshold: read_u32(b, 3),
            first_epoch: read_u32(b, 7),
        })
    }
}

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7F) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

fn get_varint(b: &[u8], pos: &mut usize) -> Result<u64> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let at = *pos;
        let byte = *b.get(at).ok_or_else(|| Error::decode(at, "truncated varint"))?;
        *pos += 1;
        v |= ((byte & 0x7F) as u64) << shift;
        if byte & 0x80 == 0 {
            return Ok(v);
        }
    }
    Err(Error::decode(*pos, "varint too long"))
}

/// COINC_REPLY: epoch u32, kept count u32, then the kept remote indices as
/// LEB128 varints, the first absolute and the rest as gaps to the previous
/// index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoincReply {
    pub epoch: EpochIndex,
    pub kept: Vec<u32>,
}

impl CoincReply {
    pub fn encode(&self) -> Result<Vec<u8>> {
        if !self.kept.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::contract("kept indices must be strictly ascending"));
        }
        let mut out = Vec::with_capacity(8 + self.kept.len() * 2);
        out.extend_from_slice(&self.epoch.0.to_le_bytes());
        out.extend_from_slice(&(self.kept.len() as u32).to_le_bytes());
        let mut prev = None;
        for &i in &self.kept {
            let v = match prev {
                None => i as u64,
                Some(p) => (i - p) as u64,
            };
            put_varint(&mut out, v);
            prev = Some(i);
        }
        Ok(out)
    }

    pub fn decode(b: &[u8]) -> Result<Self> {
        if b.len() < 8 {
            return Err(Error::decode(b.len(), "truncated COINC_REPLY header"));
        }
        let epoch = EpochIndex(read_u32(b, 0));
        let n = read_u32(b, 4) as usize;
        if n > b.len() - 8 {
            return Err(Error::decode(4, "kept count exceeds payload"));
        }
        let mut pos = 8;
        let mut kept = Vec::with_capacity(n);
        let mut prev: Option<u32> = None;
        for _ in 0..n {
            let at = pos;
            let v = get_varint(b, &mut pos)?;
            let idx = match prev {
                None => u32::try_from(v).ok(),
                Some(p) if v > 0 => u32::try_from(v).ok().and_then(|g| p.checked_add(g)),
                Some(_) => None,
            }
            .ok_or_else(|| Error::decode(at, "bad kept index"))?;
            kept.push(idx);
            prev = Some(idx);
        }
        if pos != b.len() {
            return Err(Error::decode(pos, "trailing bytes in COINC_REPLY"));
        }
        Ok(CoincReply { epoch, kept })
    }
}

/// EC_PARITY: cluster id u32, round u16, packed bits. The bit count is
/// implied by the protocol state on both ends.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EcParity {
    pub cluster: u32,
    pub round: u16,
    pub bits: Vec<u8>,
}

impl EcParity {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + self.bits.len().div_ceil(8));
        out.extend_from_slice(&self.cluster.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend(crate::types::pack_bits(&self.bits));
        out
    }

    pub fn decode(b: &[u8], nbits: usize) -> Result<Self> {
        need(b, 6 + nbits.div_ceil(8), "EC_PARITY")?;
        Ok(EcParity {
            cluster: read_u32(b, 0),
            round: u16::from_le_bytes([b[4], b[5]]),
            bits: crate::types::unpack_bits(&b[6..], nbits),
        })
    }
}

/// EC_PERMUTE_SEED: cluster id u32, seed u64.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EcPermuteSeed {
    pub cluster: u32,
    pub seed: u64,
}

impl EcPermuteSeed {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.cluster.to_le_bytes().to_vec();
        out.extend_from_slice(&self.seed.to_le_bytes());
        out
    }

    pub fn decode(b: &[u8]) -> Result<Self> {
        need(b, 12, "EC_PERMUTE_SEED")?;
        Ok(EcPermuteSeed { cluster: read_u32(b, 0), seed: read_u64(b, 4) })
    }
}

/// PA_SEED: cluster id u32, final length m u32, seed u64.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PaSeed {
    pub cluster: u32,
    pub m: u32,
    pub seed: u64,
}

impl PaSeed {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.cluster.to_le_bytes().to_vec();
        out.extend_from_slice(&self.m.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out
    }

    pub fn decode(b: &[u8]) -> Result<Self> {
        need(b, 16, "PA_SEED")?;
        Ok(PaSeed { cluster: read_u32(b, 0), m: read_u32(b, 4), seed: read_u64(b, 8) })
    }
}

/// KEY_HASH: cluster id u32, digest u64.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyHash {
    pub cluster: u32,
    pub digest: u64,
}

impl KeyHash {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.cluster.to_le_bytes().to_vec();
        out.extend_from_slice(&self.digest.to_le_bytes());
        out
    }

    pub fn decode(b: &[u8]) -> Result<Self> {
        need(b, 12, "KEY_HASH")?;
        Ok(KeyHash { cluster: read_u32(b, 0), digest: read_u64(b, 4) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(t: u64, d: u8) -> DetectionEvent {
        DetectionEvent::new(t, d)
    }

    #[test]
    fn packetize_empty() {
        assert!(packetize(&[]).unwrap().is_empty());
    }

    #[test]
    fn packetize_two_epochs() {
        let p = packetize(&[ev(5, 0), ev((1 << 32) + 7, 3)]).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].count(), 1);
        assert_eq!(p[1].count(), 1);
        assert_eq!(p[1].epoch, EpochIndex(1));
        assert_eq!(p[1].basis_flags, vec![true]);
    }

    #[test]
    fn packetize_rejects_unsorted_and_ties() {
        assert!(packetize(&[ev(9, 0), ev(5, 0)]).is_err());
        assert!(packetize(&[ev(9, 0), ev(9, 1)]).is_err());
        assert_eq!(strict_times(&[ev(9, 0), ev(9, 1), ev(10, 2)]).len(), 2);
    }

    #[test]
    fn single_event_packet_layout() {
        let p = TimingPacket {
            epoch: EpochIndex(2),
            first_time: Timestamp((2 << 32) + 11),
            deltas: vec![],
            basis_flags: vec![true],
        };
        let b = encode_timing(&p).unwrap();
        assert_eq!(b.len(), TIMING_HEADER_LEN + 1);
        assert_eq!(b[16], 0);
        assert_eq!(b[17], 0x80);
        assert_eq!(decode_timing(&b).unwrap(), p);
    }

    #[test]
    fn known_rice_layout() {
        // mean delta 4 -> k = round(2) - 1 = 1; deltas 2 and 6 -> v = 1, 5.
        let p = TimingPacket {
            epoch: EpochIndex(0),
            first_time: Timestamp(100),
            deltas: vec![2, 6],
            basis_flags: vec![false, true, false],
        };
        assert_eq!(p.rice_parameter(), 1);
        let b = encode_timing(&p).unwrap();
        // v=1: q=0 "0", low "1"; v=5: q=2 "110", low "1" -> 0111 01(00)
        assert_eq!(&b[TIMING_HEADER_LEN..], &[0b0111_0100, 0b0100_0000]);
        assert_eq!(decode_timing(&b).unwrap(), p);
    }

    #[test]
    fn zero_delta_rejected() {
        let p = TimingPacket {
            epoch: EpochIndex(0),
            first_time: Timestamp(1),
            deltas: vec![0],
            basis_flags: vec![false, false],
        };
        assert!(matches!(encode_timing(&p), Err(Error::Contract(_))));
    }

    #[test]
    fn empty_buffer_is_decode_error() {
        assert!(matches!(decode_timing(&[]), Err(Error::Decode { offset: 0, .. })));
    }

    #[test]
    fn count_mismatch_is_decode_error() {
        let p = TimingPacket {
            epoch: EpochIndex(0),
            first_time: Timestamp(1),
            deltas: vec![3, 4, 5],
            basis_flags: vec![false; 4],
        };
        let mut b = encode_timing(&p).unwrap();
        b[4] = 200;
        assert!(decode_timing(&b).is_err());
        b[4] = 3;
        assert!(decode_timing(&b).is_err());
        b[4] = 4;
        assert!(decode_timing(&b).is_ok());
        assert!(decode_timing(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn framing_examples() {
        let b = frame(&Message::bye()).unwrap();
        assert_eq!(b, vec![9, 0, 0, 0, 0]);
        assert!(matches!(unframe(&[0xFF, 0, 0, 0, 0]), Err(Error::Protocol(_))));
        let (m, used) = unframe(&b).unwrap().unwrap();
        assert_eq!(m, Message::bye());
        assert_eq!(used, 5);
        assert!(unframe(&b[..3]).unwrap().is_none());
    }

    #[test]
    fn payload_roundtrips() {
        let h = Hello { version: 1, role: 1, cluster_threshold: 5000, first_epoch: 3 };
        assert_eq!(Hello::decode(&h.encode()).unwrap(), h);
        let c = CoincReply { epoch: EpochIndex(4), kept: vec![0, 1, 300, 70_000] };
        assert_eq!(CoincReply::decode(&c.encode().unwrap()).unwrap(), c);
        assert!(CoincReply { epoch: EpochIndex(0), kept: vec![2, 2] }.encode().is_err());
        let p = EcParity { cluster: 9, round: 3, bits: vec![1, 0, 1, 1, 0, 0, 1, 0, 1] };
        assert_eq!(EcParity::decode(&p.encode(), 9).unwrap(), p);
        assert!(EcParity::decode(&p.encode(), 17).is_err());
        let s = PaSeed { cluster: 1, m: 2535, seed: u64::MAX };
        assert_eq!(PaSeed::decode(&s.encode()).unwrap(), s);
        let k = KeyHash { cluster: 1, digest: 0xDEAD_BEEF };
        assert_eq!(KeyHash::decode(&k.encode()).unwrap(), k);
        let e = EcPermuteSeed { cluster: 1, seed: 42 };
        assert_eq!(EcPermuteSeed::decode(&e.encode()).unwrap(), e);
    }

    fn arb_packet() -> impl Strategy<Value = TimingPacket> {
        (0u32..1000, 0u64..1 << 20, proptest::collection::vec((1u64..50_000, any::<bool>()), 0..300), any::<bool>())
            .prop_map(|(epoch, off, rest, f0)| {
                let first = ((epoch as u64) << 32) + off;
                TimingPacket {
                    epoch: EpochIndex(epoch),
                    first_time: Timestamp(first),
                    deltas: rest.iter().map(|r| r.0).collect(),
                    basis_flags: std::iter::once(f0).chain(rest.iter().map(|r| r.1)).collect(),
                }
            })
    }

    proptest! {
        #[test]
        fn codec_is_lossless(p in arb_packet()) {
            let b = encode_timing(&p).unwrap();
            prop_assert_eq!(decode_timing(&b).unwrap(), p);
        }

        #[test]
        fn decode_never_panics(b in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_timing(&b);
        }

        #[test]
        fn frames_are_self_delimiting(msgs in proptest::collection::vec((1u8..=9, proptest::collection::vec(any::<u8>(), 0..40)), 0..10)) {
            let msgs: Vec<Message> = msgs.into_iter().map(|(t, p)| Message::new(MessageType::from_tag(t).unwrap(), p)).collect();
            let mut stream = Vec::new();
            for m in &msgs { stream.extend(frame(m).unwrap()); }
            let mut back = Vec::new();
            let mut rest = &stream[..];
            while let Some((m, used)) = unframe(rest).unwrap() {
                back.push(m);
                rest = &rest[used..];
            }
            prop_assert!(rest.is_empty());
            let mut cursor = &stream[..];
            let mut via_reader = Vec::new();
            while let Some(m) = read_message(&mut cursor).unwrap() { via_reader.push(m); }
            prop_assert_eq!(&back, &msgs);
            prop_assert_eq!(via_reader, msgs);
        }
    }
}
