//! C ABI over `entkd`.
//!
//! Every fallible call returns an [`EntkdStatus`]; on failure the message is
//! kept per thread and can be copied out with [`entkd_last_error`]. Objects
//! cross the boundary as opaque handles released by their `_free` function.
//! Key bits are passed one per byte (0 or 1).

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use entkd::app::{run_loopback, SessionConfig};
use entkd::ecorr::cascade;
use entkd::privamp::{eve_fraction, final_length, key_digest, toeplitz_compress, SplitMix64};
use entkd::wire::{decode_timing, encode_timing, packetize, TimingPacket};
use entkd::{DetectionEvent, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntkdStatus {
    Ok = 0,
    NullPointer = 1,
    Contract = 2,
    InvalidDetector = 3,
    Decode = 4,
    Protocol = 5,
    NoPeak = 6,
    OutOfDomain = 7,
    Config = 8,
    ChannelClosed = 9,
    Io = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> EntkdStatus {
    match e {
        Error::InvalidDetector(_) => EntkdStatus::InvalidDetector,
        Error::Contract(_) => EntkdStatus::Contract,
        Error::Decode { .. } => EntkdStatus::Decode,
        Error::Protocol(_) => EntkdStatus::Protocol,
        Error::NoPeak { .. } => EntkdStatus::NoPeak,
        Error::OutOfDomain(_) => EntkdStatus::OutOfDomain,
        Error::Config(_) => EntkdStatus::Config,
        Error::ChannelClosed => EntkdStatus::ChannelClosed,
        Error::Io(_) => EntkdStatus::Io,
    }
}

fn fail(status: EntkdStatus, msg: impl Into<String>) -> EntkdStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), EntkdStatus>) -> EntkdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EntkdStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(EntkdStatus::Panic, "internal panic"),
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, EntkdStatus>;
}

impl<T> OrStatus<T> for entkd::Result<T> {
    fn or_status(self) -> Result<T, EntkdStatus> {
        self.map_err(|e| fail(status_of(&e), e.to_string()))
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), EntkdStatus> {
    if p.is_null() {
        Err(fail(EntkdStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// Borrows `n` elements; a null pointer is allowed only when `n` is zero.
unsafe fn input<'a, T>(p: *const T, n: usize, name: &str) -> Result<&'a [T], EntkdStatus> {
    if n == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn output<'a, T>(p: *mut T, n: usize, name: &str) -> Result<&'a mut [T], EntkdStatus> {
    if n == 0 {
        return Ok(&mut []);
    }
    non_null(p, name)?;
    Ok(slice::from_raw_parts_mut(p, n))
}

fn check_bits(bits: &[u8]) -> Result<(), EntkdStatus> {
    match bits.iter().position(|&b| b > 1) {
        Some(i) => Err(fail(EntkdStatus::Contract, format!("bit {i} is neither 0 nor 1"))),
        None => Ok(()),
    }
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating if needed. Returns the full message
/// length without the terminator.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn entkd_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Eavesdropper knowledge per corrected bit for error fraction `eta`.
///
/// # Safety
/// `out` must point to a writable `double`.
#[no_mangle]
pub unsafe extern "C" fn entkd_eve_fraction(eta: f64, out: *mut f64) -> EntkdStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = eve_fraction(eta).or_status()?;
        Ok(())
    })
}

/// Final key length for `r` corrected bits; writes 0 when the cluster is
/// discarded.
///
/// # Safety
/// `m_out` must point to a writable `size_t`.
#[no_mangle]
pub unsafe extern "C" fn entkd_final_length(r: usize, eta: f64, disclosed: usize, m_out: *mut usize) -> EntkdStatus {
    guard(|| {
        non_null(m_out, "m_out")?;
        *m_out = final_length(r, eta, disclosed).or_status()?.unwrap_or(0);
        Ok(())
    })
}

/// Compresses `r` bits to `m` with the Toeplitz matrix expanded from
/// `seed`.
///
/// # Safety
/// `bits` must point to `r` readable bytes and `out` to `m` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn entkd_toeplitz_compress(
    bits: *const u8,
    r: usize,
    seed: u64,
    m: usize,
    out: *mut u8,
) -> EntkdStatus {
    guard(|| {
        let bits = input(bits, r, "bits")?;
        check_bits(bits)?;
        let out = output(out, m, "out")?;
        out.copy_from_slice(&toeplitz_compress(bits, seed, m).or_status()?);
        Ok(())
    })
}

/// 64-bit digest used to verify final keys.
///
/// # Safety
/// `bits` must point to `n` readable bytes, `out` to a writable `uint64_t`.
#[no_mangle]
pub unsafe extern "C" fn entkd_key_digest(bits: *const u8, n: usize, out: *mut u64) -> EntkdStatus {
    guard(|| {
        let bits = input(bits, n, "bits")?;
        non_null(out, "out")?;
        *out = key_digest(bits);
        Ok(())
    })
}

/// Advances a SplitMix64 state in place and returns the next output.
///
/// # Safety
/// `state` must point to a writable `uint64_t`; a null pointer returns 0.
#[no_mangle]
pub unsafe extern "C" fn entkd_splitmix64_next(state: *mut u64) -> u64 {
    if state.is_null() {
        return 0;
    }
    let mut g = SplitMix64::new(*state);
    let v = g.next_u64();
    *state = state.read().wrapping_add(0x9E37_79B9_7F4A_7C15);
    v
}

/// Opaque TIMING packet.
pub struct EntkdTimingPacket {
    inner: TimingPacket,
}

fn packet_out(p: TimingPacket, out: *mut *mut EntkdTimingPacket) {
    // SAFETY: callers checked `out` for null.
    unsafe { *out = Box::into_raw(Box::new(EntkdTimingPacket { inner: p })) };
}

/// Builds a packet from detections of a single epoch, sorted by time.
///
/// # Safety
/// `times` and `detectors` must point to `n` readable elements; `out` to a
/// writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn entkd_timing_packet_from_events(
    times: *const u64,
    detectors: *const u8,
    n: usize,
    out: *mut *mut EntkdTimingPacket,
) -> EntkdStatus {
    guard(|| {
        non_null(out, "out")?;
        let times = input(times, n, "times")?;
        let detectors = input(detectors, n, "detectors")?;
        let events: Vec<DetectionEvent> =
            times.iter().zip(detectors).map(|(&t, &d)| DetectionEvent::new(t, d)).collect();
        let mut packets = packetize(&events).or_status()?;
        if packets.len() != 1 {
            return Err(fail(EntkdStatus::Contract, format!("events span {} epochs, expected 1", packets.len())));
        }
        packet_out(packets.remove(0), out);
        Ok(())
    })
}

/// Decodes a TIMING payload.
///
/// # Safety
/// `bytes` must point to `len` readable bytes; `out` to a writable handle
/// slot.
#[no_mangle]
pub unsafe extern "C" fn entkd_timing_packet_decode(
    bytes: *const u8,
    len: usize,
    out: *mut *mut EntkdTimingPacket,
) -> EntkdStatus {
    guard(|| {
        non_null(out, "out")?;
        let b = input(bytes, len, "bytes")?;
        packet_out(decode_timing(b).or_status()?, out);
        Ok(())
    })
}

/// Encodes a packet. When `cap` is too small, writes the required size to
/// `written` and returns `BufferTooSmall`.
///
/// # Safety
/// `p` must be a live handle, `buf` null or `cap` writable bytes, `written`
/// a writable `size_t`.
#[no_mangle]
pub unsafe extern "C" fn entkd_timing_packet_encode(
    p: *const EntkdTimingPacket,
    buf: *mut u8,
    cap: usize,
    written: *mut usize,
) -> EntkdStatus {
    guard(|| {
        non_null(p, "packet")?;
        non_null(written, "written")?;
        let bytes = encode_timing(&(*p).inner).or_status()?;
        *written = bytes.len();
        if cap < bytes.len() {
            return Err(fail(EntkdStatus::BufferTooSmall, format!("need {} bytes", bytes.len())));
        }
        output(buf, bytes.len(), "buf")?.copy_from_slice(&bytes);
        Ok(())
    })
}

/// Epoch index of a packet, or `UINT32_MAX` for a null handle.
///
/// # Safety
/// `p` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn entkd_timing_packet_epoch(p: *const EntkdTimingPacket) -> u32 {
    p.as_ref().map_or(u32::MAX, |p| p.inner.epoch.0)
}

/// Number of events in a packet; 0 for a null handle.
///
/// # Safety
/// `p` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn entkd_timing_packet_len(p: *const EntkdTimingPacket) -> usize {
    p.as_ref().map_or(0, |p| p.inner.count())
}

/// Copies absolute times and basis flags (1 = diagonal) of a packet.
///
/// # Safety
/// `p` must be a live handle; `times` and `basis` must each hold `cap`
/// elements.
#[no_mangle]
pub unsafe extern "C" fn entkd_timing_packet_events(
    p: *const EntkdTimingPacket,
    times: *mut u64,
    basis: *mut u8,
    cap: usize,
) -> EntkdStatus {
    guard(|| {
        non_null(p, "packet")?;
        let inner = &(*p).inner;
        let n = inner.count();
        if cap < n {
            return Err(fail(EntkdStatus::BufferTooSmall, format!("need {n} slots")));
        }
        for (o, t) in output(times, n, "times")?.iter_mut().zip(inner.times()) {
            *o = t.0;
        }
        for (o, &f) in output(basis, n, "basis")?.iter_mut().zip(&inner.basis_flags) {
            *o = f as u8;
        }
        Ok(())
    })
}

/// # Safety
/// `p` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn entkd_timing_packet_free(p: *mut EntkdTimingPacket) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EntkdReconciliation {
    pub errors_found: usize,
    pub disclosed: usize,
    pub eta: f64,
    pub rounds: usize,
    pub aborted: bool,
}

/// Reconciles two copies of a cluster in process. Bob's corrected bits go to
/// `corrected`.
///
/// # Safety
/// `alice`, `bob` and `corrected` must each hold `n` bytes; `report` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn entkd_cascade(
    alice: *const u8,
    bob: *const u8,
    n: usize,
    seed: u64,
    eta_estimate: f64,
    corrected: *mut u8,
    report: *mut EntkdReconciliation,
) -> EntkdStatus {
    guard(|| {
        let a = input(alice, n, "alice")?;
        let b = input(bob, n, "bob")?;
        check_bits(a)?;
        check_bits(b)?;
        non_null(report, "report")?;
        let out = output(corrected, n, "corrected")?;
        let (key, rep, _) = cascade(a, b, seed, eta_estimate).or_status()?;
        out.copy_from_slice(&key);
        *report = EntkdReconciliation {
            errors_found: rep.errors_found,
            disclosed: rep.disclosed,
            eta: rep.eta,
            rounds: rep.rounds,
            aborted: rep.aborted,
        };
        Ok(())
    })
}

/// Opaque session configuration.
pub struct EntkdSession {
    cfg: SessionConfig,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EntkdSessionSummary {
    pub epochs: u64,
    pub sifted_bits: u64,
    pub secret_bits: u64,
    pub clusters: usize,
    pub discarded_clusters: usize,
    pub mismatched_clusters: u32,
    pub error_fraction: f64,
    pub secret_fraction: f64,
}

unsafe fn c_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, EntkdStatus> {
    non_null(p, name)?;
    CStr::from_ptr(p).to_str().map_err(|_| fail(EntkdStatus::Contract, format!("{name} is not UTF-8")))
}

fn session_out(cfg: SessionConfig, out: *mut *mut EntkdSession) {
    // SAFETY: callers checked `out` for null.
    unsafe { *out = Box::into_raw(Box::new(EntkdSession { cfg })) };
}

/// Parses a TOML session configuration from a string.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn entkd_session_from_toml(toml: *const c_char, out: *mut *mut EntkdSession) -> EntkdStatus {
    guard(|| {
        non_null(out, "out")?;
        session_out(SessionConfig::parse(c_str(toml, "toml")?).or_status()?, out);
        Ok(())
    })
}

/// Loads a TOML session configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn entkd_session_load(path: *const c_char, out: *mut *mut EntkdSession) -> EntkdStatus {
    guard(|| {
        non_null(out, "out")?;
        session_out(SessionConfig::load(Path::new(c_str(path, "path")?)).or_status()?, out);
        Ok(())
    })
}

/// # Safety
/// `s` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn entkd_session_set_seed(s: *mut EntkdSession, seed: u64) -> EntkdStatus {
    guard(|| {
        non_null(s, "session")?;
        (*s).cfg.session.seed = Some(seed);
        Ok(())
    })
}

/// # Safety
/// `s` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn entkd_session_set_duration(s: *mut EntkdSession, seconds: f64) -> EntkdStatus {
    guard(|| {
        non_null(s, "session")?;
        if !(seconds >= 0.0 && seconds.is_finite()) {
            return Err(fail(EntkdStatus::Config, "duration must be finite and non-negative"));
        }
        (*s).cfg.session.duration = Some(seconds);
        Ok(())
    })
}

/// Sets the key output directory (`alice.etky`, `bob.etky`); null clears it.
///
/// # Safety
/// `s` must be a live handle, `dir` null or a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn entkd_session_set_keys_dir(s: *mut EntkdSession, dir: *const c_char) -> EntkdStatus {
    guard(|| {
        non_null(s, "session")?;
        (*s).cfg.session.keys = if dir.is_null() { None } else { Some(c_str(dir, "dir")?.into()) };
        Ok(())
    })
}

/// Runs both parties in process and summarizes Alice's side.
///
/// # Safety
/// `s` must be a live handle and `summary` writable.
#[no_mangle]
pub unsafe extern "C" fn entkd_session_run_loopback(
    s: *const EntkdSession,
    summary: *mut EntkdSessionSummary,
) -> EntkdStatus {
    guard(|| {
        non_null(s, "session")?;
        non_null(summary, "summary")?;
        let r = run_loopback(&(*s).cfg).or_status()?.alice;
        *summary = EntkdSessionSummary {
            epochs: r.epochs,
            sifted_bits: r.sifted_bits,
            secret_bits: r.secret_bits,
            clusters: r.clusters.len(),
            discarded_clusters: r.discarded_clusters(),
            mismatched_clusters: r.mismatched_clusters,
            error_fraction: r.error_fraction(),
            secret_fraction: r.secret_fraction(),
        };
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn entkd_session_free(s: *mut EntkdSession) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}
