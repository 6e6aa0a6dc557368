#ifndef ENTKD_H
#define ENTKD_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EntkdStatus {
  ENTKD_STATUS_OK = 0,
  ENTKD_STATUS_NULL_POINTER = 1,
  ENTKD_STATUS_CONTRACT = 2,
  ENTKD_STATUS_INVALID_DETECTOR = 3,
  ENTKD_STATUS_DECODE = 4,
  ENTKD_STATUS_PROTOCOL = 5,
  ENTKD_STATUS_NO_PEAK = 6,
  ENTKD_STATUS_OUT_OF_DOMAIN = 7,
  ENTKD_STATUS_CONFIG = 8,
  ENTKD_STATUS_CHANNEL_CLOSED = 9,
  ENTKD_STATUS_IO = 10,
  ENTKD_STATUS_BUFFER_TOO_SMALL = 11,
  ENTKD_STATUS_PANIC = 12,
} EntkdStatus;

/**
 * Opaque session configuration.
 */
typedef struct EntkdSession EntkdSession;

/**
 * Opaque TIMING packet.
 */
typedef struct EntkdTimingPacket EntkdTimingPacket;

typedef struct EntkdReconciliation {
  size_t errors_found;
  size_t disclosed;
  double eta;
  size_t rounds;
  bool aborted;
} EntkdReconciliation;

typedef struct EntkdSessionSummary {
  uint64_t epochs;
  uint64_t sifted_bits;
  uint64_t secret_bits;
  size_t clusters;
  size_t discarded_clusters;
  uint32_t mismatched_clusters;
  double error_fraction;
  double secret_fraction;
} EntkdSessionSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` as a
 * NUL-terminated string, truncating if needed. Returns the full message
 * length without the terminator.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t entkd_last_error(char *buf, size_t cap);

/**
 * Eavesdropper knowledge per corrected bit for error fraction `eta`.
 *
 * # Safety
 * `out` must point to a writable `double`.
 */
enum EntkdStatus entkd_eve_fraction(double eta, double *out);

/**
 * Final key length for `r` corrected bits; writes 0 when the cluster is
 * discarded.
 *
 * # Safety
 * `m_out` must point to a writable `size_t`.
 */
enum EntkdStatus entkd_final_length(size_t r, double eta, size_t disclosed, size_t *m_out);

/**
 * Compresses `r` bits to `m` with the Toeplitz matrix expanded from
 * `seed`.
 *
 * # Safety
 * `bits` must point to `r` readable bytes and `out` to `m` writable bytes.
 */
enum EntkdStatus entkd_toeplitz_compress(const uint8_t *bits,
                                         size_t r,
                                         uint64_t seed,
                                         size_t m,
                                         uint8_t *out);

/**
 * 64-bit digest used to verify final keys.
 *
 * # Safety
 * `bits` must point to `n` readable bytes, `out` to a writable `uint64_t`.
 */
enum EntkdStatus entkd_key_digest(const uint8_t *bits, size_t n, uint64_t *out);

/**
 * Advances a SplitMix64 state in place and returns the next output.
 *
 * # Safety
 * `state` must point to a writable `uint64_t`; a null pointer returns 0.
 */
uint64_t entkd_splitmix64_next(uint64_t *state);

/**
 * Builds a packet from detections of a single epoch, sorted by time.
 *
 * # Safety
 * `times` and `detectors` must point to `n` readable elements; `out` to a
 * writable handle slot.
 */
enum EntkdStatus entkd_timing_packet_from_events(const uint64_t *times,
                                                 const uint8_t *detectors,
                                                 size_t n,
                                                 struct EntkdTimingPacket **out);

/**
 * Decodes a TIMING payload.
 *
 * # Safety
 * `bytes` must point to `len` readable bytes; `out` to a writable handle
 * slot.
 */
enum EntkdStatus entkd_timing_packet_decode(const uint8_t *bytes,
                                            size_t len,
                                            struct EntkdTimingPacket **out);

/**
 * Encodes a packet. When `cap` is too small, writes the required size to
 * `written` and returns `BufferTooSmall`.
 *
 * # Safety
 * `p` must be a live handle, `buf` null or `cap` writable bytes, `written`
 * a writable `size_t`.
 */
enum EntkdStatus entkd_timing_packet_encode(const struct EntkdTimingPacket *p,
                                            uint8_t *buf,
                                            size_t cap,
                                            size_t *written);

/**
 * Epoch index of a packet, or `UINT32_MAX` for a null handle.
 *
 * # Safety
 * `p` must be null or a live handle.
 */
uint32_t entkd_timing_packet_epoch(const struct EntkdTimingPacket *p);

/**
 * Number of events in a packet; 0 for a null handle.
 *
 * # Safety
 * `p` must be null or a live handle.
 */
size_t entkd_timing_packet_len(const struct EntkdTimingPacket *p);

/**
 * Copies absolute times and basis flags (1 = diagonal) of a packet.
 *
 * # Safety
 * `p` must be a live handle; `times` and `basis` must each hold `cap`
 * elements.
 */
enum EntkdStatus entkd_timing_packet_events(const struct EntkdTimingPacket *p,
                                            uint64_t *times,
                                            uint8_t *basis,
                                            size_t cap);

/**
 * # Safety
 * `p` must be null or a handle not yet freed.
 */
void entkd_timing_packet_free(struct EntkdTimingPacket *p);

/**
 * Reconciles two copies of a cluster in process. Bob's corrected bits go to
 * `corrected`.
 *
 * # Safety
 * `alice`, `bob` and `corrected` must each hold `n` bytes; `report` must be
 * writable.
 */
enum EntkdStatus entkd_cascade(const uint8_t *alice,
                               const uint8_t *bob,
                               size_t n,
                               uint64_t seed,
                               double eta_estimate,
                               uint8_t *corrected,
                               struct EntkdReconciliation *report);

/**
 * Parses a TOML session configuration from a string.
 *
 * # Safety
 * `toml` must be a NUL-terminated string; `out` a writable handle slot.
 */
enum EntkdStatus entkd_session_from_toml(const char *toml, struct EntkdSession **out);

/**
 * Loads a TOML session configuration file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a writable handle slot.
 */
enum EntkdStatus entkd_session_load(const char *path, struct EntkdSession **out);

/**
 * # Safety
 * `s` must be a live handle.
 */
enum EntkdStatus entkd_session_set_seed(struct EntkdSession *s, uint64_t seed);

/**
 * # Safety
 * `s` must be a live handle.
 */
enum EntkdStatus entkd_session_set_duration(struct EntkdSession *s, double seconds);

/**
 * Sets the key output directory (`alice.etky`, `bob.etky`); null clears it.
 *
 * # Safety
 * `s` must be a live handle, `dir` null or a NUL-terminated string.
 */
enum EntkdStatus entkd_session_set_keys_dir(struct EntkdSession *s, const char *dir);

/**
 * Runs both parties in process and summarizes Alice's side.
 *
 * # Safety
 * `s` must be a live handle and `summary` writable.
 */
enum EntkdStatus entkd_session_run_loopback(const struct EntkdSession *s,
                                            struct EntkdSessionSummary *summary);

/**
 * # Safety
 * `s` must be null or a handle not yet freed.
 */
void entkd_session_free(struct EntkdSession *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ENTKD_H */
