//! Entangled-photon QKD: a timestamp-level link simulator plus the complete
//! two-party classical post-processing stack (clock sync, coincidence
//! identification, sifting, CASCADE/BICONF reconciliation and Toeplitz privacy
//! amplification).
//!
//! Time is carried everywhere as integer ticks of 125 ps, so one timing epoch
//! (2^29 ns) is 2^32 ticks, the coarse correlation bin (2.048 us) is 2^14 ticks
//! and the fine bin (2 ns) is 16 ticks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod app;
pub mod coinc;
pub mod ecorr;
pub mod error;
pub mod physim;
pub mod privamp;
pub mod tsync;
pub mod types;
pub mod wire;

pub use error::{Error, Result};
pub use types::{detector_to_basis_bit, epoch_of, Basis, DetectionEvent, EpochIndex, KeyBuffer, KeyStage, Timestamp};
