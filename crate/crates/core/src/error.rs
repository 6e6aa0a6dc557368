use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid detector index {0} (expected 0..=3)")]
    InvalidDetector(u8),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("decode error at byte {offset}: {reason}")]
    Decode { offset: usize, reason: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("no correlation peak (significance {significance:.2})")]
    NoPeak { significance: f64 },

    #[error("error fraction {0} outside [0, 0.5]")]
    OutOfDomain(f64),

    #[error("config error: {0}")]
    Config(String),

    #[error("channel closed")]
    ChannelClosed,

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn decode(offset: usize, reason: impl Into<String>) -> Self {
        Error::Decode { offset, reason: reason.into() }
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
}
