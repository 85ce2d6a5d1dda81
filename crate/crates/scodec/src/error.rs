//! Error type shared by every module of the codec.

use thiserror::Error;

/// Errors produced by transform, quantizer, neural, bitstream and pipeline code.
#[derive(Debug, Error)]
pub enum CodecError {
    /// Invalid configuration: bad shapes, invalid windows, schedule violations.
    #[error("configuration error: {0}")]
    Config(String),

    /// Streaming contract violation: wrong chunk size, out-of-order frames.
    #[error("stream error: {0}")]
    Stream(String),

    /// Token outside the range admitted by the quantizer schedule.
    #[error("token error: {0}")]
    Token(String),

    /// Non-finite values where finite reals are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Bitstream cannot be interpreted: bad magic, version, or payload.
    #[error("corruption error: {0}")]
    Corruption(String),

    /// Metric preconditions violated (empty logs, length mismatch).
    #[error("metric error: {0}")]
    Metric(String),

    /// Training failure with diagnostics.
    #[error("training error: {0}")]
    Training(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CodecError>;

impl CodecError {
    /// Process exit code for the CLI: 1 usage, 2 i/o, 3 corruption, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            CodecError::Config(_) => 1,
            CodecError::Io(_) => 2,
            CodecError::Corruption(_) | CodecError::Stream(_) | CodecError::Token(_) => 3,
            CodecError::Numeric(_) | CodecError::Training(_) | CodecError::Metric(_) => 4,
        }
    }
}
