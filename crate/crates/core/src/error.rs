use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unreadable audio file {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },
    #[error("unsupported encoding in {path}: {reason}")]
    UnsupportedEncoding { path: PathBuf, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("invalid manifest line {line}: {reason}")]
    InvalidManifest { line: usize, reason: String },
    #[error("signal too short: need {needed} samples, got {got}")]
    SignalTooShort { needed: usize, got: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("clean signal is all zeros")]
    DegenerateClean,
    #[error("test signal is all zeros")]
    DegenerateTest,
    #[error("noise signal is all zeros")]
    DegenerateNoise,
    #[error("invalid band [{low}, {high}] Hz for nyquist {nyquist} Hz")]
    InvalidBand { low: f64, high: f64, nyquist: f64 },
    #[error("level search never brackets target {target} dB (response spans {lo} .. {hi} dB)")]
    NonMonotoneResponse { target: f64, lo: f64, hi: f64 },
    #[error("manifest `{0}` is empty")]
    EmptyManifest(&'static str),
    #[error("class index {index} outside 1..={k}")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("tied quality ({0} dB on both inputs)")]
    TiedQuality(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate variance: {0}")]
    DegenerateVariance(&'static str),
    #[error("insufficient items: {0}")]
    InsufficientItems(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
