//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty waveform")]
    EmptyWaveform,

    #[error("signal too short: {len} samples, need at least {min}")]
    SignalTooShort { len: usize, min: usize },

    #[error("filterbank overcomplete: {n_mels} mel bands but only {bins} FFT bins in range")]
    FilterbankOvercomplete { n_mels: usize, bins: usize },

    #[error("excerpt longer than source: want {want} frames, source has {have}")]
    ExcerptTooLong { want: usize, have: usize },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },

    #[error("batch too small for BN: need at least 2 elements per channel, got {got}")]
    BatchTooSmallForBn { got: usize },

    #[error("no cached activations: backward called before forward")]
    NoCachedActivations,

    #[error("config error: {0}")]
    Config(String),

    #[error("degenerate zero vector cannot be normalized")]
    DegenerateZeroVector,

    #[error("batch has a single class; EC undefined")]
    SingleClassBatch,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("year {year} out of range: valid span is {lo}..={hi}")]
    YearOutOfRange { year: i32, lo: i32, hi: i32 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("manifest error at line {line}: {detail}")]
    Manifest { line: usize, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op: op.into(),
            detail: detail.into(),
        }
    }
}
