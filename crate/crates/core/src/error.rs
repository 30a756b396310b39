use std::io;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("matrix shape must be positive, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },

    #[error("non-finite matrix entry at flat index {0}")]
    NonFinite(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dataset needs at least 10 channels, got {0}")]
    DatasetTooSmall(usize),

    #[error("empty training split")]
    EmptyDataset,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file: needed {needed} bytes, found {found}")]
    Truncated { needed: u64, found: u64 },

    #[error("header dimensions overflow or are inconsistent: {0}")]
    DimensionOverflow(String),

    #[error("{n_car} subcarriers cannot hold {n_pilots} evenly spaced pilots")]
    PilotSpacing { n_car: usize, n_pilots: usize },

    #[error("zero channel column at subcarrier {0}")]
    DegenerateChannel(usize),

    #[error("zero channel cannot be normalized")]
    ZeroChannel,

    #[error("received signal is identically zero")]
    ZeroSignal,

    #[error("soft error scale must be positive, got {0}")]
    NonPositiveScale(f64),

    #[error("initial power fraction {rho} is outside the feasible range [0, {bound})")]
    InfeasibleInit { rho: f64, bound: f64 },

    #[error("network was trained for pilots {trained:?}, frame uses {requested:?}")]
    PilotGridMismatch { trained: Vec<usize>, requested: Vec<usize> },

    #[error("diffusion step {t} is outside [0, {max}]")]
    StepOutOfRange { t: usize, max: usize },

    #[error("checkpoint schedule (T={found_t}) does not match receiver schedule (T={expected_t})")]
    ScheduleMismatch { expected_t: usize, found_t: usize },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {}", .0.message())]
    Config(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dims(expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch { expected: expected.to_string(), got: got.to_string() }
    }
}
