//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error enum. Variants are grouped by the failure domain so the
/// CLI can map them onto distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("simulation fault at step {step}: {reason}")]
    SimulationFault { step: usize, reason: String },

    #[error("decode fault at step {step}: {reason}")]
    DecodeFault { step: usize, reason: String },

    #[error("training fault: {0}")]
    TrainingFault(String),

    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: u64, reason: String },

    #[error("unsupported format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("regime mismatch: checkpoint holds `{found}`, requested `{requested}`")]
    RegimeMismatch { found: String, requested: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Coarse classification used for process exit codes:
    /// 2 usage/config, 3 data, 4 numerical fault.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) | Error::RegimeMismatch { .. } => 2,
            Error::Parse { .. }
            | Error::VersionMismatch { .. }
            | Error::Integrity(_)
            | Error::Io(_) => 3,
            Error::DimensionMismatch { .. }
            | Error::SimulationFault { .. }
            | Error::DecodeFault { .. }
            | Error::TrainingFault(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
