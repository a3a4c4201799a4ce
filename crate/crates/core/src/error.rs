use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("mask is empty")]
    EmptyMask,
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("no level accepts a part of scale {0}")]
    NoLevelForScale(f64),
    #[error("probability {value} at index {index} is outside the admissible range")]
    ProbabilityOutOfRange { index: usize, value: f64 },
    #[error("prediction and target levels do not line up: {0}")]
    LevelMismatch(String),
    #[error("scene has {instances} instances but only {capacity} prototypes are available")]
    TooManyInstances { instances: usize, capacity: usize },
    #[error("could not place scene content after {attempts} attempts")]
    PlacementFailed { attempts: usize },

    #[error("{path}: bad magic")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported version {version}")]
    UnsupportedVersion { path: PathBuf, version: u8 },
    #[error("{path}: truncated payload (expected {expected} bytes, found {found})")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: dtype mismatch (expected {expected}, found {found})")]
    DtypeMismatch {
        path: PathBuf,
        expected: &'static str,
        found: String,
    },
    #[error("{path}: {reason}")]
    InvalidTensor { path: PathBuf, reason: String },
    #[error("{path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn dims(expected: &[usize], actual: &[usize]) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    /// Process exit code for the command line: 2 for I/O and unreadable
    /// files, 3 for values that fail validation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::BadMagic { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Truncated { .. }
            | Error::DtypeMismatch { .. } => 2,
            _ => 3,
        }
    }
}
