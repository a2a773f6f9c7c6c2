use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised while reading or writing the zip-based containers
/// (clip archives, embedding banks, checkpoints).
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: missing entry `{entry}`")]
    MissingEntry { path: PathBuf, entry: String },
    #[error("{path}: entry `{entry}` has {actual} bytes, expected {expected}")]
    ShapeMismatch {
        path: PathBuf,
        entry: String,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: entry `{entry}` is truncated ({len} bytes is not a multiple of {width})")]
    Truncated {
        path: PathBuf,
        entry: String,
        len: usize,
        width: usize,
    },
    #[error("{path}: label index {label} outside label space of {classes} classes")]
    LabelRange {
        path: PathBuf,
        label: usize,
        classes: usize,
    },
    #[error("{path}: malformed metadata: {reason}")]
    BadMeta { path: PathBuf, reason: String },
    #[error("{path}: unsupported format version {found} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: not a readable zip container: {reason}")]
    Container { path: PathBuf, reason: String },
}

/// Errors from parsing per-source point CSV files and segmentation tables.
#[derive(Debug, Error)]
pub enum ParseError {
    #[error("input is empty")]
    Empty,
    #[error("missing column `{0}` in header")]
    MissingColumn(String),
    #[error("row {row}: column `{column}` holds non-numeric value `{value}`")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: frame index {frame} decreases (previous {previous})")]
    FrameOrder {
        row: usize,
        frame: i64,
        previous: i64,
    },
    #[error("row {row}: {reason}")]
    Malformed { row: usize, reason: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("invalid sample id: {0}")]
    SampleId(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("empty frame {frame}: {reason}")]
    EmptyFrame { frame: usize, reason: String },
    #[error("training aborted: {0}")]
    Training(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Broad category used by the command-line front end to pick an exit code.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Format(_) | Error::Parse(_) | Error::SampleId(_) | Error::Io { .. } => {
                ErrorKind::Data
            }
            _ => ErrorKind::Runtime,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}
