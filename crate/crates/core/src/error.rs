use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while decoding one of the binary file formats (feature banks, checkpoints).
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("file truncated: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("label {label} at row {row} out of range for {n_classes} classes")]
    LabelOutOfRange { row: usize, label: u16, n_classes: usize },
    #[error("malformed payload: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("input too short for {op}: length {len} < kernel {kernel}")]
    InputTooShort {
        op: &'static str,
        len: usize,
        kernel: usize,
    },
    #[error("numeric domain violation in {op} at index {index} (value {value})")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("degenerate batch in {op}: {per_channel} element(s) per channel, need at least 2")]
    DegenerateBatch { op: &'static str, per_channel: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("format error: {0}")]
    Format(#[from] FormatError),
    #[error("data integrity: {0}")]
    Integrity(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Json { .. } => 2,
            Error::Format(_) | Error::Integrity(_) => 3,
            Error::Numeric(_) | Error::Domain { .. } => 4,
            Error::Shape { .. } | Error::InputTooShort { .. } | Error::DegenerateBatch { .. } => 2,
            Error::Io { .. } => 1,
        }
    }
}
