use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("invalid distribution: {0}")]
    Distribution(String),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("index {index} out of range for grid with {cells} cells")]
    CellOutOfRange { index: usize, cells: usize },

    #[error("build error at layer {layer} ({kind}): {reason}")]
    Build { layer: usize, kind: String, reason: String },

    #[error("checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("checkpoint: unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint: truncated data while reading {0}")]
    Truncated(String),

    #[error("checkpoint: missing parameter `{0}`")]
    MissingParameter(String),

    #[error("checkpoint: unexpected parameter `{0}`")]
    UnexpectedParameter(String),

    #[error("checkpoint: parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("trunk mismatch: {0}")]
    TrunkMismatch(String),

    #[error("wrong head: expected {expected} head, model has {found} head")]
    WrongHead {
        expected: &'static str,
        found: &'static str,
    },

    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Failure category; the CLI maps each one to a stable exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Io,
    Config,
    Data,
    Model,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Io => 1,
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Model => 4,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } => ErrorKind::Io,
            Error::Config(_) | Error::UnknownKey(_) | Error::Build { .. } => ErrorKind::Config,
            Error::Manifest { .. }
            | Error::Image { .. }
            | Error::Data(_)
            | Error::InvalidBox(_)
            | Error::Distribution(_) => ErrorKind::Data,
            Error::BadMagic(_)
            | Error::UnsupportedVersion(_)
            | Error::Truncated(_)
            | Error::MissingParameter(_)
            | Error::UnexpectedParameter(_)
            | Error::ParameterShape { .. }
            | Error::Checkpoint(_)
            | Error::TrunkMismatch(_)
            | Error::WrongHead { .. } => ErrorKind::Model,
            Error::Shape(_) | Error::NonFinite(_) | Error::CellOutOfRange { .. } => {
                ErrorKind::Model
            }
        }
    }
}
