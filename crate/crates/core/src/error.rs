use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("matrix is not positive semidefinite (smallest eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("alignment mismatch: {0}")]
    Alignment(String),

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed file {}: {reason}", .path.display())]
    Malformed { path: PathBuf, reason: String },

    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("length mismatch: header declares {declared} values, payload holds {actual}")]
    LengthMismatch { declared: usize, actual: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("negative proposal cannot be satisfied: {0}")]
    ProposalUnsatisfiable(String),

    #[error("missing labels: {0}")]
    MissingLabels(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category used by the command line driver.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::Shape(_) => "shape",
            Error::Degenerate(_) => "degenerate",
            Error::Numerical(_) => "numerical",
            Error::NotPsd(_) => "not-psd",
            Error::Alignment(_) => "alignment",
            Error::MissingFile(_) => "missing-file",
            Error::Malformed { .. } => "malformed-file",
            Error::UnsupportedEncoding(_) => "unsupported-encoding",
            Error::BadMagic { .. } => "bad-magic",
            Error::Version { .. } => "version",
            Error::LengthMismatch { .. } => "length-mismatch",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::ProposalUnsatisfiable(_) => "proposal-unsatisfiable",
            Error::MissingLabels(_) => "missing-labels",
            Error::InsufficientData(_) => "insufficient-data",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
