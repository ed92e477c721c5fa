use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong between reading features and emitting a report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        found: [u8; 4],
        expected: [u8; 4],
    },

    #[error("{path}: unsupported format version {found} (this build reads {supported})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("{path}: {found} trailing bytes after payload")]
    TrailingBytes { path: PathBuf, found: u64 },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("non-finite value at flat index {index} ({context})")]
    NonFinite { index: usize, context: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("manifest {path} is invalid:\n  - {}", .violations.join("\n  - "))]
    Manifest {
        path: PathBuf,
        violations: Vec<String>,
    },

    #[error("manifest {path} does not parse: {source}")]
    ManifestSyntax {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("mask {path}: {reason}")]
    Mask { path: PathBuf, reason: String },

    #[error("few-shot sampling: {0}")]
    FewShot(String),

    #[error("layer pair mismatch: model trained on {model:?}, requested {requested:?}")]
    LayerPairMismatch {
        model: (u32, u32),
        requested: (u32, u32),
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient in {block}")]
    NonFiniteGradient { block: &'static str },

    #[error("training diverged at epoch {epoch}, sample {sample_id}: {detail}")]
    Diverged {
        epoch: usize,
        sample_id: String,
        detail: String,
    },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("sample {sample_id}: {source}")]
    Sample {
        sample_id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_sample(self, sample_id: &str) -> Self {
        Error::Sample {
            sample_id: sample_id.to_string(),
            source: Box::new(self),
        }
    }

    /// Coarse failure class, used by the CLI to pick an exit code.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::LayerPairMismatch { .. } => ErrorKind::Usage,
            Error::NonFinite { .. }
            | Error::NonFiniteGradient { .. }
            | Error::Diverged { .. }
            | Error::Metric(_) => ErrorKind::Numeric,
            Error::Sample { source, .. } => source.kind(),
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
