use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} has norm {norm:e}, below the 1e-12 floor")]
    ZeroRow { row: usize, norm: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("{context}: row {row} is not unit-norm (norm {norm})")]
    NonUnitRow {
        context: &'static str,
        row: usize,
        norm: f64,
    },

    #[error("class {class} has no {what}")]
    EmptyClass { class: usize, what: &'static str },

    #[error("tape mismatch: {0}")]
    TapeMismatch(String),

    #[error("query vector has near-zero norm")]
    ZeroQuery,

    #[error("step {step} is outside the schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },

    #[error("query set is empty")]
    EmptyQuerySet,

    #[error("negative text nodes are required by this configuration but the graph has none")]
    MissingNegatives,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid synthetic spec: {0}")]
    Spec(String),

    #[error("{path}: bad magic {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: unsupported version {found}")]
    BadVersion { path: PathBuf, found: u32 },

    #[error("{path}: unsupported dtype code {code}")]
    UnsupportedDtype { path: PathBuf, code: u8 },

    #[error("{path}: truncated file (expected {expected} bytes, found {found})")]
    TruncatedFile {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("manifest field `{field}`: {message}")]
    Manifest { field: String, message: String },

    #[error("{path}: checkpoint version {found} is not supported")]
    VersionMismatch { path: PathBuf, found: u32 },

    #[error("{path}: checkpoint checksum mismatch")]
    CorruptChecksum { path: PathBuf },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dims(
        context: &'static str,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::DimMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn manifest(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Manifest {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics (as opposed to bad input data or configuration).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::ZeroRow { .. } | Error::ZeroQuery | Error::TapeMismatch(_)
        )
    }
}
