use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad class of a failure, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // FT01 tensor format
    #[error("bad magic: expected \"FT01\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("truncated {field}: expected {expected} bytes, found {found}")]
    Truncated {
        field: &'static str,
        expected: u64,
        found: u64,
    },
    #[error("unknown dtype code {code}")]
    UnknownDtype { code: u8 },
    #[error("dims overflow: product of {dims:?} exceeds 2^48 elements")]
    DimsOverflow { dims: Vec<u64> },
    #[error("ndim must be at least 1")]
    ZeroNdim,
    #[error("{count} trailing bytes after tensor payload")]
    TrailingBytes { count: u64 },
    #[error("tensor dims {dims:?} describe {expected} elements but data holds {found}")]
    ShapeMismatch {
        dims: Vec<u64>,
        expected: u64,
        found: u64,
    },
    #[error("expected {expected} tensor, found {found}")]
    WrongDtype {
        expected: &'static str,
        found: &'static str,
    },

    // manifest
    #[error("malformed manifest json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported manifest version {version}")]
    UnsupportedVersion { version: u32 },
    #[error("duplicate sample id {id:?}")]
    DuplicateId { id: String },
    #[error("sample {id:?}: {field} {path:?} does not resolve")]
    DanglingPath {
        id: String,
        field: &'static str,
        path: String,
    },
    #[error("sample {id:?} has no {field}")]
    MissingField { id: String, field: &'static str },

    // images and masks
    #[error("png error: {0}")]
    Png(String),
    #[error("png must be 8-bit {expected}, found {found}")]
    PngFormat {
        expected: &'static str,
        found: String,
    },
    #[error("image dimensions must be non-zero")]
    ZeroDims,
    #[error("mask label {value} at pixel {index} is not below class count {n_classes}")]
    LabelOutOfRange {
        value: u8,
        index: usize,
        n_classes: usize,
    },

    // numerics and shapes
    #[error("dimension mismatch: {what}: expected {expected}, found {found}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid parameter {name}: {reason}")]
    InvalidParam { name: &'static str, reason: String },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("cluster id {id} has no entry in the class map")]
    UnmappedCluster { id: u8 },
    #[error("labels must contain both classes, found only {present}")]
    SingleClass { present: u8 },
    #[error("batch has no pixels outside the ignore label")]
    NoLabeledPixels,

    #[error("sample {id:?}: {source}")]
    Sample {
        id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            name,
            reason: reason.into(),
        }
    }

    pub fn in_sample(self, id: &str) -> Self {
        Error::Sample {
            id: id.to_string(),
            source: Box::new(self),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } => ErrorKind::Io,
            Error::Sample { source, .. } => source.kind(),
            _ => ErrorKind::Validation,
        }
    }
}
