use std::path::PathBuf;

/// Errors surfaced by every layer of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },

    #[error("{op}: value outside the domain ({detail})")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("index {index} out of bounds for axis of size {len}")]
    IndexOutOfBounds { index: usize, len: usize },

    #[error("k = {k} out of range 1..={channels}")]
    TopKRange { k: usize, channels: usize },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("unknown variable group `{0}`")]
    UnknownGroup(String),

    #[error("unknown channel `{0}`")]
    UnknownChannel(String),

    #[error("duplicate variable group `{0}`")]
    DuplicateGroup(String),

    #[error("catalog mismatch: expected {expected} channels, got {actual}")]
    CatalogMismatch { expected: usize, actual: usize },

    #[error("invalid phase transition: {0}")]
    Phase(String),

    #[error("freeze plan pattern `{0}` matches no parameter")]
    UnmatchedPattern(String),

    #[error("parameter `{0}` is covered by neither the trainable nor the frozen set")]
    UncoveredParameter(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NanGradient(String),

    #[error("non-finite loss at step {step}")]
    NanLoss { step: usize },

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("preservation violated for {count} parameter(s), first `{first}`")]
    PreservationViolated { count: usize, first: String },

    #[error("CFL condition violated: {0}")]
    Cfl(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u16, found: u16 },

    #[error("truncated file: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("gradient check failed for {op}: rel err {rel_err:e} at {point}")]
    GradCheck { op: String, rel_err: f64, point: String },

    #[error("io error on {path}: {source}")]
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

    /// Short machine-parsable tag used by the CLI's exit line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } | Error::InvalidShape { .. } => "shape",
            Error::Domain { .. } => "domain",
            Error::NonFinite { .. } | Error::NanGradient(_) | Error::NanLoss { .. } => "nan",
            Error::IndexOutOfBounds { .. } | Error::TopKRange { .. } => "index",
            Error::UnknownParameter(_)
            | Error::UnknownGroup(_)
            | Error::UnknownChannel(_)
            | Error::DuplicateGroup(_) => "lookup",
            Error::CatalogMismatch { .. } => "catalog",
            Error::Phase(_) => "phase",
            Error::UnmatchedPattern(_) | Error::UncoveredParameter(_) => "freeze",
            Error::ManifestMismatch(_) => "manifest",
            Error::PreservationViolated { .. } => "preservation",
            Error::Cfl(_) => "cfl",
            Error::BadMagic { .. } => "bad_magic",
            Error::Version { .. } => "version",
            Error::Truncated { .. } => "truncated",
            Error::Malformed(_) => "malformed",
            Error::Config(_) => "config",
            Error::GradCheck { .. } => "gradcheck",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
