use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes, used by front-ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid label `{0}`: labels must be non-empty and contain no whitespace")]
    InvalidLabel(String),

    #[error("cannot parse tag `{0}` (expected `O`, `B-<label>` or `I-<label>`)")]
    InvalidTag(String),

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("duplicate label `{0}` in label set")]
    DuplicateLabel(String),

    #[error("tag index {index} out of range for {num_tags} tags")]
    TagIndexOutOfRange { index: usize, num_tags: usize },

    #[error("sequence has {tokens} tokens but {tags} tags")]
    LengthMismatch { tokens: usize, tags: usize },

    #[error("empty sequence")]
    EmptySequence,

    #[error("{source_name}: sentence {sentence}: BIO violations at positions {positions:?}")]
    BioViolation {
        source_name: String,
        sentence: usize,
        positions: Vec<usize>,
    },

    #[error("{source_name}:{line}: {message}")]
    Format {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("label `{label}` is included in only {available} sentence(s) of domain `{domain}`, {required} required")]
    InsufficientSupport {
        domain: String,
        label: String,
        available: usize,
        required: usize,
    },

    #[error("domain `{domain}` too small: {message}")]
    DomainTooSmall { domain: String, message: String },

    #[error("support id `{0}` is linked to more than one support set")]
    SupportLinkage(String),

    #[error("embedding dump: {0}")]
    Dump(String),

    #[error("embedding dump has no record for query `{0}`")]
    MissingDumpRecord(String),

    #[error("non-finite loss ({value}) at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, value: f64 },

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::NonFiniteLoss { .. } => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }
}
