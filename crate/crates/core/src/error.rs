use std::path::PathBuf;

/// Errors raised by every module of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("merged head requested before heads were merged")]
    MergedHeadMissing,
    #[error("environment index {index} out of range for {count} heads")]
    EnvOutOfRange { index: usize, count: usize },
    #[error("variance needs at least 2 heads, got {0}")]
    TooFewHeads(usize),
    #[error("head {head} has norm {norm:e} at or below the guard {guard:e}")]
    DegenerateHead { head: usize, norm: f64, guard: f64 },
    #[error("heads are not equal (head {0} differs from head 0)")]
    UnequalHeads(usize),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty environment {0}")]
    EmptyEnvironment(usize),
    #[error("invalid config: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("missing metadata key {key:?} on examples {indices:?}")]
    MissingMetadata { key: String, indices: Vec<usize> },
    #[error("too many forms on example {index}: {forms} forms but only {envs} environments")]
    TooManyForms {
        index: usize,
        forms: usize,
        envs: usize,
    },
    #[error("empty vocabulary after filtering tokens with count < {0}")]
    EmptyVocabulary(usize),
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("output directory {0} is not empty (use --force to overwrite)")]
    OutputExists(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for usage and configuration errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig { .. } | Error::OutputExists(_) => 2,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
