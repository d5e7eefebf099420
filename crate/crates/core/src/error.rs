use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// The variant name doubles as the machine-parseable error class printed by
/// the CLI, see [`Error::class`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid shift spec: {0}")]
    InvalidSpec(String),

    #[error("bad bundle file {file} at byte {offset} (field `{field}`): {message}")]
    Format {
        file: String,
        offset: u64,
        field: String,
        message: String,
    },

    #[error("unsupported format version {found} in {file} (supported: {supported})")]
    VersionMismatch {
        file: String,
        found: String,
        supported: u32,
    },

    #[error("too few samples: {0}")]
    TooFewSamples(String),

    #[error("bundle has no group prompt embeddings")]
    MissingGroupPrompts,

    #[error("degenerate clustering: {0}")]
    DegenerateClustering(String),

    #[error("train-mode batch normalization needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("contrastive loss needs at least one positive")]
    EmptyPositives,

    #[error("class {0} has pseudo-incorrect anchors but no pseudo-correct positives")]
    NoPositives(usize),

    #[error("pseudo-labels are all correct, no contrastive anchors")]
    NoAnchors,

    #[error("empty group: {0}")]
    EmptyGroup(String),

    #[error("class {0} has fewer than two populated groups")]
    InsufficientGroups(usize),

    #[error("alpha {0} outside [0, 1]")]
    AlphaOutOfRange(f32),

    #[error("lookup cache is empty")]
    EmptyCache,

    #[error("degenerate inferred groups: {0}")]
    DegenerateGroups(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable, single-token name for this error kind.
    pub fn class(&self) -> &'static str {
        match self {
            Error::NonFinite(_) => "NonFinite",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::Format { .. } => "FormatError",
            Error::VersionMismatch { .. } => "VersionMismatch",
            Error::TooFewSamples(_) => "TooFewSamples",
            Error::MissingGroupPrompts => "MissingGroupPrompts",
            Error::DegenerateClustering(_) => "DegenerateClustering",
            Error::BatchTooSmall(_) => "BatchTooSmall",
            Error::EmptyPositives => "EmptyPositives",
            Error::NoPositives(_) => "NoPositives",
            Error::NoAnchors => "NoAnchors",
            Error::EmptyGroup(_) => "EmptyGroup",
            Error::InsufficientGroups(_) => "InsufficientGroups",
            Error::AlphaOutOfRange(_) => "AlphaOutOfRange",
            Error::EmptyCache => "EmptyCache",
            Error::DegenerateGroups(_) => "DegenerateGroups",
            Error::Diverged { .. } => "Diverged",
            Error::Checkpoint(_) => "CheckpointError",
            Error::Config(_) => "ConfigError",
            Error::Io { .. } => "IoError",
        }
    }

    pub(crate) fn shape(op: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
