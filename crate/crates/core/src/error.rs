use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("config constraint violated for `{key}`: {message}")]
    Constraint { key: &'static str, message: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("class id {class_id} out of range for {num_classes} classes")]
    ClassOutOfRange { class_id: usize, num_classes: usize },
    #[error("attribute `{attribute}` value {value} out of range (< {limit} required)")]
    AttributeOutOfRange {
        attribute: &'static str,
        value: usize,
        limit: usize,
    },
    #[error("bias strength must lie in [0, 1], got {0}")]
    BiasStrength(f64),
    #[error("cue-conflict pair uses class {0} for both shape and texture")]
    SameCuePair(usize),
    #[error("at least {needed} classes required, got {got}")]
    TooFewClasses { needed: usize, got: usize },

    #[error("empty prompt")]
    EmptyPrompt,
    #[error("image resolution {got} does not match expected {expected}")]
    ResolutionMismatch { expected: usize, got: usize },
    #[error("shape mismatch in {context}: {detail}")]
    ShapeMismatch { context: &'static str, detail: String },
    #[error("encoder must be frozen for {0}")]
    EncoderNotFrozen(&'static str),
    #[error("zero-norm feature vector")]
    ZeroNorm,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("quality score {0} outside [1, 5]")]
    ScoreOutOfRange(f64),
    #[error("invalid level distribution: {0}")]
    InvalidDistribution(String),

    #[error("gradient mask requires 1 <= k <= T (k = {k}, T = {t})")]
    GradMask { k: usize, t: usize },
    #[error("steps must be >= 1")]
    ZeroSteps,
    #[error("sampling steps {requested} exceed the trained schedule length {trained}")]
    TooManySteps { requested: usize, trained: usize },
    #[error("non-finite loss at step {step}: {which}")]
    NonFiniteLoss { step: usize, which: &'static str },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    CheckpointVersion { expected: String, found: String },

    #[error("{context}: {message}")]
    Metric { context: &'static str, message: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn metric(context: &'static str, message: impl Into<String>) -> Self {
        Error::Metric {
            context,
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
