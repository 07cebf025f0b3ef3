//! Crate-wide error type. Variants map onto the CLI exit-code contract:
//! configuration and schema problems exit 2, training divergence exits 3.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: non-finite input")]
    NonFiniteInput { op: &'static str },

    #[error("softmax temperature must be finite and positive, got {value}")]
    NonPositiveTemperature { value: f64 },

    #[error("backward root must be a scalar, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },

    #[error("backward already ran on this tape; build a fresh graph per step")]
    BackwardConsumed,

    #[error("token id {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("cannot normalize a zero-norm row (degenerate embedding)")]
    DegenerateEmbedding,

    #[error("gradient check: non-finite loss at {what}")]
    NonFiniteLoss { what: String },

    #[error("gradient check: eps {eps} outside [1e-6, 1e-3]")]
    BadEpsilon { eps: f64 },

    #[error("model config: {field}: {msg}")]
    InvalidModelConfig { field: &'static str, msg: String },

    #[error("negative mining: need 1 <= m <= n-1, got m={m} with n={n}")]
    InvalidNegativeCount { m: usize, n: usize },

    #[error("corpus config: {field}: {msg}")]
    InvalidCorpusConfig { field: &'static str, msg: String },

    #[error("corpus parse: line {line}: {msg}")]
    CorpusParse { line: usize, msg: String },

    #[error("batch size {n} exceeds corpus size {items}")]
    BatchTooLarge { n: usize, items: usize },

    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),

    #[error("train config: {field}: {msg}")]
    InvalidTrainConfig { field: String, msg: String },

    #[error("config parse: {0}")]
    ConfigParse(String),

    #[error("ablation grid: {field}: {msg}")]
    InvalidGrid { field: String, msg: String },

    #[error("training diverged: non-finite {component} at step {step}")]
    Diverged { component: String, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors the CLI reports as bad configuration (exit code 2).
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::InvalidModelConfig { .. }
                | Error::InvalidCorpusConfig { .. }
                | Error::InvalidTrainConfig { .. }
                | Error::ConfigParse(..)
                | Error::InvalidGrid { .. }
                | Error::CheckpointMismatch(..)
        )
    }

    /// True for training divergence (exit code 3).
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Diverged { .. })
    }

    /// True for numeric blow-ups mid-training; the trainer converts these
    /// into a diverged run report instead of aborting.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteInput { .. }
                | Error::NonFiniteLoss { .. }
                | Error::DegenerateEmbedding
                | Error::NonPositiveTemperature { .. }
                | Error::Diverged { .. }
        )
    }
}
