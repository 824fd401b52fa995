//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by simulation, training, persistence, and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or matrix dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A caller-supplied argument is out of range or inconsistent.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A loss or statistic became NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A room layout failed validation.
    #[error("layout: {0}")]
    Layout(String),

    /// Checkpoint header declares an unsupported format version.
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    /// Checkpoint holds a different kind of model than requested.
    #[error("checkpoint kind {found:?} does not match expected {expected:?}")]
    CheckpointKind { found: String, expected: String },

    /// Checkpoint payload is shorter than its header promises.
    #[error("checkpoint truncated: expected {expected} bytes of parameters, found {found}")]
    CheckpointTruncated { expected: usize, found: usize },

    /// Checkpoint architecture does not match the consumer's expectation.
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    /// Training failed to make progress within its budget.
    #[error("divergence: {0}")]
    Divergence(String),

    /// Config file or override is malformed.
    #[error("config: {0}")]
    Config(String),

    /// Shortest-path query failed, usually an unreachable goal.
    #[error("planner: {0}")]
    Planner(String),

    /// Run directory handling failed.
    #[error("run dir: {0}")]
    RunDir(String),

    /// Dataset file is malformed or inconsistent with its manifest.
    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
