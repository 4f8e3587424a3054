use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid state {0:?}: wall cell or out of bounds")]
    InvalidState([f64; 2]),

    #[error("invalid action for this action space: {0}")]
    InvalidAction(String),

    #[error("{from:?} cannot reach {to:?}")]
    Unreachable { from: [usize; 2], to: [usize; 2] },

    #[error("invalid maze: {0}")]
    InvalidMaze(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("synthetic buffer is empty but sigma = {0}")]
    EmptySyntheticBuffer(f64),

    #[error("not enough data: {0}")]
    InsufficientData(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("non-finite value in {phase}: {detail}")]
    NonFinite { phase: String, detail: String },

    #[error("goal and state share the same latent point; no direction to follow")]
    ZeroDirection,

    #[error("value iteration did not converge after {0} sweeps")]
    NoConvergence(usize),

    #[error("unknown {kind} '{name}'; registered: {known}")]
    UnknownStrategy { kind: &'static str, name: String, known: String },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn non_finite(phase: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::NonFinite { phase: phase.into(), detail: detail.into() }
    }

    /// True for failures caused by numerical blow-up rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::NoConvergence(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
