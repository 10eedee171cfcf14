//! Error types shared across the engine.

use thiserror::Error;

/// Unified error type for every fallible engine operation.
#[derive(Debug, Error)]
pub enum SlakError {
    /// A tensor shape is malformed or two shapes are inconsistent.
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// A mask contains entries other than 0 and 1, or disagrees with its weights.
    #[error("invalid mask: {0}")]
    InvalidMask(String),

    /// A prune/grow count is out of range for the mask it applies to.
    #[error("invalid count: {0}")]
    InvalidCount(String),

    /// A configuration field has an unusable value.
    #[error("invalid config: field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    /// A numeric result became non-finite.
    #[error("numeric error at {location}: {reason}")]
    Numeric { location: String, reason: String },

    /// A schedule was queried outside its domain.
    #[error("schedule range: step {step} outside horizon {horizon}")]
    ScheduleRange { step: usize, horizon: usize },

    /// A sparsity plan would keep zero weights.
    #[error("degenerate plan: {0}")]
    DegeneratePlan(String),

    /// Batch statistics cannot be formed (single-element normalization).
    #[error("degenerate statistics: {0}")]
    DegenerateStats(String),

    /// A contribution map has no mass to threshold.
    #[error("degenerate map: {0}")]
    DegenerateMap(String),

    /// A checkpoint file is corrupt or truncated.
    #[error("checkpoint format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    /// A checkpoint was produced by a different model configuration.
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    /// Training cannot proceed (stale cache, inconsistent state).
    #[error("state error: {0}")]
    State(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SlakError>;

impl SlakError {
    pub fn invalid_shape(msg: impl Into<String>) -> Self {
        SlakError::InvalidShape(msg.into())
    }

    pub fn invalid_config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        SlakError::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn numeric(location: impl Into<String>, reason: impl Into<String>) -> Self {
        SlakError::Numeric {
            location: location.into(),
            reason: reason.into(),
        }
    }
}
