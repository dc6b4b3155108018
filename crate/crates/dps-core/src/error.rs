//! Error types shared across the toolkit.

use thiserror::Error;

/// Unified error type for engine, extraction, metrics, and IO failures.
#[derive(Debug, Error)]
pub enum DpsError {
    #[error("input shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("class index {class} out of range for {num_classes} classes")]
    ClassRange { class: usize, num_classes: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("class {0} has no usable samples")]
    EmptyClass(usize),

    #[error("insufficient samples: need {needed}, have {have} ({context})")]
    InsufficientSamples {
        needed: usize,
        have: usize,
        context: &'static str,
    },

    #[error("need at least two class references, have {0}")]
    InsufficientClasses(usize),

    #[error("degenerate pattern: norm below {0:e}")]
    DegeneratePattern(f64),

    #[error("degenerate fit: {0}")]
    DegenerateFit(&'static str),

    #[error(
        "reference mismatch: pattern class {pattern_class}, reference class {reference_class}"
    )]
    ReferenceMismatch {
        pattern_class: usize,
        reference_class: usize,
    },

    #[error("incompatible inputs: {0}")]
    Compatibility(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DpsError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        DpsError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        DpsError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, DpsError>;
