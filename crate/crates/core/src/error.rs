//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PndError>;

#[derive(Debug, Error)]
pub enum PndError {
    /// Two inputs disagree on a dimension.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input values are empty, non-finite or otherwise unusable.
    #[error("input error: {0}")]
    Input(String),

    /// A hyperparameter or config entry is out of range or malformed.
    #[error("config error: {0}")]
    Config(String),

    /// An internal invariant was violated. Reaching this is a bug.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl PndError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        PndError::Shape(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        PndError::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        PndError::Config(msg.into())
    }

    /// True for errors caused by bad configuration rather than runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, PndError::Config(_))
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(PndError::input(format!(
            "{what} contains a non-finite value at index {pos}"
        )));
    }
    Ok(())
}
