//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch in a tensor operation. Names the op and both shapes.
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape for {op}: {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("data: {0}")]
    Data(String),

    #[error("file format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("evaluation: {0}")]
    Eval(String),

    /// Training aborted on a non-finite loss. Carries the diagnostic the
    /// trainer contract requires: epoch, batch, and component losses.
    #[error("non-finite loss at epoch {epoch}, batch {batch}: id={l_id}, attr={l_attr:?}, adv={l_adv:?}")]
    NanLoss {
        epoch: usize,
        batch: usize,
        l_id: f64,
        l_attr: Option<f64>,
        l_adv: Option<f64>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn eval(msg: impl Into<String>) -> Self {
        Error::Eval(msg.into())
    }

    pub fn autodiff(msg: impl Into<String>) -> Self {
        Error::Autodiff(msg.into())
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input (configs, file contents,
    /// CLI arguments) as opposed to runtime numeric failures.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::NanLoss { .. } | Error::NonFinite { .. })
    }
}
