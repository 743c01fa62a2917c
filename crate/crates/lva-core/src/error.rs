//! Crate-wide error type.

use thiserror::Error;

/// Everything that can go wrong inside the library.
///
/// Shape and argument problems are caller bugs and carry enough context to
/// point at the offending call. Data and parse problems come from the outside
/// world (files, generated datasets) and name the input that failed.
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix or tensor dimensions do not line up.
    #[error("shape mismatch in {op}: {details}")]
    Shape { op: &'static str, details: String },

    /// Input values are unusable (non-finite entries, empty sets, bad ranges).
    #[error("bad data in {op}: {details}")]
    Data { op: &'static str, details: String },

    /// A parameter is outside its documented domain.
    #[error("bad argument to {op}: {details}")]
    Argument { op: &'static str, details: String },

    /// Optimization produced a non-finite loss and cannot continue.
    #[error("training diverged at epoch {epoch} (last finite loss {last_loss:e})")]
    Diverged { epoch: usize, last_loss: f64 },

    /// A file or text blob did not parse as the expected format.
    #[error("parse error in {source_name}: {details}")]
    Parse { source_name: String, details: String },

    /// The model file is valid but describes something this routine cannot use.
    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::Shape { op, details: details.into() }
    }

    pub(crate) fn data(op: &'static str, details: impl Into<String>) -> Self {
        Error::Data { op, details: details.into() }
    }

    pub(crate) fn argument(op: &'static str, details: impl Into<String>) -> Self {
        Error::Argument { op, details: details.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
