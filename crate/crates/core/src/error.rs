use thiserror::Error;

use crate::hmc::{Diagnostics, PosteriorDraws};
use crate::map::MapResult;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the domain of the function it was passed to.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed input data. `row`/`column` locate the offending cell when known.
    #[error("format error{}: {message}", location(*row, column.as_deref()))]
    Format {
        message: String,
        row: Option<usize>,
        column: Option<String>,
    },

    /// Well-formed input that cannot be used for the requested operation.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("optimizer did not converge: {message}")]
    Convergence {
        message: String,
        best_effort: Option<Box<MapResult>>,
    },

    #[error("sampling quality check failed: {message}")]
    SamplingQuality {
        message: String,
        draws: Box<PosteriorDraws>,
        diagnostics: Option<Box<Diagnostics>>,
    },

    /// A linear-algebra or floating-point failure. `index` names the time step
    /// (or other position) where it happened, when there is one.
    #[error("numerical error{}: {message}", index.map(|i| format!(" at index {i}")).unwrap_or_default())]
    Numerical { message: String, index: Option<usize> },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(message: impl Into<String>) -> Self {
        Error::Format {
            message: message.into(),
            row: None,
            column: None,
        }
    }

    pub(crate) fn numerical(message: impl Into<String>, index: Option<usize>) -> Self {
        Error::Numerical {
            message: message.into(),
            index,
        }
    }
}

fn location(row: Option<usize>, column: Option<&str>) -> String {
    match (row, column) {
        (Some(r), Some(c)) => format!(" (row {r}, column {c:?})"),
        (Some(r), None) => format!(" (row {r})"),
        (None, Some(c)) => format!(" (column {c:?})"),
        (None, None) => String::new(),
    }
}
