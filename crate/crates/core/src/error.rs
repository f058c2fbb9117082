use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor dimension did not satisfy an operation's shape contract.
    #[error("{op}: dimension error on axis {axis}: {detail}")]
    Dimension {
        op: &'static str,
        axis: String,
        detail: String,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{op}: label {label} out of range for {classes} classes")]
    Label {
        op: &'static str,
        label: usize,
        classes: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite gradient for parameter {param} (max |g| = {max_abs})")]
    NonFiniteGradient { param: String, max_abs: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed {field}: {detail}")]
    Format {
        path: PathBuf,
        field: String,
        detail: String,
    },

    #[error("graph error: {0}")]
    Graph(String),
}

impl Error {
    /// Short stable name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::NonFinite { .. } => "non_finite",
            Error::Label { .. } => "label",
            Error::Domain(_) => "domain",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Graph(_) => "graph",
        }
    }

    pub(crate) fn dim(op: &'static str, axis: impl ToString, detail: impl ToString) -> Self {
        Error::Dimension {
            op,
            axis: axis.to_string(),
            detail: detail.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(
        path: impl Into<PathBuf>,
        field: impl ToString,
        detail: impl ToString,
    ) -> Self {
        Error::Format {
            path: path.into(),
            field: field.to_string(),
            detail: detail.to_string(),
        }
    }
}
