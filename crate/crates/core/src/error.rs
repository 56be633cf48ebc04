use std::path::PathBuf;

/// Errors produced by the numerical core and the connection methods.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: String, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("svd failed to converge on a {rows}x{cols} matrix")]
    SvdNoConvergence { rows: usize, cols: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("at path breakpoint t = {t}: {source}")]
    AtBreakpoint {
        t: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics (divergence, non-convergence,
    /// non-finite intermediates) as opposed to bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::AtBreakpoint { source, .. } => source.is_numerical(),
            e => matches!(
                e,
                Error::SvdNoConvergence { .. } | Error::NonFinite(_) | Error::Divergence { .. }
            ),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
