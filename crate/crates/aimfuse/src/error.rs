use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by how a caller should react: `Config`, `Parse`,
/// `Domain` and `Shape` mean the inputs (flags, files, shapes) were wrong;
/// `NonFinite` and `GradCheck` mean a computation went numerically bad.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at {source_name}:{line}: {msg}")]
    Parse {
        source_name: String,
        line: usize,
        msg: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the computation itself rather than of its inputs.
    /// The CLI maps these to a distinct exit code.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::GradCheck(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
