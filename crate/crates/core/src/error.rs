use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("dimension mismatch: {what} expected {expected}, got {actual}")]
    Dim {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    /// Misuse of the autodiff tape (detached loss, double backward, ...).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown emotion {name:?}; valid names: {valid}")]
    UnknownEmotion { name: String, valid: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),

    #[error("missing artifact: {}", .0.display())]
    Missing(PathBuf),

    #[error("container version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },

    #[error("corrupt blob table: {0}")]
    BlobTable(String),

    #[error("blob {name:?} shape/offset mismatch: {detail}")]
    BlobShape { name: String, detail: String },

    #[error("blob {name:?} truncated: need bytes up to {need}, file has {have}")]
    Truncated { name: String, need: u64, have: u64 },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
