use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in operator term {term}: {detail}")]
    TermDimension { term: usize, detail: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("zero iterate in stopping test")]
    ZeroIterate,

    #[error("reduced problem too large; lower maxrank (kronecker dimension {dim} exceeds cap {cap})")]
    ReducedTooLarge { dim: usize, cap: usize },

    #[error("reduced hessian is not positive definite: smallest pivot {pivot:e} at index {index}")]
    IndefiniteHessian { pivot: f64, index: usize },

    #[error("matrix not detected SPD: {0}")]
    NotSpd(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("symmetry violation: {0}")]
    Symmetry(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("problem of Kronecker size {size} exceeds the dense oracle cap {cap}")]
    OracleTooLarge { size: usize, cap: usize },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), message: message.into() }
    }
}
