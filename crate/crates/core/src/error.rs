use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    Dimension {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("batch normalization in training mode needs more than one sample per channel (got shape {0})")]
    DegenerateBatch(Shape),

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite loss while perturbing parameter `{param}` at entry {index}")]
    Evaluation { param: String, index: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("cosine similarity is undefined for a zero-norm vector")]
    UndefinedSimilarity,

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: header declares {expected} values but file holds {found}")]
    Truncation { expected: usize, found: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dimension(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::Dimension {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
