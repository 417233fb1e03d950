use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes or ranks do not fit the operation.
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    /// Input data is malformed (bad file, non-finite values, missing labels, ...).
    #[error("data error: {0}")]
    Data(String),

    /// NaN/Inf encountered during optimization, or the loss diverged.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Self {
        Error::Shape {
            op,
            msg: format!("{a:?} vs {b:?}"),
        }
    }
}
