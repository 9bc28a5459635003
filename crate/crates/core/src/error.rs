use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("row {row} has no allowed entries")]
    DegenerateRow { row: usize },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// True for failures of the numerics themselves (NaN, degenerate rows)
    /// as opposed to bad configuration or IO.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::DegenerateRow { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
