use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("row_softmax: row {row} has no allowed column")]
    FullyMasked { row: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{variant} guidance needs a negative prompt")]
    MissingNegative { variant: &'static str },

    #[error("training diverged at step {step}: loss {loss:.4e} (last finite loss {last_loss:.4e})")]
    Diverged { step: usize, loss: f64, last_loss: f64 },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape { op, left, right }
    }
}
