use jacmatch_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Shape {
        what: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("network has no {0} head")]
    UnknownHead(&'static str),

    #[error("layer {index} ({kind}) is not piecewise linear")]
    SmoothNonlinearity { index: usize, kind: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{term}: {msg}")]
    Term { term: String, msg: String },

    #[error("{term} is not finite ({value})")]
    NonFinite { term: String, value: f64 },

    #[error("{0} set is empty")]
    EmptySet(&'static str),

    #[error("class {class} has {have} examples, {need} requested")]
    InsufficientClass { class: usize, have: usize, need: usize },

    #[error("byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("activation pattern changes inside the ball at {sample:?}")]
    PatternViolation { sample: Vec<f64> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attaches a loss-term name to an error raised while computing it.
    pub fn in_term(self, term: &str) -> Error {
        match self {
            e @ (Error::Term { .. } | Error::NonFinite { .. }) => e,
            other => Error::Term {
                term: term.to_string(),
                msg: other.to_string(),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
