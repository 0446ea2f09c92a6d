use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("value {value} outside grid range [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },

    #[error("degenerate direction: functional is numerically zero")]
    DegenerateDirection,

    #[error("source bin {bin} carries no mass, no particle can sit there")]
    EmptySource { bin: usize },

    #[error("not a probability vector: {0}")]
    NotNormalized(String),

    #[error("particle {index} diverged during integration")]
    Diverged { index: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("config: {0}")]
    Config(String),

    #[error("csv parse ({path}:{line}): {msg}")]
    Csv {
        path: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
