use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("tensor must not be empty")]
    EmptyTensor,

    #[error("length {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("unsupported bit width {0}")]
    BadBitWidth(u32),

    #[error("value {value} at index {index} is not ternary")]
    NonTernaryValue { index: usize, value: f32 },

    #[error("code {code} at index {index} is outside [-8, 7]")]
    CodeOutOfRange { index: usize, code: i32 },

    #[error("inner dimension {k} exceeds the 32-bit accumulator bound {limit}")]
    AccumulatorOverflow { k: usize, limit: usize },

    #[error("backward called without a saved forward context")]
    MissingContext,

    #[error("variance is zero; kurtosis is undefined")]
    ZeroVariance,

    #[error("bad histogram range: {0}")]
    BadRange(String),

    #[error("unknown activation tag {0:?}")]
    UnknownTag(String),

    #[error("resume checkpoint does not match config: {0}")]
    ConfigMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("loss diverged at step {step} (loss = {loss})")]
    DivergedLoss { step: usize, loss: f32 },

    #[error("bad magic {0:?}, expected \"BNT2\"")]
    BadMagic([u8; 4]),

    #[error("truncated payload: header declares {declared} bytes, {available} present")]
    TruncatedPayload { declared: u64, available: u64 },

    #[error("malformed tensor file: {0}")]
    BadHeader(String),

    #[error("expected dtype {expected}, found {found}")]
    WrongDtype {
        expected: &'static str,
        found: &'static str,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
