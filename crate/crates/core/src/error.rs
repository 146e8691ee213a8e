use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),
    #[error("invalid weight index: {0}")]
    InvalidIndex(String),
    #[error("input vector has zero norm")]
    ZeroInput,
    #[error("input has dimension {got}, architecture expects {expected}")]
    InputDimension { expected: usize, got: usize },
    #[error("matrix is not positive definite (failed at pivot {pivot}); raise the jitter")]
    NotPositiveDefinite { pivot: usize },
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("non-finite sample {0}")]
    NonFiniteSample(f64),
    #[error("non-finite matrix entry at ({row}, {col})")]
    NonFiniteEntry { row: usize, col: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("trace does not match architecture: {0}")]
    TraceMismatch(String),
    #[error("mean {0:e} is too close to zero to normalize by")]
    DegenerateMean(f64),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("feature row at line {line} is all zeros")]
    ZeroRow { line: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
