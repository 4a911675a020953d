use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point outside the open support ball: |x| = {norm} >= r = {radius}")]
    OutsideSupport { norm: f64, radius: f64 },

    #[error("invalid spline parameters: {0}")]
    InvalidSpline(String),

    #[error("wrong number of ancestor rotations for part {part}: expected {expected}, got {got}")]
    AncestorCount {
        part: usize,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }
}
