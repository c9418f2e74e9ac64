use thiserror::Error;

/// Errors surfaced by configuration parsing, model assembly, data loading and
/// the training loop.
#[derive(Debug, Error)]
pub enum DsnetError {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("runtime error: {0}")]
    Runtime(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, DsnetError>;

impl DsnetError {
    /// Process exit code for the CLI contract: 1 for input/validation
    /// problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            DsnetError::Parse(_)
            | DsnetError::Validation(_)
            | DsnetError::Shape(_)
            | DsnetError::Data(_) => 1,
            DsnetError::Runtime(_) | DsnetError::Io(_) | DsnetError::Image(_) => 2,
        }
    }
}
