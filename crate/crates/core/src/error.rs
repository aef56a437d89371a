use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate start: {0}")]
    DegenerateStart(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("vehicle type mismatch: {0}")]
    VehicleTypeMismatch(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error(transparent)]
    Nn(#[from] pedsafe_nn::NnError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse grouping used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use pedsafe_nn::NnError;
        match self {
            Error::InvalidArgument(_) | Error::Generation(_) | Error::VehicleTypeMismatch(_) | Error::Contract(_) => ErrorKind::Usage,
            Error::Training(_) | Error::DegenerateStart(_) => ErrorKind::Numeric,
            Error::Nn(NnError::NonFinite(_) | NnError::NonFiniteGradient(_) | NnError::Domain(_)) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
