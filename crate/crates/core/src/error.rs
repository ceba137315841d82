use thiserror::Error;

pub type Result<T, E = FedoplError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FedoplError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("propensity fit needs at least two observed actions (only action {0} present); fall back to the uniform model")]
    SingleAction(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("client {0} has positive sampling weight but no data")]
    MissingClientData(usize),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl FedoplError {
    /// True for errors caused by bad inputs rather than failures while running.
    pub fn is_configuration(&self) -> bool {
        matches!(
            self,
            FedoplError::Config(_)
                | FedoplError::Dimension { .. }
                | FedoplError::InvalidArgument(_)
        )
    }
}
