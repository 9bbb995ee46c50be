use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate prior: {0}")]
    DegeneratePrior(String),

    #[error("{what} is ill-conditioned (condition number {condition:.3e})")]
    Conditioning { what: String, condition: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("improper posterior: {0}")]
    ImproperPosterior(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error("infeasible generator spec: {0}")]
    Infeasible(String),

    #[error("unreliable estimate: {0}")]
    Unreliable(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad inputs rather than numerical trouble.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::Dimension(_)
                | Error::DegeneratePrior(_)
                | Error::Io(_)
                | Error::Csv(_)
                | Error::Json(_)
        )
    }
}
