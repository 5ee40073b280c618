use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate benchmark: return variance is zero")]
    DegenerateBenchmark,

    #[error("degenerate pool: maximum sigma must be positive, got {0}")]
    DegeneratePool(f64),

    #[error("no risk score for stock {0}")]
    MissingScore(String),

    #[error("stock {0} is not classified")]
    Unclassified(String),

    #[error("oversell of {stock}: selling {requested} shares with {held} held")]
    Oversell {
        stock: String,
        requested: u64,
        held: u64,
    },

    #[error("likelihood undefined: history has no sells")]
    NoSells,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
