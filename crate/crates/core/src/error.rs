use thiserror::Error;

/// Errors raised by the estimation and inference pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameters, dimensions or configuration values.
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite or otherwise unusable input data.
    #[error("input error: {0}")]
    Input(String),

    /// A malformed cell or row encountered while reading a panel file.
    #[error("ingestion error at row {row}, column '{column}': {message}")]
    Ingest {
        row: usize,
        column: String,
        message: String,
    },

    /// A numerical routine failed to produce a usable result.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(
        "weak instrument for target (equation {equation}, covariate {covariate}): {detail}; \
         consider double selection (--method double-ls or double-lad)"
    )]
    WeakInstrument {
        equation: usize,
        covariate: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
