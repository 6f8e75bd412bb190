use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not agree.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller broke an operation's contract (wrong call order, missing state).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    /// Malformed input data; `row` is 1-based and counts the header.
    #[error("ingestion error at row {row}: {message}")]
    Ingest { row: usize, message: String },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("mapping error: {0}")]
    Mapping(String),

    /// Training produced a non-finite loss.
    #[error("numeric abort at epoch {epoch}, batch {batch}: loss {loss}; parameter norms: {norms}")]
    NumericAbort {
        epoch: usize,
        batch: usize,
        loss: f64,
        norms: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for this error class: 2 usage/config, 3 data, 4 numeric abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Mapping(_) | Error::Contract(_) => 2,
            Error::NumericAbort { .. } => 4,
            Error::Dimension(_)
            | Error::Ingest { .. }
            | Error::Graph(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => 3,
        }
    }
}
