use thiserror::Error;

use crate::comm::WireError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("pyramid level {level}: {height}x{width} grid is not divisible by {factor}")]
    NotDivisible {
        level: usize,
        height: usize,
        width: usize,
        factor: usize,
    },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("cell size mismatch: source {src} m, destination {dst} m")]
    CellSizeMismatch { src: f64, dst: f64 },

    #[error("could not place object {index} after {attempts} attempts")]
    PlacementFailure { index: usize, attempts: usize },

    #[error("value {value} outside the domain of {context}")]
    Domain { context: &'static str, value: f64 },

    #[error("depth bin {bin} is out of range for {bins} bins (column {column})")]
    InvalidBin { column: usize, bin: usize, bins: usize },

    #[error("token index ({row}, {col}) outside a {height}x{width} grid")]
    IndexOutOfBounds {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    #[error("link {sender}->{receiver} used {units:.4} units, above the budget of {budget:.4}")]
    BudgetExceeded {
        sender: u32,
        receiver: u32,
        units: f64,
        budget: f64,
    },

    #[error("unknown pipeline variant `{0}`")]
    UnknownVariant(String),

    #[error(transparent)]
    Wire(#[from] WireError),

    #[error("config error at `{location}`: {message}")]
    Config { location: String, message: String },

    #[error("frame {frame_ms} ms, ego {ego}: {source}")]
    Frame {
        frame_ms: i64,
        ego: u32,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn config(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            location: location.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by an invalid scenario configuration.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config { .. } | Error::UnknownVariant(_) => true,
            Error::Frame { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
