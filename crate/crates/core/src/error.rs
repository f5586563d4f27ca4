use thiserror::Error;

/// Everything that can go wrong across the library.
///
/// The variants map onto the CLI exit codes (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("site (n={level}, x={site:?}) lies outside the environment window")]
    WindowBounds { level: i64, site: Vec<i64> },

    #[error("resource limit: {what} needs {required} entries, cap is {cap}")]
    Resource {
        what: String,
        required: u128,
        cap: u128,
    },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("velocity {xi:?} is outside the interior of the rate-function domain")]
    Domain { xi: Vec<f64> },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("estimate undefined: {0}")]
    EstimateUndefined(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse(_) | Error::Json(_) | Error::Dimension { .. } | Error::Domain { .. } => 2,
            Error::Resource { .. } => 3,
            Error::NonConvergence { .. } => 4,
            _ => 1,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn resource(what: impl Into<String>, required: u128, cap: u128) -> Self {
        Error::Resource {
            what: what.into(),
            required,
            cap,
        }
    }
}
