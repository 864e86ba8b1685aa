use thiserror::Error;

/// Errors raised by estimation, simulation and I/O.
#[derive(Debug, Error)]
pub enum PrteError {
    #[error("invalid bandwidth {name} = {value}")]
    InvalidBandwidth { name: &'static str, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("insufficient sample: n = {n} is too small for {folds} folds (need n >= {needed})")]
    InsufficientSample { n: usize, folds: usize, needed: usize },

    #[error("identification failure: {0}")]
    Identification(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("argument {value} outside the domain of {what}")]
    Domain { what: &'static str, value: f64 },

    #[error("quadrature did not converge (estimate {estimate}, error bound {error})")]
    Quadrature { estimate: f64, error: f64 },

    #[error("{path}:{line}: {message}")]
    Ingest {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{failures} of {replications} replications failed (limit 5%)")]
    TooManyFailures {
        failures: usize,
        replications: usize,
        report: Box<crate::montecarlo::McReport>,
    },
}

pub type Result<T> = std::result::Result<T, PrteError>;

impl PrteError {
    /// Process exit code category used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            PrteError::InvalidBandwidth { .. }
            | PrteError::Config(_)
            | PrteError::InsufficientSample { .. } => 2,
            PrteError::Dataset(_) | PrteError::Ingest { .. } => 3,
            PrteError::Identification(_)
            | PrteError::Numerical(_)
            | PrteError::Domain { .. }
            | PrteError::Quadrature { .. }
            | PrteError::TooManyFailures { .. } => 4,
            PrteError::Io { .. } => 5,
        }
    }
}
