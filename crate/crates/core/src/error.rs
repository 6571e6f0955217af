use thiserror::Error;

/// Errors raised across the inference stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("natural parameter is not negative definite")]
    NotNegativeDefinite,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("covariance lost positive definiteness in {0}")]
    NotSpd(&'static str),

    #[error("variational family does not match the model: {0}")]
    ModelMismatch(String),

    #[error("invalid potential bounds: log lower {lower} must be below log upper {upper}")]
    BadBounds { lower: f64, upper: f64 },

    #[error("backward weight row {row} is degenerate (all log-weights are -inf or NaN)")]
    DegenerateRow { row: usize },

    #[error("non-finite statistic at particle {particle}: {term}")]
    NonFiniteStatistic { particle: usize, term: &'static str },

    #[error("accept-reject backward sampling needs a bound on the potential")]
    MissingBound,

    #[error("finite-difference check produced a non-finite function value at coordinate {0}")]
    NonFiniteFunctionValue(usize),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("observation stream is empty")]
    EmptyStream,

    #[error("evaluation needs the true latent states")]
    MissingTruth,

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical abort at step {step}: {source}")]
    NumericalAbort {
        step: usize,
        dump: Option<std::path::PathBuf>,
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

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::MissingColumn(_) | Error::EmptyStream | Error::MissingTruth => 2,
            Error::NumericalAbort { .. }
            | Error::NonFiniteStatistic { .. }
            | Error::DegenerateRow { .. }
            | Error::NotNegativeDefinite
            | Error::NotSpd(_) => 3,
            _ => 1,
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
