use thiserror::Error;

/// Errors produced anywhere in the estimation and inference pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("quadrature did not converge: estimated error {achieved:.3e} exceeds tolerance {requested:.3e}")]
    Quadrature { achieved: f64, requested: f64 },

    #[error("precision row {row} infeasible even after inflating gamma to {gamma:.3e}")]
    Infeasible { row: usize, gamma: f64 },

    #[error("linear program for row {row} did not finish within {iterations} pivots")]
    LpIterationLimit { row: usize, iterations: usize },

    #[error("nonpositive precision diagonal at coordinate {coordinate} (value {value:.3e}); cannot studentize")]
    NonPositiveDiagonal { coordinate: usize, value: f64 },

    #[error("Cholesky factorization failed at pivot {0}")]
    NotPositiveDefinite(usize),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("configuration file: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Tags the error with the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Error {
        match self {
            Error::Stage { .. } => self,
            other => Error::Stage { stage, source: Box::new(other) },
        }
    }
}
