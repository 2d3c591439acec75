//! Scenario loading, metric computation, output writers and parameter
//! sweeps for the `dgk` runner.

pub mod metrics;
pub mod output;
pub mod run;
pub mod scenario;
pub mod sweep;

pub use metrics::MetricsSummary;
pub use run::{run_scenario, RunResult};
pub use scenario::{Budget, ModelKind, Overrides, Scenario};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("scenario field '{path}': {message}")]
    Parse { path: String, message: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] dgk::Error),
}

impl From<std::io::Error> for BenchError {
    fn from(e: std::io::Error) -> Self {
        BenchError::Io(e.to_string())
    }
}

impl From<csv::Error> for BenchError {
    fn from(e: csv::Error) -> Self {
        BenchError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for BenchError {
    fn from(e: serde_json::Error) -> Self {
        BenchError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;
