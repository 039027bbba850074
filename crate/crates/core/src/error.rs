//! Error type shared by every stage of the pipeline.

use thiserror::Error;

/// Errors raised by the solver, filters, samplers and I/O layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("equilibrium solver did not converge after {iterations} iterations (last change {final_residual:.3e})")]
    NonConvergence {
        iterations: usize,
        final_residual: f64,
    },

    #[error("root finder failed at grid point {index} (x = {x})")]
    RootFinder { index: usize, x: f64 },

    #[error("particle filter degenerated at period {period}: all weights underflowed")]
    FilterDegeneracy { period: usize },

    #[error("smoother requires the stored particle history; rerun the filter with history enabled")]
    MissingHistory,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("data error at line {line}: {message}")]
    Data { line: usize, message: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("replay differs from the manifest: {0}")]
    ReplayMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Process exit code for the CLI, one per error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_) | Error::InvalidConfig(_) => 2,
            Error::Data { .. } | Error::Csv(_) | Error::Json(_) => 3,
            Error::Io(_) => 4,
            Error::NonConvergence { .. } | Error::RootFinder { .. } => 5,
            Error::FilterDegeneracy { .. } | Error::MissingHistory => 6,
            Error::Domain(_) | Error::Numerical(_) => 7,
            Error::ReplayMismatch(_) => 8,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}
