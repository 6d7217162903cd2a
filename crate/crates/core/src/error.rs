use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("aliasing: {modes} cosine modes cannot be resolved on {grid} grid nodes")]
    Aliasing { modes: usize, grid: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("drift evaluation failed on path {path} at t = {time}: {source}")]
    Drift {
        path: usize,
        time: f64,
        #[source]
        source: Box<Error>,
    },

    #[error(
        "Picard iteration on block [{start}, {end}] did not converge after {iterations} sweeps \
         (distances {distances:?}, ratios {ratios:?})"
    )]
    NonConvergence {
        start: f64,
        end: f64,
        iterations: usize,
        distances: Vec<f64>,
        ratios: Vec<f64>,
    },

    #[error("empirical contraction ratio {ratio} >= 1 at sweep {sweep} on block [{start}, {end}]")]
    ContractionLost {
        start: f64,
        end: f64,
        sweep: usize,
        ratio: f64,
        distances: Vec<f64>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
