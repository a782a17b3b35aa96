use std::path::PathBuf;

/// Errors raised across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid coordinate: lat={lat}, lon={lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("format error in {context}: {message}")]
    Format { context: String, message: String },

    #[error("share undefined: mine mask covers every pixel")]
    UndefinedShare,

    #[error("degenerate input: {0}")]
    Degenerate(&'static str),

    #[error("insufficient data: need at least {needed} values, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("not estimable: {0}")]
    NotEstimable(String),

    #[error("fixed-effect sweeps did not converge after {iterations} iterations (last delta {delta:e})")]
    NonConvergence { iterations: usize, delta: f64 },

    #[error("cluster-robust variance needs at least two clusters, got {0}")]
    SingleCluster(usize),

    #[error("duplicate key: {0}")]
    DuplicateKey(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing input file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
