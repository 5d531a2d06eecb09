use thiserror::Error;

/// Errors raised by graph construction, accounting, simulation and data loading.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("graph is disconnected ({components} components)")]
    Disconnected { components: usize },

    #[error("no connected draw after {attempts} attempts")]
    ConnectivityRetriesExhausted { attempts: u32 },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("row {row}, column {column}: {message}")]
    Cell {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("transition matrix is not symmetric (max asymmetry {max_asymmetry:e})")]
    NotSymmetric { max_asymmetry: f64 },

    #[error("transition matrix is not bistochastic")]
    NotBistochastic,

    #[error("graph is not regular (degrees range {min}..={max})")]
    NotRegular { min: usize, max: usize },

    #[error("second eigenvalue {lambda2} is numerically 1: no spectral gap")]
    NoSpectralGap { lambda2: f64 },

    #[error("eigendecomposition failed: {0}")]
    Eigensolver(String),

    #[error("no convergence within {iterations} iterations")]
    NonConvergence { iterations: u64 },

    #[error("noise sigma^2 = {sigma2} is below the required 2*alpha*(alpha-1) = {required}")]
    NoiseBelowGate { sigma2: f64, required: f64 },

    #[error("node pair ({u}, {v}) is invalid: {reason}")]
    InvalidPair { u: usize, v: usize, reason: &'static str },

    #[error("series diverges: {0}")]
    Divergent(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },

    #[error("target epsilon {target} is infeasible; achievable range is [{min_achievable}, {max_achievable}]")]
    Infeasible {
        target: f64,
        min_achievable: f64,
        max_achievable: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
