use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value at tape node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("preimage inconsistency: |f(z) - x| = {residual:.3e} exceeds {tol:.1e}")]
    Preimage { residual: f64, tol: f64 },

    #[error("degenerate column {column}: standard deviation below 1e-12")]
    DegenerateColumn { column: usize },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("training aborted at epoch {epoch}, step {step} (gamma_sq = {gamma_sq:.3e}): {reason}")]
    Training {
        epoch: usize,
        step: usize,
        gamma_sq: f64,
        reason: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
