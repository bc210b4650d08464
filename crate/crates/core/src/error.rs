use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("cholesky factorization of the covariance failed (size {0})")]
    Cholesky(usize),

    #[error("symbolic degree {degree} exceeds cap {cap}")]
    DegreeCap { degree: u32, cap: u32 },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("UFG condition violated: {0}")]
    Ufg(String),

    #[error("integration blew up at t = {time}")]
    Blowup { time: f64 },

    #[error("finite-difference stencil failed: {0}")]
    Stencil(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("cost guard: {0}")]
    CostGuard(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
