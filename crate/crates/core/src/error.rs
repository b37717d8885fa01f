use thiserror::Error;

use crate::landscape::Verdict;

#[derive(Debug, Error)]
pub enum UfmError {
    #[error("invalid problem: {0}")]
    InvalidSpec(String),

    #[error("invalid value for `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("shape mismatch for {what}: expected {expected:?}, found {found:?}")]
    Shape { what: String, expected: (usize, usize), found: (usize, usize) },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("malformed matrix file (line {line}): {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("operation requires d = K, got K = {k}, d = {d}")]
    NotSquareCase { k: usize, d: usize },

    #[error("no null space: smallest singular value {smallest:e} exceeds threshold {threshold:e}")]
    NoNullSpace { smallest: f64, threshold: f64 },

    #[error("point is not a strict saddle (verdict {verdict:?})")]
    NotSaddle { verdict: Verdict },

    #[error("no uncovered singular value above {threshold:e} (largest uncovered {largest:e})")]
    NoUncoveredSigma { largest: f64, threshold: f64 },

    #[error("point is not critical (gradient norm {grad_norm:e})")]
    NotCritical { grad_norm: f64 },

    #[error("scalar search failed to bracket a minimizer below t = {t_max:e}")]
    Bracket { t_max: f64 },

    #[error("constructed point failed certification: {0}")]
    Certification(String),

    #[error("divergence at iteration {iter}: objective {value}")]
    Divergence { iter: usize, value: f64 },

    #[error("escape at iteration {iter} found no decreasing step (measured curvature {curvature:e})")]
    EscapeFailed { iter: usize, curvature: f64 },

    #[error("domain error: {0}")]
    Domain(String),
}

pub type Result<T> = std::result::Result<T, UfmError>;
