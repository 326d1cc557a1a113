use thiserror::Error;

/// One row of the dual-ascent trace.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub residual_inf: f64,
    pub g_value: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdlError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("account {id} is insolvent at the ADL price (equity {equity})")]
    Insolvent { id: String, equity: f64 },
    #[error("unsupported model: {0}")]
    Unsupported(String),
    #[error("dual ascent stopped after {iterations} iterations with residual {residual:e}")]
    Convergence {
        iterations: usize,
        residual: f64,
        trace: Box<Vec<IterRecord>>,
    },
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, AdlError>;

pub(crate) fn domain(msg: impl Into<String>) -> AdlError {
    AdlError::Domain(msg.into())
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(AdlError::Dimension { expected, got })
    }
}

pub(crate) fn check_level(beta: f64) -> Result<()> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(domain(format!("level {beta} must lie in (0, 1)")))
    }
}
