//! Error type shared by every module of the crate.

use thiserror::Error;

/// Failures surfaced by fitting, estimation, inference and simulation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetaError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("matrix is not positive semi-definite: leading minor {minor} has pivot {pivot:.3e}")]
    NotPsd { minor: usize, pivot: f64 },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("design matrix is rank deficient (rank {rank} < {q}); dependent columns: {dependent:?}")]
    RankDeficient {
        rank: usize,
        q: usize,
        dependent: Vec<usize>,
    },

    #[error("ill-conditioned covariance block for study '{study}': min eigenvalue {min_eigenvalue:.3e}")]
    Conditioning { study: String, min_eigenvalue: f64 },

    #[error("REML did not converge after {iterations} iterations (gradient norm {gradient_norm:.3e})")]
    NonConvergence {
        iterations: usize,
        gradient_norm: f64,
        best: Vec<f64>,
    },

    #[error("degrees of freedom error: {0}")]
    DegreesOfFreedom(String),

    #[error("leverage {leverage} too close to one for study '{study}', row {row}")]
    Leverage {
        study: String,
        row: usize,
        leverage: f64,
    },

    #[error("covariance matrix is singular or indefinite (min eigenvalue {min_eigenvalue:.3e})")]
    SingularCovariance { min_eigenvalue: f64 },

    #[error("test not applicable: {0}")]
    NotApplicable(String),

    #[error("scenario failed: {0}")]
    Scenario(String),

    #[error("io error: {0}")]
    Io(String),
}

impl MetaError {
    /// Short, stable class name used when counting failures.
    pub fn class(&self) -> &'static str {
        match self {
            MetaError::Domain(_) => "domain",
            MetaError::NotPsd { .. } => "not_psd",
            MetaError::Degenerate(_) => "degenerate",
            MetaError::Input(_) => "input",
            MetaError::RankDeficient { .. } => "rank_deficient",
            MetaError::Conditioning { .. } => "conditioning",
            MetaError::NonConvergence { .. } => "non_convergence",
            MetaError::DegreesOfFreedom(_) => "degrees_of_freedom",
            MetaError::Leverage { .. } => "leverage",
            MetaError::SingularCovariance { .. } => "singular_covariance",
            MetaError::NotApplicable(_) => "not_applicable",
            MetaError::Scenario(_) => "scenario",
            MetaError::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for MetaError {
    fn from(e: std::io::Error) -> Self {
        MetaError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, MetaError>;
