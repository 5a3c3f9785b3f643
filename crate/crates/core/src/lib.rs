//! Bivariate mixed-effects meta-regression with cluster-robust covariance
//! estimation, small-sample tests, and a Monte Carlo coverage harness.

pub mod effects;
pub mod cli;
pub mod error;
pub mod fit;
pub mod inference;
pub mod linalg;
pub mod metamodel;
pub mod robust;
pub mod simulate;
pub mod statdist;

pub use error::{MetaError, Result};
