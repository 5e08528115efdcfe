//! Reference calibrators for comparison: attitude-independent TWOSTEP bias
//! estimation and Tolles-Lawson compensation.

mod filter;
mod tolles_lawson;
mod twostep;

pub use filter::{Biquad, Cascade, FilterSpec};
pub use tolles_lawson::{tolles_lawson_calibrate, tolles_lawson_regressors, TlConfig, TlTerms, TollesLawsonCoeffs};
pub use twostep::{twostep_calibrate, twostep_with, TwoStepConfig, TwoStepResult};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("attitude diversity too low: centered design condition number {condition:e}")]
    IllConditioned { condition: f64 },
    #[error("regressors are rank deficient (condition number {condition:e})")]
    RankDeficient { condition: f64 },
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}
