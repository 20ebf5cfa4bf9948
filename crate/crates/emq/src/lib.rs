//! Ensemble multi-quantile models: a Gaussian initial learner refined by
//! boosted monotonicity-preserving quantile updates, plus direct quantile
//! regression baselines, calibration metrics, and dataset utilities.

pub mod baselines;
pub mod data;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod quant;
pub mod run;

pub use error::{EmqError, Result};
