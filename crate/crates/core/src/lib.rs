//! Ensemble Kalman updates, their exact Kalman and mean-field references,
//! covariance estimators with thresholding localization, and a seeded
//! Monte Carlo harness for checking error rates.

pub mod cli;
pub mod eki;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod filter;
pub mod matrix;
pub mod models;
pub mod operators;
pub mod oracle;
pub mod rng;
pub mod updates;

pub use error::{Error, Result};
pub use matrix::{Matrix, Vector};
