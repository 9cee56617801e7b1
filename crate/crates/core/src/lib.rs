//! Two-step pseudo-likelihood GEE estimation for marginal GLMs on longitudinal data.
//!
//! The pipeline fits a working-independence GEE, estimates the average
//! within-subject correlation from its residuals, solves the pseudo-likelihood
//! equation built on that estimate and attaches a sandwich covariance. Around
//! it sit regularity diagnostics for a concrete dataset and a seeded Monte
//! Carlo harness.

pub mod diagnostics;
pub mod error;
pub mod estimator;
pub mod json;
pub mod matkernel;
pub mod model;
pub mod normal;
pub mod simulator;

pub use error::{GeeError, Result};
