//! Interval anomaly detection for multivariate time series and counterfactual
//! attribution of each detected interval to a subset of variables.

pub mod app;
pub mod attribution;
pub mod counterfactual;
pub mod detector;
pub mod diagnostics;
pub mod error;
pub mod gaussian;
pub mod series;
pub mod synth;

pub use error::{Error, Result};
