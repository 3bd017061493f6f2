//! Probabilistic statistical downscaling with deep ensembles.
//!
//! A small convolutional network maps standardized coarse predictor fields
//! to a Gaussian (mean, variance) at every fine-grid point. Independently
//! trained members are merged into a single predictive Gaussian by matching
//! the first two moments of their equal-weight mixture, and the result is
//! scored by RMSE and central-interval coverage over future periods of a
//! synthetic nonstationary climate.

pub mod data;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod fsutil;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
