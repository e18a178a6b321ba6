//! Rate calibration for resonant MEMS gyroscopes.
//!
//! The crate turns multi-channel demodulated gyro outputs into rotation rate
//! with three calibrators (a constant scale factor, boosted regression trees
//! and a small MLP) and scores them with MSE, R² and Allan-deviation noise
//! figures. A synthetic gyro in [`sim`] supplies data with known ground truth.

pub mod dataio;
pub mod error;
pub mod features;
pub mod gbrt;
pub mod linear;
pub mod metrics;
pub mod mlp;
pub mod pipeline;
pub mod sim;

pub use error::{Error, Result};

use ndarray::ArrayView2;

/// A trained model mapping feature rows to rotation rate.
pub trait Predictor {
    fn n_features(&self) -> usize;
    fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>>;
}
