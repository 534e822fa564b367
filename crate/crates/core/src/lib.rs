//! Fisher autoencoder for unsupervised anomaly detection in multivariate
//! engine sensor data.
//!
//! The encoder maps a normalized sensor vector to a diagonal Gaussian
//! posterior over a small latent space, the decoder maps latent points back
//! to sensor space, and a learnable Gaussian mixture serves as the latent
//! prior. Training minimizes a score-matching (Fisher divergence) objective;
//! detection thresholds the reconstruction error at a calibrated percentile.
//! A standard VAE trained on the negative ELBO is included as a baseline.

pub mod adkernel;
pub mod array;
pub mod checkpoint;
pub mod cmapss;
pub mod densities;
pub mod detector;
pub mod error;
pub mod fisher_loss;
pub mod model;
pub mod networks;
pub mod trainer;

pub use array::Array;
pub use error::{Error, Result};
