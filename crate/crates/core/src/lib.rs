//! Wavelet-based residual network for removing column stripe noise from
//! grayscale images, with its own small autodiff engine, noise synthesis,
//! training loop, metrics and classical baselines.

pub mod attention;
pub mod baselines;
pub mod degrade;
pub mod error;
pub mod evaluation;
pub mod gray;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
