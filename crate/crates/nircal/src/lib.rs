//! Calibration pipeline for predicting tablet drug content from NIR spectra.
//!
//! The crate covers the full workflow: dataset handling and splits
//! ([`dataset`]), scatter-removing preprocessing with optional spectral
//! augmentation ([`preprocess`]), a latent-variable linear baseline
//! ([`pls`]), a small 1-D convolutional regressor trained with Adadelta
//! ([`nn`]), Gaussian-process hyperparameter search ([`hyperopt`]), metric
//! reporting ([`report`]) and the file-based pipeline stages behind the CLI
//! ([`pipeline`]).

pub mod dataset;
pub mod error;
pub mod hyperopt;
mod linalg;
pub mod nn;
pub mod pipeline;
pub mod pls;
pub mod report;
pub mod preprocess;

pub use error::{Error, Result};
