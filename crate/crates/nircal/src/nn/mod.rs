//! 1-D convolutional regression network with hand-written forward and
//! backward passes, Adadelta updates, and a binary weight container.
//!
//! Architecture, in order: additive input noise (training only), two valid
//! cross-correlation layers with ReLU, flatten, inverted dropout (training
//! only), a dense hidden layer (linear), and a scalar linear output. Targets
//! stay in milligrams end to end.

mod adadelta;
mod layers;
pub mod loss;
mod model;
mod serialize;
mod tensors;
mod train;

pub use adadelta::{adadelta_step, AdadeltaState};
pub use model::{Cache, CnnModel, Gradients, TrainNoise};
pub use serialize::{load_model, save_model};
pub use train::{train, EpochRecord, TrainConfig, TrainHistory};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Structural description of the network. Validation enforces only what the
/// arithmetic needs (positive sizes, kernels that fit the input, a dropout
/// probability below one); search ranges for tuning live with the optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnSpec {
    /// Number of spectral points the network consumes.
    pub input_len: usize,
    /// Channels produced by the first convolution.
    pub kernels1: usize,
    /// Filter length of the first convolution.
    pub filter_len1: usize,
    /// Channels produced by the second convolution.
    pub kernels2: usize,
    /// Filter length of the second convolution.
    pub filter_len2: usize,
    /// Probability of zeroing a flattened unit during training.
    pub dropout_rate: f64,
    /// Width of the dense hidden layer.
    pub dense_units: usize,
    /// Standard deviation of the additive input noise used during training.
    pub noise_std: f64,
}

impl CnnSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Error::InvalidNetworkShape { msg };
        if self.input_len < 2 {
            return Err(bad(format!(
                "input length must be at least 2, got {}",
                self.input_len
            )));
        }
        if self.kernels1 == 0 || self.kernels2 == 0 {
            return Err(bad("kernel counts must be positive".into()));
        }
        if self.filter_len1 == 0 || self.filter_len2 == 0 {
            return Err(bad("filter lengths must be positive".into()));
        }
        if self.dense_units == 0 {
            return Err(bad("dense layer needs at least one unit".into()));
        }
        // Both valid convolutions must produce at least one output:
        // input_len - filter_len1 - filter_len2 + 2 >= 1.
        if self.filter_len1 + self.filter_len2 > self.input_len + 1 {
            return Err(bad(format!(
                "filters of lengths {} and {} do not fit an input of {} points",
                self.filter_len1, self.filter_len2, self.input_len
            )));
        }
        if !(self.dropout_rate.is_finite() && (0.0..1.0).contains(&self.dropout_rate)) {
            return Err(bad(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(bad(format!(
                "noise level must be finite and non-negative, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }

    /// Output length of the first convolution.
    pub fn len1(&self) -> usize {
        self.input_len - self.filter_len1 + 1
    }

    /// Output length of the second convolution.
    pub fn len2(&self) -> usize {
        self.len1() - self.filter_len2 + 1
    }

    /// Flattened feature count entering the dense layer.
    pub fn flat_len(&self) -> usize {
        self.kernels2 * self.len2()
    }
}

#[cfg(test)]
mod spec_tests {
    use super::*;

    fn base() -> CnnSpec {
        CnnSpec {
            input_len: 600,
            kernels1: 4,
            filter_len1: 29,
            kernels2: 2,
            filter_len2: 22,
            dropout_rate: 0.25,
            dense_units: 16,
            noise_std: 0.01,
        }
    }

    #[test]
    fn derived_lengths_follow_valid_convolution_arithmetic() {
        let s = base();
        assert_eq!(s.len1(), 572);
        assert_eq!(s.len2(), 551);
        assert_eq!(s.flat_len(), 2 * 551);
        s.validate().unwrap();
    }

    #[test]
    fn oversized_filters_are_rejected() {
        let mut s = base();
        s.filter_len1 = 400;
        s.filter_len2 = 202;
        assert!(s.validate().is_err());
        s.filter_len2 = 201; // second convolution shrinks to one point, legal
        s.validate().unwrap();
        assert_eq!(s.len2(), 1);
    }

    #[test]
    fn dropout_must_stay_below_one() {
        let mut s = base();
        s.dropout_rate = 1.0;
        assert!(s.validate().is_err());
        s.dropout_rate = -0.1;
        assert!(s.validate().is_err());
        s.dropout_rate = 0.0;
        s.validate().unwrap();
    }

    #[test]
    fn zero_sizes_are_rejected() {
        for field in 0..4 {
            let mut s = base();
            match field {
                0 => s.kernels1 = 0,
                1 => s.filter_len1 = 0,
                2 => s.kernels2 = 0,
                _ => s.dense_units = 0,
            }
            assert!(s.validate().is_err());
        }
    }

    #[test]
    fn negative_noise_is_rejected() {
        let mut s = base();
        s.noise_std = -0.01;
        assert!(s.validate().is_err());
    }
}
