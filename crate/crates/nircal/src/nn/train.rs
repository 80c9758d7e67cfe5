//! Mini-batch training loop: shuffled batches, Adadelta updates, per-epoch
//! loss tracking in inference mode, and learning-rate halving on validation
//! plateaus.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adadelta::{adadelta_step, AdadeltaState};
use super::loss::huber;
use super::model::CnnModel;
use crate::dataset::SpectraSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Adadelta accumulator decay.
    pub rho: f64,
    /// Adadelta numerical floor.
    pub epsilon: f64,
    /// Huber elbow in milligrams.
    pub huber_delta: f64,
    /// Epochs without strict validation improvement before the learning
    /// rate is multiplied by `plateau_factor`.
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// Seed for the per-epoch batch shuffles (independent of the model's
    /// own noise generator).
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 250,
            batch_size: 45,
            learning_rate: 0.094,
            rho: 0.95,
            epsilon: 1e-8,
            huber_delta: 1.0,
            plateau_patience: 25,
            plateau_factor: 0.5,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Error::InvalidConfig { msg };
        if self.batch_size == 0 {
            return Err(bad("batch size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(bad(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.rho.is_finite() && (0.0..1.0).contains(&self.rho)) {
            return Err(bad(format!("decay rho must lie in [0, 1), got {}", self.rho)));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(bad(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.huber_delta.is_finite() && self.huber_delta > 0.0) {
            return Err(bad(format!(
                "huber delta must be positive, got {}",
                self.huber_delta
            )));
        }
        if self.plateau_patience == 0 {
            return Err(bad("plateau patience must be at least 1".into()));
        }
        if !(self.plateau_factor.is_finite()
            && self.plateau_factor > 0.0
            && self.plateau_factor <= 1.0)
        {
            return Err(bad(format!(
                "plateau factor must lie in (0, 1], got {}",
                self.plateau_factor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Inference-mode Huber loss on the training set after this epoch.
    pub train_loss: f64,
    /// Inference-mode Huber loss on the validation set after this epoch.
    pub val_loss: f64,
    /// Learning rate that was in effect during this epoch.
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn final_val_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.val_loss)
    }

    /// Mean validation loss over the last `k` epochs (or fewer if the run
    /// was shorter). Used as a smoothed tuning objective.
    pub fn mean_val_loss_last(&self, k: usize) -> Option<f64> {
        if self.epochs.is_empty() || k == 0 {
            return None;
        }
        let tail = &self.epochs[self.epochs.len().saturating_sub(k)..];
        Some(tail.iter().map(|e| e.val_loss).sum::<f64>() / tail.len() as f64)
    }
}

/// Learning-rate halving on validation plateaus. Only a *strictly* lower
/// validation loss counts as improvement; after `patience` consecutive
/// non-improving epochs the rate is scaled by `factor` and the counter
/// restarts.
#[derive(Debug, Clone)]
pub(crate) struct PlateauSchedule {
    best: f64,
    wait: usize,
    patience: usize,
    factor: f64,
}

impl PlateauSchedule {
    pub fn new(patience: usize, factor: f64) -> Self {
        PlateauSchedule {
            best: f64::INFINITY,
            wait: 0,
            patience,
            factor,
        }
    }

    pub fn observe(&mut self, val_loss: f64, learning_rate: &mut f64) {
        if val_loss < self.best {
            self.best = val_loss;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                *learning_rate *= self.factor;
                self.wait = 0;
            }
        }
    }
}

/// Train `model` in place. Each epoch shuffles the training rows with a
/// dedicated seeded generator, walks them in batches of `batch_size` (the
/// final batch may be smaller), and performs one Adadelta update per batch.
/// After the updates, training and validation losses are measured in
/// inference mode and recorded. A non-finite loss or gradient aborts with
/// an error carrying the history collected so far. `epochs = 0` records
/// nothing and leaves the model untouched.
pub fn train(
    model: &mut CnnModel,
    train_set: &SpectraSet,
    val_set: &SpectraSet,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    let x_train = train_set.absorbance();
    let y_train = train_set.reference_mg();
    let x_val = val_set.absorbance();
    let y_val = val_set.reference_mg();

    let n = x_train.nrows();
    let n_feat = x_train.ncols();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed);
    let mut state = AdadeltaState::new(model.spec());
    let mut lr = config.learning_rate;
    let mut plateau = PlateauSchedule::new(config.plateau_patience, config.plateau_factor);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let mut bx = Array2::zeros((chunk.len(), n_feat));
            let mut by = Array1::zeros(chunk.len());
            for (r, &idx) in chunk.iter().enumerate() {
                bx.row_mut(r).assign(&x_train.row(idx));
                by[r] = y_train[idx];
            }
            let noise = model.draw_noise(chunk.len());
            let (_, cache) = model.forward_train(bx.view(), &noise)?;
            let grads = model.backward(&cache, by.view(), config.huber_delta)?;
            if let Err(e) = adadelta_step(model, &mut state, &grads, lr, config.rho, config.epsilon)
            {
                return Err(match e {
                    Error::NonFinite { .. } => Error::NonFiniteTraining {
                        what: "gradients",
                        epoch,
                        history: Box::new(history),
                    },
                    other => other,
                });
            }
        }

        let train_residuals = residuals(model, x_train, y_train)?;
        let train_loss = huber(&train_residuals, config.huber_delta)?;
        let val_residuals = residuals(model, x_val, y_val)?;
        let val_loss = huber(&val_residuals, config.huber_delta)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::NonFiniteTraining {
                what: "loss",
                epoch,
                history: Box::new(history),
            });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            learning_rate: lr,
        });
        plateau.observe(val_loss, &mut lr);
    }
    Ok(history)
}

fn residuals(model: &CnnModel, x: &Array2<f64>, y: &Array1<f64>) -> Result<Vec<f64>> {
    let preds = model.forward_infer(x.view())?;
    Ok(preds.iter().zip(y.iter()).map(|(p, t)| p - t).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Instrument, WavelengthGrid};
    use crate::nn::CnnSpec;
    use rand::Rng;

    fn tiny_spec() -> CnnSpec {
        CnnSpec {
            input_len: 12,
            kernels1: 2,
            filter_len1: 3,
            kernels2: 2,
            filter_len2: 3,
            dropout_rate: 0.0,
            dense_units: 3,
            noise_std: 0.0,
        }
    }

    /// Random spectra with a target that is a fixed linear functional of
    /// the spectrum, so the network has something learnable.
    fn toy_set(seed: u64, n: usize) -> SpectraSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = WavelengthGrid::new(1000.0, 2.0, 12).unwrap();
        let x = Array2::from_shape_fn((n, 12), |_| rng.random_range(0.1..1.0));
        let y = Array1::from_shape_fn(n, |i| {
            let row = x.row(i);
            0.8 * row.sum() / 12.0 + 0.1 * row[3]
        });
        SpectraSet::new(
            grid,
            x,
            y,
            vec![Instrument::One; n],
            (0..n).map(|i| format!("toy-{i}")).collect(),
        )
        .unwrap()
    }

    fn quick_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            learning_rate: 1.0,
            plateau_patience: 50,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let mut model = CnnModel::new(tiny_spec(), 1).unwrap();
        let before: Vec<f64> = (0..model.n_params())
            .map(|i| model.param(i).unwrap())
            .collect();
        let train_set = toy_set(1, 20);
        let val_set = toy_set(2, 8);
        let history = train(&mut model, &train_set, &val_set, &quick_config(0)).unwrap();
        assert!(history.epochs.is_empty());
        for (i, b) in before.iter().enumerate() {
            assert_eq!(model.param(i).unwrap(), *b);
        }
    }

    #[test]
    fn training_reduces_loss_on_learnable_data() {
        let mut model = CnnModel::new(tiny_spec(), 1).unwrap();
        let train_set = toy_set(1, 40);
        let val_set = toy_set(2, 12);
        let history = train(&mut model, &train_set, &val_set, &quick_config(40)).unwrap();
        assert_eq!(history.epochs.len(), 40);
        let first = history.epochs[0].train_loss;
        let last = history.epochs[39].train_loss;
        assert!(
            last < 0.7 * first,
            "loss did not decrease: first {first}, last {last}"
        );
        assert_eq!(history.final_val_loss(), Some(history.epochs[39].val_loss));
    }

    #[test]
    fn same_seeds_give_bitwise_identical_runs() {
        let run = || {
            let mut model = CnnModel::new(tiny_spec(), 7).unwrap();
            let train_set = toy_set(3, 25);
            let val_set = toy_set(4, 10);
            let history = train(&mut model, &train_set, &val_set, &quick_config(5)).unwrap();
            let params: Vec<f64> = (0..model.n_params())
                .map(|i| model.param(i).unwrap())
                .collect();
            (history, params)
        };
        let (h1, p1) = run();
        let (h2, p2) = run();
        assert_eq!(h1, h2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn shuffle_seed_changes_the_trajectory() {
        let run = |shuffle_seed: u64| {
            let mut model = CnnModel::new(tiny_spec(), 7).unwrap();
            let train_set = toy_set(3, 25);
            let val_set = toy_set(4, 10);
            let config = TrainConfig {
                shuffle_seed,
                ..quick_config(5)
            };
            train(&mut model, &train_set, &val_set, &config).unwrap()
        };
        assert_ne!(run(0), run(1));
    }

    #[test]
    fn learning_rate_column_reflects_plateau_halving() {
        // A validation set identical to training plus an unreachable target
        // offset keeps val loss flat once progress stalls; rather than rely
        // on that, drive the schedule directly.
        let mut lr = 0.8;
        let mut s = PlateauSchedule::new(3, 0.5);
        s.observe(1.0, &mut lr); // improvement over infinity
        for _ in 0..3 {
            s.observe(1.0, &mut lr); // equal is not strict improvement
        }
        assert_eq!(lr, 0.4);
        // Counter restarts after a cut.
        s.observe(1.0, &mut lr);
        s.observe(1.0, &mut lr);
        assert_eq!(lr, 0.4);
        s.observe(1.0, &mut lr);
        assert_eq!(lr, 0.2);
        // A strict improvement resets the counter.
        s.observe(0.9, &mut lr);
        s.observe(0.95, &mut lr);
        s.observe(0.95, &mut lr);
        assert_eq!(lr, 0.2);
        s.observe(0.95, &mut lr);
        assert_eq!(lr, 0.1);
    }

    #[test]
    fn divergence_aborts_with_partial_history() {
        let mut model = CnnModel::new(tiny_spec(), 1).unwrap();
        let train_set = toy_set(1, 20);
        let val_set = toy_set(2, 8);
        let config = TrainConfig {
            learning_rate: 1e300,
            ..quick_config(3)
        };
        let err = train(&mut model, &train_set, &val_set, &config).unwrap_err();
        match err {
            Error::NonFiniteTraining { epoch, history, .. } => {
                assert_eq!(epoch, 1);
                assert!(history.epochs.is_empty());
            }
            other => panic!("expected divergence error, got {other}"),
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut model = CnnModel::new(tiny_spec(), 1).unwrap();
        let train_set = toy_set(1, 10);
        let val_set = toy_set(2, 5);
        for mutate in [
            |c: &mut TrainConfig| c.batch_size = 0,
            |c: &mut TrainConfig| c.learning_rate = 0.0,
            |c: &mut TrainConfig| c.rho = 1.0,
            |c: &mut TrainConfig| c.epsilon = 0.0,
            |c: &mut TrainConfig| c.huber_delta = 0.0,
            |c: &mut TrainConfig| c.plateau_patience = 0,
            |c: &mut TrainConfig| c.plateau_factor = 0.0,
            |c: &mut TrainConfig| c.plateau_factor = 1.5,
        ] {
            let mut config = quick_config(1);
            mutate(&mut config);
            assert!(train(&mut model, &train_set, &val_set, &config).is_err());
        }
    }

    #[test]
    fn history_tail_mean_handles_short_runs() {
        let history = TrainHistory {
            epochs: vec![
                EpochRecord {
                    epoch: 1,
                    train_loss: 1.0,
                    val_loss: 4.0,
                    learning_rate: 0.1,
                },
                EpochRecord {
                    epoch: 2,
                    train_loss: 0.5,
                    val_loss: 2.0,
                    learning_rate: 0.1,
                },
            ],
        };
        assert_eq!(history.mean_val_loss_last(1), Some(2.0));
        assert_eq!(history.mean_val_loss_last(2), Some(3.0));
        assert_eq!(history.mean_val_loss_last(10), Some(3.0));
        assert_eq!(TrainHistory::default().mean_val_loss_last(3), None);
    }

    #[test]
    fn final_batch_may_be_smaller_than_batch_size() {
        // 20 samples with batch size 8 -> batches of 8, 8, 4. The run must
        // complete and train on every sample (loss still decreases).
        let mut model = CnnModel::new(tiny_spec(), 1).unwrap();
        let train_set = toy_set(5, 20);
        let val_set = toy_set(6, 5);
        let history = train(&mut model, &train_set, &val_set, &quick_config(10)).unwrap();
        assert_eq!(history.epochs.len(), 10);
    }
}
