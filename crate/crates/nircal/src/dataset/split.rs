//! Train/validation/test split schemes.

use super::{DataSplits, Instrument, SpectraSet, SplitProvenance};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random interpolation split.
///
/// The test subset is a uniform random fraction of the instrument-2 samples;
/// the validation subset is a uniform random fraction of the instrument-1
/// samples; the remaining instrument-1 samples form the training subset.
/// Instrument-2 samples not drawn for test are left out entirely, so the
/// model never trains on the target instrument. Subset membership is random
/// but each subset keeps the parent row order.
pub fn standard_split(
    set: &SpectraSet,
    test_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> Result<DataSplits> {
    for (name, f) in [("test_fraction", test_fraction), ("val_fraction", val_fraction)] {
        if !(f.is_finite() && 0.0 < f && f < 1.0) {
            return Err(Error::InvalidSplit {
                msg: format!("{name} must lie strictly between 0 and 1, got {f}"),
            });
        }
    }
    let inst1 = set.indices_of(Instrument::One);
    let inst2 = set.indices_of(Instrument::Two);
    if inst1.is_empty() || inst2.is_empty() {
        return Err(Error::InvalidSplit {
            msg: "standard split needs samples from both instruments".into(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_test = (test_fraction * inst2.len() as f64).round() as usize;
    let n_val = (val_fraction * inst1.len() as f64).round() as usize;

    let mut pool2 = inst2.clone();
    pool2.shuffle(&mut rng);
    let mut test_idx: Vec<usize> = pool2[..n_test.min(pool2.len())].to_vec();
    test_idx.sort_unstable();

    let mut pool1 = inst1.clone();
    pool1.shuffle(&mut rng);
    let mut val_idx: Vec<usize> = pool1[..n_val.min(pool1.len())].to_vec();
    let mut train_idx: Vec<usize> = pool1[n_val.min(pool1.len())..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();

    for (name, idx) in [
        ("train", &train_idx),
        ("validation", &val_idx),
        ("test", &test_idx),
    ] {
        if idx.is_empty() {
            return Err(Error::EmptySubset {
                subset: match name {
                    "train" => "train",
                    "validation" => "validation",
                    _ => "test",
                },
            });
        }
    }

    let splits = DataSplits {
        train: set.select(&train_idx)?,
        validation: set.select(&val_idx)?,
        test: set.select(&test_idx)?,
        provenance: SplitProvenance::Standard {
            test_fraction,
            val_fraction,
            seed,
        },
    };
    splits.assert_disjoint()?;
    Ok(splits)
}

/// Concentration-band extrapolation split.
///
/// Training: instrument-1 samples strictly below `train_below_mg`.
/// Validation: instrument-1 samples in the closed band
/// `[train_below_mg, val_upper_mg]`; samples exactly on either boundary land
/// here. Test: instrument-2 samples strictly above `val_upper_mg`, so the
/// test concentrations are never seen during training.
pub fn extrapolation_split(
    set: &SpectraSet,
    train_below_mg: f64,
    val_upper_mg: f64,
) -> Result<DataSplits> {
    if !(train_below_mg.is_finite() && val_upper_mg.is_finite()) || train_below_mg > val_upper_mg {
        return Err(Error::InvalidSplit {
            msg: format!("bad concentration bands: train below {train_below_mg}, validation up to {val_upper_mg}"),
        });
    }
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    let mut test_idx = Vec::new();
    for i in 0..set.n_samples() {
        let c = set.reference_mg()[i];
        match set.instrument()[i] {
            Instrument::One => {
                if c < train_below_mg {
                    train_idx.push(i);
                } else if c <= val_upper_mg {
                    val_idx.push(i);
                }
            }
            Instrument::Two => {
                if c > val_upper_mg {
                    test_idx.push(i);
                }
            }
        }
    }
    if train_idx.is_empty() {
        return Err(Error::EmptySubset { subset: "train" });
    }
    if val_idx.is_empty() {
        return Err(Error::EmptySubset {
            subset: "validation",
        });
    }
    if test_idx.is_empty() {
        return Err(Error::EmptySubset { subset: "test" });
    }
    let splits = DataSplits {
        train: set.select(&train_idx)?,
        validation: set.select(&val_idx)?,
        test: set.select(&test_idx)?,
        provenance: SplitProvenance::Extrapolation {
            train_below_mg,
            val_upper_mg,
        },
    };
    splits.assert_disjoint()?;
    Ok(splits)
}
