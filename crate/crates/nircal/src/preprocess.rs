//! Preprocessing: spectral augmentation, multiplicative scatter correction
//! with a polynomial baseline, and global standardization.
//!
//! Fitted state for the latter two is captured in a [`FittedChain`] that can
//! be serialized and re-applied to new spectra bit-exactly at prediction
//! time. Augmentation is a training-time dataset expansion and is skipped
//! when a chain is replayed for inference.

use crate::dataset::{SpectraSet, WavelengthGrid};
use crate::error::{Error, Result};
use crate::linalg;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Population mean and standard deviation over every absorbance entry of a
/// set, treated as one flat pool of values.
pub fn global_mean_std(set: &SpectraSet) -> (f64, f64) {
    let a = set.absorbance();
    let n = a.len() as f64;
    let mean = a.sum() / n;
    let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Global population standard deviation of a set's absorbance values.
/// Augmentation amplitudes are expressed in units of this number, always
/// taken from the unaugmented training split.
pub fn global_std(set: &SpectraSet) -> f64 {
    global_mean_std(set).1
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Offset amplitude as a multiple of the training-set global std.
    pub offset_scale: f64,
    /// Multiplicative gain half-width as a multiple of the training-set
    /// global std: gains are drawn from 1 ± mult_scale * train_std.
    pub mult_scale: f64,
    /// Uniform range for the slope factor `s`; the variant is multiplied by
    /// a linear ramp running from `2 - s` at the first wavelength to `s` at
    /// the last, which has mean exactly 1 across the grid.
    pub slope_range: (f64, f64),
    /// Number of perturbed copies emitted per input sample.
    pub copies: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            offset_scale: 0.10,
            mult_scale: 0.10,
            slope_range: (0.95, 1.05),
            copies: 9,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    fn validate(&self) -> Result<()> {
        for (name, v) in [("offset_scale", self.offset_scale), ("mult_scale", self.mult_scale)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig {
                    msg: format!("{name} must be non-negative, got {v}"),
                });
            }
        }
        let (lo, hi) = self.slope_range;
        if !(lo.is_finite() && hi.is_finite()) || lo > hi || lo <= 0.0 || hi >= 2.0 {
            return Err(Error::InvalidConfig {
                msg: format!("slope_range must satisfy 0 < low <= high < 2, got ({lo}, {hi})"),
            });
        }
        Ok(())
    }
}

/// Linear ramp from `2 - s` to `s` across `count` points; its mean over the
/// grid is exactly 1, so the slope perturbation tilts a spectrum without
/// shifting its average level.
fn slope_ramp(s: f64, count: usize) -> Array1<f64> {
    let denom = (count - 1) as f64;
    Array1::from_iter((0..count).map(|j| (2.0 - s) + 2.0 * (s - 1.0) * j as f64 / denom))
}

/// Expands a set with randomly perturbed copies of each spectrum.
///
/// Output rows are grouped per input sample: the untouched original followed
/// by its `copies` variants, so the originals form a subsequence of the
/// result. Each (sample, copy) pair draws from its own RNG substream, which
/// makes the expansion independent of evaluation order.
pub fn augment(set: &SpectraSet, config: &AugmentConfig, train_std: f64) -> Result<SpectraSet> {
    config.validate()?;
    if !train_std.is_finite() || train_std < 0.0 {
        return Err(Error::InvalidConfig {
            msg: format!("train_std must be non-negative, got {train_std}"),
        });
    }
    let n = set.n_samples();
    let p = set.grid().count();
    let copies = config.copies;
    let out_n = n * (copies + 1);
    let offset_amp = config.offset_scale * train_std;
    let mult_amp = config.mult_scale * train_std;
    let (slope_lo, slope_hi) = config.slope_range;

    let mut absorbance = Array2::<f64>::zeros((out_n, p));
    let mut reference = Array1::<f64>::zeros(out_n);
    let mut instruments = Vec::with_capacity(out_n);
    let mut ids = Vec::with_capacity(out_n);

    for i in 0..n {
        let base = set.spectrum(i);
        let row0 = i * (copies + 1);
        absorbance.row_mut(row0).assign(&base);
        reference[row0] = set.reference_mg()[i];
        instruments.push(set.instrument()[i]);
        ids.push(set.sample_ids()[i].clone());

        for k in 0..copies {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream((i * copies + k) as u64);
            let offset = rng.random_range(-offset_amp..=offset_amp);
            let gain = rng.random_range(1.0 - mult_amp..=1.0 + mult_amp);
            let s = rng.random_range(slope_lo..=slope_hi);
            let ramp = slope_ramp(s, p);
            let row = row0 + 1 + k;
            {
                let mut out = absorbance.row_mut(row);
                for j in 0..p {
                    out[j] = base[j] * gain * ramp[j] + offset;
                }
            }
            reference[row] = set.reference_mg()[i];
            instruments.push(set.instrument()[i]);
            ids.push(format!("{}#aug{}", set.sample_ids()[i], k + 1));
        }
    }
    SpectraSet::new(*set.grid(), absorbance, reference, instruments, ids)
}

// ---------------------------------------------------------------------------
// Scatter correction

/// Fitted scatter-correction state: a reference spectrum plus a polynomial
/// baseline basis on the wavelength axis rescaled to [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmscModel {
    grid: WavelengthGrid,
    order: usize,
    reference: Array1<f64>,
}

impl EmscModel {
    pub fn reference(&self) -> &Array1<f64> {
        &self.reference
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn grid(&self) -> &WavelengthGrid {
        &self.grid
    }

    /// Basis matrix: columns are the polynomial terms in ascending degree
    /// followed by the reference spectrum.
    fn basis(&self) -> Array2<f64> {
        build_basis(&self.grid, self.order, &self.reference)
    }
}

fn build_basis(grid: &WavelengthGrid, order: usize, reference: &Array1<f64>) -> Array2<f64> {
    let p = grid.count();
    let axis = grid.scaled_axis();
    let mut basis = Array2::<f64>::zeros((p, order + 2));
    for j in 0..p {
        let mut pw = 1.0;
        for d in 0..=order {
            basis[[j, d]] = pw;
            pw *= axis[j];
        }
        basis[[j, order + 1]] = reference[j];
    }
    basis
}

/// Fits a scatter-correction model on a training set: the reference spectrum
/// is the column-wise mean of the training spectra.
pub fn emsc_fit(train: &SpectraSet, order: usize) -> Result<EmscModel> {
    let p = train.grid().count();
    if order + 2 > p {
        return Err(Error::InvalidConfig {
            msg: format!("polynomial order {order} needs more than {} grid points", order + 2),
        });
    }
    let reference = train
        .absorbance()
        .mean_axis(ndarray::Axis(0))
        .expect("non-empty set");
    let basis = build_basis(train.grid(), order, &reference);

    // Rank check on the column-normalized basis: a reference that is itself
    // (numerically) a polynomial of the wavelength axis cannot anchor the
    // multiplicative coefficient.
    let cols = order + 2;
    let mut normalized = basis.clone();
    for c in 0..cols {
        let norm = normalized.column(c).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::CollinearBasis { sigma_min: 0.0 });
        }
        normalized.column_mut(c).mapv_inplace(|v| v / norm);
    }
    let sigma = linalg::singular_values(&normalized);
    let sigma_min = sigma[0];
    if sigma_min < 1e-10 {
        return Err(Error::CollinearBasis { sigma_min });
    }
    Ok(EmscModel {
        grid: *train.grid(),
        order,
        reference,
    })
}

/// Removes additive polynomial baseline and multiplicative gain from every
/// spectrum: each is least-squares decomposed on the basis, the polynomial
/// part subtracted and the remainder divided by the reference coefficient.
///
/// Correcting an already corrected spectrum is a fixed point (coefficients
/// come back as zero baseline, unit gain), so the operation is idempotent
/// within least-squares precision.
pub fn emsc_apply(model: &EmscModel, set: &SpectraSet) -> Result<SpectraSet> {
    if !model.grid.compatible(set.grid()) {
        return Err(Error::InvalidDataset {
            msg: "scatter-correction model was fitted on a different wavelength grid".into(),
        });
    }
    let basis = model.basis();
    let gram = basis.t().dot(&basis);
    let chol = linalg::cholesky(&gram).ok_or(Error::CollinearBasis {
        sigma_min: f64::NAN,
    })?;
    let order = model.order;
    let axis = model.grid.scaled_axis();
    let p = model.grid.count();

    let mut corrected = Array2::<f64>::zeros((set.n_samples(), p));
    for i in 0..set.n_samples() {
        let z = set.spectrum(i);
        let rhs = basis.t().dot(&z.to_owned());
        let theta = linalg::cho_solve(&chol, &rhs);
        let c = theta[order + 1];
        if c.abs() < 1e-8 {
            return Err(Error::DegenerateScatterFit {
                sample_id: set.sample_ids()[i].clone(),
                coeff: c,
            });
        }
        let mut out = corrected.row_mut(i);
        for j in 0..p {
            let mut baseline = 0.0;
            let mut pw = 1.0;
            for d in 0..=order {
                baseline += theta[d] * pw;
                pw *= axis[j];
            }
            out[j] = (z[j] - baseline) / c;
        }
    }
    set.replace_absorbance(corrected)
}

// ---------------------------------------------------------------------------
// Global standardization

/// Global standardization state. Application maps `x` to
/// `(x - mean) / (2 * std)`, putting the training pool at mean 0 and
/// standard deviation 0.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: f64,
    pub std: f64,
}

pub fn scaler_fit(train: &SpectraSet) -> Result<Scaler> {
    let (mean, std) = global_mean_std(train);
    if std == 0.0 {
        return Err(Error::ZeroSpread);
    }
    Ok(Scaler { mean, std })
}

/// Applies the standardization. Not idempotent: a second application maps
/// the data to mean `-mean/(2 std)` rather than leaving it in place.
pub fn scaler_apply(scaler: &Scaler, set: &SpectraSet) -> Result<SpectraSet> {
    if !(scaler.std.is_finite() && scaler.std > 0.0) {
        return Err(Error::ZeroSpread);
    }
    let denom = 2.0 * scaler.std;
    let corrected = set.absorbance().mapv(|v| (v - scaler.mean) / denom);
    set.replace_absorbance(corrected)
}

// ---------------------------------------------------------------------------
// Fitted chains

/// One fitted preprocessing step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum FittedStep {
    /// Training-time expansion; carried for provenance, skipped at
    /// prediction time.
    Augment { config: AugmentConfig, train_std: f64 },
    ScatterCorrection { model: EmscModel },
    Standardize { scaler: Scaler },
}

/// An ordered list of fitted preprocessing steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedChain {
    pub steps: Vec<FittedStep>,
}

impl FittedChain {
    /// Replays the chain on new spectra for prediction: augmentation steps
    /// are skipped, fitted transforms are applied in order.
    pub fn apply_infer(&self, set: &SpectraSet) -> Result<SpectraSet> {
        let mut current = set.clone();
        for step in &self.steps {
            current = match step {
                FittedStep::Augment { .. } => current,
                FittedStep::ScatterCorrection { model } => emsc_apply(model, &current)?,
                FittedStep::Standardize { scaler } => scaler_apply(scaler, &current)?,
            };
        }
        Ok(current)
    }

    pub fn has_augment(&self) -> bool {
        self.steps
            .iter()
            .any(|s| matches!(s, FittedStep::Augment { .. }))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("preprocessing chain", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("preprocessing chain", e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthesize, Instrument, SyntheticConfig};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn grid(count: usize) -> WavelengthGrid {
        WavelengthGrid::new(600.0, 2.0, count).unwrap()
    }

    fn small_set() -> SpectraSet {
        SpectraSet::new(
            grid(5),
            array![
                [0.2, 0.4, 0.6, 0.5, 0.3],
                [0.25, 0.45, 0.72, 0.61, 0.33],
                [0.18, 0.35, 0.55, 0.47, 0.28]
            ],
            array![180.0, 210.0, 160.0],
            vec![Instrument::One; 3],
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap()
    }

    #[test]
    fn global_std_is_population_std_over_all_entries() {
        let set = SpectraSet::new(
            grid(2),
            array![[0.0, 2.0]],
            array![10.0],
            vec![Instrument::One],
            vec!["a".into()],
        )
        .unwrap();
        let (mean, std) = global_mean_std(&set);
        assert_abs_diff_eq!(mean, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(std, 1.0, epsilon = 1e-15);
    }

    // -- augmentation --

    #[test]
    fn slope_ramp_has_mean_exactly_one() {
        for &s in &[0.95, 0.97, 1.0, 1.02, 1.05] {
            for &count in &[2usize, 5, 64, 601] {
                let ramp = slope_ramp(s, count);
                let mean = ramp.sum() / count as f64;
                assert_abs_diff_eq!(mean, 1.0, epsilon = 1e-12);
                assert_abs_diff_eq!(ramp[0], 2.0 - s, epsilon = 1e-15);
                assert_abs_diff_eq!(ramp[count - 1], s, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn augment_multiplies_dataset_size_and_keeps_originals_in_order() {
        let set = small_set();
        let config = AugmentConfig {
            copies: 9,
            ..AugmentConfig::default()
        };
        let std = global_std(&set);
        let out = augment(&set, &config, std).unwrap();
        assert_eq!(out.n_samples(), set.n_samples() * 10);
        for i in 0..set.n_samples() {
            let row = i * 10;
            assert_eq!(out.sample_ids()[row], set.sample_ids()[i]);
            assert_eq!(out.spectrum(row), set.spectrum(i));
            assert_eq!(out.reference_mg()[row], set.reference_mg()[i]);
            for k in 0..9 {
                assert_eq!(out.reference_mg()[row + 1 + k], set.reference_mg()[i]);
                assert_eq!(out.instrument()[row + 1 + k], set.instrument()[i]);
            }
        }
    }

    #[test]
    fn augment_constant_spectrum_matches_hand_computation() {
        // A constant spectrum times any mean-one ramp plus offset o gives
        // gain * x * ramp + o; at the grid midpoint the ramp is exactly 1.
        let set = SpectraSet::new(
            grid(3),
            array![[1.0, 1.0, 1.0]],
            array![100.0],
            vec![Instrument::One],
            vec!["a".into()],
        )
        .unwrap();
        let config = AugmentConfig {
            copies: 1,
            seed: 11,
            ..AugmentConfig::default()
        };
        let out = augment(&set, &config, 1.0).unwrap();
        let v = out.spectrum(1);
        // Midpoint ramp value is 1, so v[1] = gain + offset; the endpoints
        // are gain*(2-s) + offset and gain*s + offset, so their mean equals
        // v[1] for a constant input.
        assert_abs_diff_eq!(0.5 * (v[0] + v[2]), v[1], epsilon = 1e-12);
        // Draw bounds: |offset| <= 0.1, gain in 1 +- 0.1 with train_std = 1,
        // slope in [0.95, 1.05]; endpoints stay within the worst case.
        for &x in v.iter() {
            assert!(x >= 0.9 * 0.95 - 0.1 - 1e-12 && x <= 1.1 * 1.05 + 0.1 + 1e-12);
        }
    }

    #[test]
    fn augment_is_deterministic_and_order_independent() {
        let set = small_set();
        let config = AugmentConfig {
            copies: 3,
            seed: 5,
            ..AugmentConfig::default()
        };
        let std = global_std(&set);
        let a = augment(&set, &config, std).unwrap();
        let b = augment(&set, &config, std).unwrap();
        assert_eq!(a.absorbance(), b.absorbance());

        // A sample's variants depend only on its own index: augmenting a
        // one-sample subset reproduces the same first block.
        let first = set.select(&[0]).unwrap();
        let sub = augment(&first, &config, std).unwrap();
        for k in 0..4 {
            assert_eq!(sub.spectrum(k), a.spectrum(k));
        }
    }

    #[test]
    fn augment_zero_amplitudes_is_exact_identity_per_copy() {
        let set = small_set();
        let config = AugmentConfig {
            offset_scale: 0.0,
            mult_scale: 0.0,
            slope_range: (1.0, 1.0),
            copies: 2,
            seed: 9,
        };
        let out = augment(&set, &config, global_std(&set)).unwrap();
        for i in 0..set.n_samples() {
            for k in 0..3 {
                assert_eq!(out.spectrum(i * 3 + k), set.spectrum(i));
            }
        }
    }

    #[test]
    fn augment_zero_copies_returns_originals_only() {
        let set = small_set();
        let config = AugmentConfig {
            copies: 0,
            ..AugmentConfig::default()
        };
        let out = augment(&set, &config, global_std(&set)).unwrap();
        assert_eq!(out.n_samples(), set.n_samples());
        assert_eq!(out.absorbance(), set.absorbance());
        assert_eq!(out.sample_ids(), set.sample_ids());
    }

    #[test]
    fn augment_rejects_bad_slope_range() {
        let set = small_set();
        for range in [(1.05, 0.95), (0.0, 1.0), (0.5, 2.0)] {
            let config = AugmentConfig {
                slope_range: range,
                ..AugmentConfig::default()
            };
            assert!(augment(&set, &config, 1.0).is_err());
        }
    }

    // -- scatter correction --

    /// Curved base spectrum plus noise-free scatter variants for EMSC tests.
    fn curved_set(n: usize) -> SpectraSet {
        let g = grid(64);
        let axis = g.scaled_axis();
        let base: Array1<f64> =
            axis.mapv(|u| (-2.0 * (u - 0.2) * (u - 0.2)).exp() + 0.5 * (-8.0 * (u + 0.5) * (u + 0.5)).exp());
        let mut abs = Array2::zeros((n, 64));
        for i in 0..n {
            let gain = 1.0 + 0.08 * (i as f64 - n as f64 / 2.0) / n as f64;
            let offset = 0.03 * ((i * 7 % 11) as f64 / 11.0 - 0.5);
            for j in 0..64 {
                abs[[i, j]] = gain * base[j] + offset;
            }
        }
        SpectraSet::new(
            g,
            abs,
            Array1::from_elem(n, 100.0),
            vec![Instrument::One; n],
            (0..n).map(|i| format!("s{i}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn emsc_reference_is_fixed_point() {
        let set = curved_set(8);
        let model = emsc_fit(&set, 1).unwrap();
        let ref_set = set
            .replace_absorbance(
                model
                    .reference()
                    .clone()
                    .insert_axis(ndarray::Axis(0))
                    .broadcast((8, 64))
                    .unwrap()
                    .to_owned(),
            )
            .unwrap();
        let corrected = emsc_apply(&model, &ref_set).unwrap();
        for j in 0..64 {
            assert_abs_diff_eq!(
                corrected.absorbance()[[0, j]],
                model.reference()[j],
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn emsc_recovers_reference_from_affine_transform() {
        // 2 * reference + 5 has baseline (5, 0) and gain 2.
        let set = curved_set(8);
        let model = emsc_fit(&set, 1).unwrap();
        let shifted = set
            .replace_absorbance(model.reference().mapv(|v| 2.0 * v + 5.0).insert_axis(ndarray::Axis(0)).broadcast((8, 64)).unwrap().to_owned())
            .unwrap();
        let corrected = emsc_apply(&model, &shifted).unwrap();
        for j in 0..64 {
            assert_abs_diff_eq!(
                corrected.absorbance()[[0, j]],
                model.reference()[j],
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn emsc_shrinks_spread_of_augmented_copies() {
        // One smooth absorbance curve (broad sloping background with a mild
        // band), many scatter variants; after correction the copies must
        // agree within 5% of the original spread.
        let g = grid(64);
        let axis = g.scaled_axis();
        let base: Array1<f64> = axis.mapv(|u| {
            1.0 + 0.45 * u + 0.12 * u * u + 0.01 * (-25.0 * (u - 0.25) * (u - 0.25)).exp()
        });
        let single = SpectraSet::new(
            g,
            base.clone().insert_axis(ndarray::Axis(0)),
            array![100.0],
            vec![Instrument::One],
            vec!["base".into()],
        )
        .unwrap();
        let config = AugmentConfig {
            copies: 20,
            seed: 3,
            ..AugmentConfig::default()
        };
        let copies = augment(&single, &config, global_std(&single)).unwrap();
        let model = emsc_fit(&single, 1).unwrap();
        let corrected = emsc_apply(&model, &copies).unwrap();

        let spread = |set: &SpectraSet| -> f64 {
            let a = set.absorbance();
            let mean = a.mean_axis(ndarray::Axis(0)).unwrap();
            let mut acc = 0.0;
            for row in a.outer_iter() {
                for j in 0..a.ncols() {
                    let d = row[j] - mean[j];
                    acc += d * d;
                }
            }
            (acc / a.len() as f64).sqrt()
        };
        let before = spread(&copies);
        let after = spread(&corrected);
        assert!(after > 0.0, "correction should leave a nonzero residual");
        assert!(
            after < 0.05 * before,
            "spread before {before:.3e}, after {after:.3e}"
        );
    }

    #[test]
    fn emsc_apply_is_idempotent() {
        let set = curved_set(8);
        let model = emsc_fit(&set, 1).unwrap();
        let once = emsc_apply(&model, &set).unwrap();
        let twice = emsc_apply(&model, &once).unwrap();
        for (a, b) in once.absorbance().iter().zip(twice.absorbance().iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn emsc_rejects_collinear_reference() {
        // Constant spectra give a reference proportional to the intercept
        // column.
        let set = SpectraSet::new(
            grid(16),
            Array2::from_elem((4, 16), 0.7),
            array![10.0, 11.0, 12.0, 13.0],
            vec![Instrument::One; 4],
            (0..4).map(|i| format!("s{i}")).collect(),
        )
        .unwrap();
        assert!(matches!(
            emsc_fit(&set, 1),
            Err(Error::CollinearBasis { .. })
        ));
    }

    #[test]
    fn emsc_flags_sample_without_reference_component() {
        let set = curved_set(8);
        let model = emsc_fit(&set, 1).unwrap();
        // A pure baseline has no reference component: c ~ 0.
        let g = grid(64);
        let axis = g.scaled_axis();
        let pure_baseline: Array1<f64> = axis.mapv(|u| 3.0 + 2.0 * u);
        let victim = SpectraSet::new(
            g,
            pure_baseline.insert_axis(ndarray::Axis(0)),
            array![50.0],
            vec![Instrument::One],
            vec!["flat".into()],
        )
        .unwrap();
        match emsc_apply(&model, &victim) {
            Err(Error::DegenerateScatterFit { sample_id, .. }) => assert_eq!(sample_id, "flat"),
            other => panic!("expected DegenerateScatterFit, got {other:?}"),
        }
    }

    #[test]
    fn emsc_rejects_grid_mismatch() {
        let set = curved_set(4);
        let model = emsc_fit(&set, 1).unwrap();
        let other = small_set();
        assert!(emsc_apply(&model, &other).is_err());
    }

    // -- standardization --

    #[test]
    fn scaler_matches_hand_example() {
        let train = SpectraSet::new(
            grid(2),
            array![[0.0, 2.0]],
            array![10.0],
            vec![Instrument::One],
            vec!["a".into()],
        )
        .unwrap();
        let scaler = scaler_fit(&train).unwrap();
        assert_abs_diff_eq!(scaler.mean, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(scaler.std, 1.0, epsilon = 1e-15);
        let out = scaler_apply(&scaler, &train).unwrap();
        assert_abs_diff_eq!(out.absorbance()[[0, 0]], -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(out.absorbance()[[0, 1]], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn scaled_training_set_has_mean_zero_std_half() {
        let set = curved_set(12);
        let scaler = scaler_fit(&set).unwrap();
        let out = scaler_apply(&scaler, &set).unwrap();
        let (mean, std) = global_mean_std(&out);
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(std, 0.5, epsilon = 1e-10);
    }

    #[test]
    fn scaler_is_not_idempotent() {
        let set = curved_set(6);
        let scaler = scaler_fit(&set).unwrap();
        let once = scaler_apply(&scaler, &set).unwrap();
        let twice = scaler_apply(&scaler, &once).unwrap();
        assert_ne!(once.absorbance(), twice.absorbance());
    }

    #[test]
    fn scaler_rejects_constant_training_set() {
        let set = SpectraSet::new(
            grid(4),
            Array2::from_elem((2, 4), 0.3),
            array![10.0, 20.0],
            vec![Instrument::One; 2],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        assert!(matches!(scaler_fit(&set), Err(Error::ZeroSpread)));
    }

    // -- chains --

    #[test]
    fn chain_round_trips_through_json_bit_exactly() {
        let set = curved_set(10);
        let emsc = emsc_fit(&set, 1).unwrap();
        let after_emsc = emsc_apply(&emsc, &set).unwrap();
        let scaler = scaler_fit(&after_emsc).unwrap();
        let chain = FittedChain {
            steps: vec![
                FittedStep::Augment {
                    config: AugmentConfig::default(),
                    train_std: global_std(&set),
                },
                FittedStep::ScatterCorrection { model: emsc },
                FittedStep::Standardize { scaler },
            ],
        };
        let json = chain.to_json().unwrap();
        let restored = FittedChain::from_json(&json).unwrap();
        assert_eq!(chain, restored);

        let fresh = curved_set(3);
        let a = chain.apply_infer(&fresh).unwrap();
        let b = restored.apply_infer(&fresh).unwrap();
        assert_eq!(a.absorbance(), b.absorbance());
    }

    #[test]
    fn chain_inference_skips_augmentation() {
        let set = curved_set(5);
        let chain = FittedChain {
            steps: vec![FittedStep::Augment {
                config: AugmentConfig::default(),
                train_std: 0.3,
            }],
        };
        let out = chain.apply_infer(&set).unwrap();
        assert_eq!(out.n_samples(), set.n_samples());
        assert_eq!(out.absorbance(), set.absorbance());
    }

    #[test]
    fn augmented_synthetic_set_statistics_shift_as_configured() {
        // Offsets drawn within ±0.1 * std never move the global mean by more
        // than the offset amplitude.
        let synth = synthesize(&SyntheticConfig {
            n_samples: 30,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let std = global_std(&synth);
        let out = augment(&synth, &AugmentConfig::default(), std).unwrap();
        let (mean_before, _) = global_mean_std(&synth);
        let (mean_after, _) = global_mean_std(&out);
        assert!((mean_after - mean_before).abs() <= 0.1 * std + 1e-9);
    }
}
