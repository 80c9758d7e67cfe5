//! Synthetic tablet spectra for desk-scale experiments.
//!
//! Spectra follow a linear absorbance model: a fixed analyte peak profile is
//! scaled by each sample's concentration, optionally stacked on a fixed
//! matrix (excipient) background, then corrupted with the scatter artifacts
//! the preprocessing stages are built to remove (random offset,
//! multiplicative gain, baseline tilt, white noise). Instrument 2 adds a
//! fixed offset-and-tilt signature so instrument transfer is non-trivial.
//!
//! The background matters for scatter correction: with a pure-analyte
//! spectrum the correction's multiplicative coefficient is proportional to
//! concentration, and dividing by it collapses every sample onto the
//! reference. A concentration-independent background anchors that
//! coefficient, as the excipient mass does in real tablets.

use super::{Instrument, SpectraSet, WavelengthGrid};
use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub n_peaks: usize,
    /// Closed concentration range in mg; drawn uniformly.
    pub concentration_range_mg: (f64, f64),
    pub grid: WavelengthGrid,
    /// Additive baseline offset drawn from ±this amplitude (absorbance units).
    pub offset_amplitude: f64,
    /// Multiplicative gain drawn from 1 ± this amplitude.
    pub multiplicative_amplitude: f64,
    /// Additive tilt across the grid drawn from ±this amplitude.
    pub slope_amplitude: f64,
    /// Peak height of the fixed concentration-independent matrix spectrum
    /// (absorbance units); zero omits the background entirely.
    #[serde(default)]
    pub background_amplitude: f64,
    /// White noise standard deviation (absorbance units).
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_samples: 500,
            n_peaks: 6,
            concentration_range_mg: (150.0, 250.0),
            grid: WavelengthGrid::new(600.0, 4.0, 300).expect("valid default grid"),
            offset_amplitude: 0.02,
            multiplicative_amplitude: 0.02,
            slope_amplitude: 0.02,
            background_amplitude: 0.0,
            noise_std: 1e-3,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidConfig {
                msg: "n_samples must be at least 1".into(),
            });
        }
        if self.n_peaks == 0 {
            return Err(Error::InvalidConfig {
                msg: "n_peaks must be at least 1".into(),
            });
        }
        let (lo, hi) = self.concentration_range_mg;
        if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 || lo > hi {
            return Err(Error::InvalidConfig {
                msg: format!("bad concentration range ({lo}, {hi})"),
            });
        }
        for (name, v) in [
            ("offset_amplitude", self.offset_amplitude),
            ("multiplicative_amplitude", self.multiplicative_amplitude),
            ("slope_amplitude", self.slope_amplitude),
            ("background_amplitude", self.background_amplitude),
            ("noise_std", self.noise_std),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig {
                    msg: format!("{name} must be non-negative, got {v}"),
                });
            }
        }
        if self.multiplicative_amplitude >= 1.0 {
            return Err(Error::InvalidConfig {
                msg: "multiplicative_amplitude must stay below 1 so gains stay positive".into(),
            });
        }
        Ok(())
    }
}

/// The fixed per-mg absorbance profile a config generates: a sum of Gaussian
/// peaks with seeded positions, widths and heights, scaled so that a sample
/// at the midpoint concentration peaks near 1 absorbance unit.
pub fn peak_template(config: &SyntheticConfig) -> Result<Array1<f64>> {
    config.validate()?;
    let mut rng = template_rng(config.seed);
    Ok(draw_template(config, &mut rng))
}

/// The fixed matrix spectrum a config generates: broad seeded peaks scaled
/// to `background_amplitude` at the highest point (all zero when that
/// amplitude is zero).
pub fn background_template(config: &SyntheticConfig) -> Result<Array1<f64>> {
    config.validate()?;
    let mut rng = template_rng(config.seed);
    // Matches the draw order in `synthesize`: analyte template first, so
    // enabling a background never shifts it.
    let _ = draw_template(config, &mut rng);
    Ok(draw_background(config, &mut rng))
}

fn template_rng(seed: u64) -> ChaCha8Rng {
    // Separate stream from the per-sample draws so the template never shifts
    // when n_samples changes.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

fn draw_template(config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let grid = &config.grid;
    let span = grid.last_nm() - grid.start_nm();
    let wavelengths = grid.wavelengths();
    let mut template = Array1::<f64>::zeros(grid.count());
    for _ in 0..config.n_peaks {
        let center = rng.random_range(grid.start_nm()..=grid.last_nm());
        let width = rng.random_range(0.03 * span..=0.10 * span);
        let height = rng.random_range(0.5..=1.0);
        for (t, &w) in template.iter_mut().zip(wavelengths.iter()) {
            let z = (w - center) / width;
            *t += height * (-0.5 * z * z).exp();
        }
    }
    let peak = template.iter().cloned().fold(f64::MIN, f64::max);
    let (lo, hi) = config.concentration_range_mg;
    let mid = 0.5 * (lo + hi);
    template.mapv_inplace(|v| v / (peak * mid));
    template
}

/// Peaks in the matrix spectrum; broad (15–35% of the grid span) so the
/// background is spectrally smooth, the way excipient bands are.
const N_BACKGROUND_PEAKS: usize = 3;

fn draw_background(config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let grid = &config.grid;
    let span = grid.last_nm() - grid.start_nm();
    let wavelengths = grid.wavelengths();
    let mut profile = Array1::<f64>::zeros(grid.count());
    for _ in 0..N_BACKGROUND_PEAKS {
        let center = rng.random_range(grid.start_nm()..=grid.last_nm());
        let width = rng.random_range(0.15 * span..=0.35 * span);
        let height = rng.random_range(0.5..=1.0);
        for (t, &w) in profile.iter_mut().zip(wavelengths.iter()) {
            let z = (w - center) / width;
            *t += height * (-0.5 * z * z).exp();
        }
    }
    let peak = profile.iter().cloned().fold(f64::MIN, f64::max);
    profile.mapv_inplace(|v| v * config.background_amplitude / peak);
    profile
}

pub fn synthesize(config: &SyntheticConfig) -> Result<SpectraSet> {
    config.validate()?;
    let (template, background) = {
        let mut rng = template_rng(config.seed);
        let template = draw_template(config, &mut rng);
        let background = draw_background(config, &mut rng);
        (template, background)
    };
    let grid = &config.grid;
    let p = grid.count();
    let axis = grid.scaled_axis();
    let (lo, hi) = config.concentration_range_mg;
    let noise = Normal::new(0.0, config.noise_std).expect("validated noise std");

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut absorbance = Array2::<f64>::zeros((config.n_samples, p));
    let mut reference = Array1::<f64>::zeros(config.n_samples);
    let mut instruments = Vec::with_capacity(config.n_samples);
    let mut ids = Vec::with_capacity(config.n_samples);

    for i in 0..config.n_samples {
        let c = rng.random_range(lo..=hi);
        let offset = rng.random_range(-config.offset_amplitude..=config.offset_amplitude);
        let gain = rng.random_range(
            1.0 - config.multiplicative_amplitude..=1.0 + config.multiplicative_amplitude,
        );
        let tilt = rng.random_range(-config.slope_amplitude..=config.slope_amplitude);
        let instrument = if i % 3 == 2 {
            Instrument::Two
        } else {
            Instrument::One
        };
        // Fixed instrument-2 signature, proportional to the configured
        // scatter scale so a zero-artifact config stays artifact-free.
        let (sig_offset, sig_tilt) = match instrument {
            Instrument::One => (0.0, 0.0),
            Instrument::Two => (0.5 * config.offset_amplitude, 0.5 * config.slope_amplitude),
        };
        let mut row = absorbance.row_mut(i);
        for j in 0..p {
            let clean = c * template[j] + background[j];
            let scattered = gain * clean + offset + tilt * axis[j] + sig_offset + sig_tilt * axis[j];
            row[j] = scattered + noise.sample(&mut rng);
        }
        reference[i] = c;
        instruments.push(instrument);
        ids.push(format!("synth-{i:04}"));
    }
    SpectraSet::new(*grid, absorbance, reference, instruments, ids)
}
