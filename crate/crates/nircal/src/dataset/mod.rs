//! Spectral dataset types: wavelength grids, sample collections, splits.

mod csv_io;
mod split;
mod synth;

pub use csv_io::{load_csv, save_csv};
pub use split::{extrapolation_split, standard_split};
pub use synth::{background_template, peak_template, synthesize, SyntheticConfig};

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

/// Equally spaced wavelength axis in nanometres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WavelengthGrid {
    start_nm: f64,
    step_nm: f64,
    count: usize,
}

impl WavelengthGrid {
    pub fn new(start_nm: f64, step_nm: f64, count: usize) -> Result<Self> {
        if !start_nm.is_finite() || !step_nm.is_finite() {
            return Err(Error::InvalidGrid {
                msg: "start and step must be finite".into(),
            });
        }
        if step_nm <= 0.0 {
            return Err(Error::InvalidGrid {
                msg: format!("step must be positive, got {step_nm}"),
            });
        }
        if count < 2 {
            return Err(Error::InvalidGrid {
                msg: format!("grid needs at least two points, got {count}"),
            });
        }
        Ok(WavelengthGrid {
            start_nm,
            step_nm,
            count,
        })
    }

    pub fn start_nm(&self) -> f64 {
        self.start_nm
    }

    pub fn step_nm(&self) -> f64 {
        self.step_nm
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Wavelength of grid point `i`.
    pub fn wavelength(&self, i: usize) -> f64 {
        self.start_nm + self.step_nm * i as f64
    }

    pub fn last_nm(&self) -> f64 {
        self.wavelength(self.count - 1)
    }

    pub fn wavelengths(&self) -> Array1<f64> {
        Array1::from_iter((0..self.count).map(|i| self.wavelength(i)))
    }

    /// Wavelength axis rescaled to [-1, 1], first point at -1, last at +1.
    pub fn scaled_axis(&self) -> Array1<f64> {
        let n = self.count as f64;
        Array1::from_iter((0..self.count).map(|i| 2.0 * i as f64 / (n - 1.0) - 1.0))
    }

    /// True when two grids describe the same axis within 1e-9 relative
    /// tolerance, tight enough to survive a text round trip.
    pub fn compatible(&self, other: &WavelengthGrid) -> bool {
        let scale = self.start_nm.abs().max(self.last_nm().abs()).max(1.0);
        self.count == other.count
            && (self.start_nm - other.start_nm).abs() <= 1e-9 * scale
            && (self.step_nm - other.step_nm).abs() <= 1e-9 * scale
    }
}

/// Which spectrometer a sample was measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instrument {
    One,
    Two,
}

impl Instrument {
    pub fn label(&self) -> u8 {
        match self {
            Instrument::One => 1,
            Instrument::Two => 2,
        }
    }

    pub fn from_label(label: u8) -> Result<Self> {
        match label {
            1 => Ok(Instrument::One),
            2 => Ok(Instrument::Two),
            other => Err(Error::InvalidDataset {
                msg: format!("instrument label must be 1 or 2, got {other}"),
            }),
        }
    }
}

/// A set of spectra with reference values and instrument labels.
///
/// Row order is meaningful (file order, or generation order for synthetic
/// data) and is preserved by every operation in this crate.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectraSet {
    grid: WavelengthGrid,
    absorbance: Array2<f64>,
    reference_mg: Array1<f64>,
    instrument: Vec<Instrument>,
    sample_id: Vec<String>,
}

impl SpectraSet {
    pub fn new(
        grid: WavelengthGrid,
        absorbance: Array2<f64>,
        reference_mg: Array1<f64>,
        instrument: Vec<Instrument>,
        sample_id: Vec<String>,
    ) -> Result<Self> {
        let n = absorbance.nrows();
        if n == 0 {
            return Err(Error::InvalidDataset {
                msg: "dataset needs at least one sample".into(),
            });
        }
        if absorbance.ncols() != grid.count() {
            return Err(Error::InvalidDataset {
                msg: format!(
                    "absorbance has {} columns but the grid has {} points",
                    absorbance.ncols(),
                    grid.count()
                ),
            });
        }
        if reference_mg.len() != n || instrument.len() != n || sample_id.len() != n {
            return Err(Error::InvalidDataset {
                msg: "absorbance, reference, instrument and id lengths disagree".into(),
            });
        }
        if let Some(v) = absorbance.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset {
                msg: format!("absorbance contains a non-finite value ({v})"),
            });
        }
        for (i, &r) in reference_mg.iter().enumerate() {
            if !r.is_finite() || r <= 0.0 {
                return Err(Error::InvalidDataset {
                    msg: format!("reference_mg must be positive and finite, sample \"{}\" has {r}", sample_id[i]),
                });
            }
        }
        let mut seen = std::collections::HashSet::with_capacity(n);
        for id in &sample_id {
            if id.is_empty() {
                return Err(Error::InvalidDataset {
                    msg: "empty sample_id".into(),
                });
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidDataset {
                    msg: format!("duplicate sample_id \"{id}\""),
                });
            }
        }
        Ok(SpectraSet {
            grid,
            absorbance,
            reference_mg,
            instrument,
            sample_id,
        })
    }

    pub fn grid(&self) -> &WavelengthGrid {
        &self.grid
    }

    pub fn absorbance(&self) -> &Array2<f64> {
        &self.absorbance
    }

    pub fn reference_mg(&self) -> &Array1<f64> {
        &self.reference_mg
    }

    pub fn instrument(&self) -> &[Instrument] {
        &self.instrument
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_id
    }

    pub fn n_samples(&self) -> usize {
        self.absorbance.nrows()
    }

    pub fn spectrum(&self, i: usize) -> ArrayView1<'_, f64> {
        self.absorbance.row(i)
    }

    /// New set containing the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<SpectraSet> {
        let p = self.grid.count();
        let mut abs = Array2::zeros((indices.len(), p));
        let mut refs = Array1::zeros(indices.len());
        let mut inst = Vec::with_capacity(indices.len());
        let mut ids = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            abs.row_mut(row).assign(&self.absorbance.row(i));
            refs[row] = self.reference_mg[i];
            inst.push(self.instrument[i]);
            ids.push(self.sample_id[i].clone());
        }
        SpectraSet::new(self.grid, abs, refs, inst, ids)
    }

    /// Same metadata, different absorbance matrix. Used by preprocessing
    /// steps that transform spectra in place.
    pub fn replace_absorbance(&self, absorbance: Array2<f64>) -> Result<SpectraSet> {
        SpectraSet::new(
            self.grid,
            absorbance,
            self.reference_mg.clone(),
            self.instrument.clone(),
            self.sample_id.clone(),
        )
    }

    /// Concatenates two sets measured on the same grid.
    pub fn concat(&self, other: &SpectraSet) -> Result<SpectraSet> {
        if !self.grid.compatible(&other.grid) {
            return Err(Error::InvalidDataset {
                msg: "cannot pool sets measured on different grids".into(),
            });
        }
        let n = self.n_samples() + other.n_samples();
        let p = self.grid.count();
        let mut abs = Array2::zeros((n, p));
        for (row, src) in self
            .absorbance
            .outer_iter()
            .chain(other.absorbance.outer_iter())
            .enumerate()
        {
            abs.row_mut(row).assign(&src);
        }
        let refs = Array1::from_iter(
            self.reference_mg
                .iter()
                .chain(other.reference_mg.iter())
                .copied(),
        );
        let inst = self
            .instrument
            .iter()
            .chain(other.instrument.iter())
            .copied()
            .collect();
        let ids = self
            .sample_id
            .iter()
            .chain(other.sample_id.iter())
            .cloned()
            .collect();
        SpectraSet::new(self.grid, abs, refs, inst, ids)
    }

    /// Keeps only wavelengths inside the closed interval `[low_nm, high_nm]`.
    pub fn restrict_region(&self, low_nm: f64, high_nm: f64) -> Result<SpectraSet> {
        if !low_nm.is_finite() || !high_nm.is_finite() || low_nm > high_nm {
            return Err(Error::InvalidConfig {
                msg: format!("bad wavelength region [{low_nm}, {high_nm}]"),
            });
        }
        let tol = 1e-9 * self.grid.step_nm();
        let keep: Vec<usize> = (0..self.grid.count())
            .filter(|&i| {
                let w = self.grid.wavelength(i);
                w >= low_nm - tol && w <= high_nm + tol
            })
            .collect();
        if keep.len() < 2 {
            return Err(Error::RegionOutsideGrid {
                low: low_nm,
                high: high_nm,
            });
        }
        let grid = WavelengthGrid::new(
            self.grid.wavelength(keep[0]),
            self.grid.step_nm(),
            keep.len(),
        )?;
        let mut abs = Array2::zeros((self.n_samples(), keep.len()));
        for (col, &i) in keep.iter().enumerate() {
            abs.column_mut(col).assign(&self.absorbance.column(i));
        }
        SpectraSet::new(
            grid,
            abs,
            self.reference_mg.clone(),
            self.instrument.clone(),
            self.sample_id.clone(),
        )
    }

    /// Row indices of samples measured on `instrument`.
    pub fn indices_of(&self, instrument: Instrument) -> Vec<usize> {
        (0..self.n_samples())
            .filter(|&i| self.instrument[i] == instrument)
            .collect()
    }
}

/// How a [`DataSplits`] was produced; serialized next to split outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum SplitProvenance {
    Standard {
        test_fraction: f64,
        val_fraction: f64,
        seed: u64,
    },
    Extrapolation {
        train_below_mg: f64,
        val_upper_mg: f64,
    },
}

/// Disjoint train/validation/test subsets of one parent set.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: SpectraSet,
    pub validation: SpectraSet,
    pub test: SpectraSet,
    pub provenance: SplitProvenance,
}

impl DataSplits {
    /// Checks the subsets are pairwise disjoint by sample id.
    pub fn assert_disjoint(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for set in [&self.train, &self.validation, &self.test] {
            for id in set.sample_ids() {
                if !seen.insert(id.as_str()) {
                    return Err(Error::InvalidSplit {
                        msg: format!("sample \"{id}\" appears in more than one subset"),
                    });
                }
            }
        }
        Ok(())
    }
}
