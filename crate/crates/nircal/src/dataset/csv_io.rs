//! CSV interchange format for spectra.
//!
//! Layout: `sample_id,reference_mg,instrument,<wl_1>,<wl_2>,...` with one
//! sample per row. Wavelength headers must be numeric, ascending and equally
//! spaced; the grid is inferred from them. Floats are written in shortest
//! round-trip form, so a save/load cycle reproduces values exactly.

use super::{Instrument, SpectraSet, WavelengthGrid};
use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use std::path::Path;

const META_COLUMNS: [&str; 3] = ["sample_id", "reference_mg", "instrument"];

pub fn load_csv(path: impl AsRef<Path>) -> Result<SpectraSet> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::CsvFormat {
            path: path_str.clone(),
            msg: e.to_string(),
        })?;

    let mut records = reader.records();
    let header = match records.next() {
        Some(Ok(rec)) => rec,
        Some(Err(e)) => {
            return Err(Error::CsvFormat {
                path: path_str,
                msg: e.to_string(),
            })
        }
        None => {
            return Err(Error::CsvHeader {
                path: path_str,
                msg: "file is empty".into(),
            })
        }
    };

    for (i, name) in META_COLUMNS.iter().enumerate() {
        if header.get(i) != Some(name) {
            return Err(Error::CsvHeader {
                path: path_str,
                msg: format!(
                    "column {} must be \"{}\", got \"{}\"",
                    i + 1,
                    name,
                    header.get(i).unwrap_or("")
                ),
            });
        }
    }
    if header.len() < META_COLUMNS.len() + 2 {
        return Err(Error::CsvHeader {
            path: path_str,
            msg: "need at least two wavelength columns".into(),
        });
    }

    let wl_names: Vec<String> = header
        .iter()
        .skip(META_COLUMNS.len())
        .map(str::to_owned)
        .collect();
    let mut wavelengths = Vec::with_capacity(wl_names.len());
    for name in &wl_names {
        let w: f64 = name.trim().parse().map_err(|_| Error::CsvHeader {
            path: path_str.clone(),
            msg: format!("wavelength column \"{name}\" is not numeric"),
        })?;
        wavelengths.push(w);
    }
    let step = wavelengths[1] - wavelengths[0];
    if step <= 0.0 {
        return Err(Error::CsvHeader {
            path: path_str,
            msg: "wavelengths must be strictly ascending".into(),
        });
    }
    for i in 2..wavelengths.len() {
        let d = wavelengths[i] - wavelengths[i - 1];
        let tol = 1e-9 * wavelengths[i].abs().max(step.abs()).max(1.0);
        if (d - step).abs() > tol {
            return Err(Error::UnevenGrid {
                column: wl_names[i].clone(),
            });
        }
    }
    let grid = WavelengthGrid::new(wavelengths[0], step, wavelengths.len())?;

    let p = grid.count();
    let mut absorbance_rows: Vec<f64> = Vec::new();
    let mut reference = Vec::new();
    let mut instruments = Vec::new();
    let mut ids = Vec::new();
    for (row_idx, rec) in records.enumerate() {
        let row = row_idx + 1;
        let rec = rec.map_err(|e| Error::CsvFormat {
            path: path_str.clone(),
            msg: format!("row {row}: {e}"),
        })?;
        if rec.len() != META_COLUMNS.len() + p {
            return Err(Error::CsvFormat {
                path: path_str.clone(),
                msg: format!(
                    "row {row} has {} fields, expected {}",
                    rec.len(),
                    META_COLUMNS.len() + p
                ),
            });
        }
        let id = rec.get(0).unwrap_or("").to_owned();
        if id.is_empty() {
            return Err(Error::CsvValue {
                row,
                column: "sample_id".into(),
                msg: "empty sample id".into(),
            });
        }
        let reference_mg: f64 =
            rec.get(1)
                .unwrap()
                .trim()
                .parse()
                .map_err(|_| Error::CsvValue {
                    row,
                    column: "reference_mg".into(),
                    msg: format!("\"{}\" is not a number", rec.get(1).unwrap()),
                })?;
        if !reference_mg.is_finite() || reference_mg <= 0.0 {
            return Err(Error::CsvValue {
                row,
                column: "reference_mg".into(),
                msg: format!("must be positive and finite, got {reference_mg}"),
            });
        }
        let instrument = match rec.get(2).unwrap().trim() {
            "1" => Instrument::One,
            "2" => Instrument::Two,
            other => {
                return Err(Error::CsvValue {
                    row,
                    column: "instrument".into(),
                    msg: format!("instrument label must be 1 or 2, got \"{other}\""),
                })
            }
        };
        for (j, cell) in rec.iter().skip(META_COLUMNS.len()).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::CsvValue {
                row,
                column: wl_names[j].clone(),
                msg: format!("\"{cell}\" is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::CsvValue {
                    row,
                    column: wl_names[j].clone(),
                    msg: "non-finite absorbance".into(),
                });
            }
            absorbance_rows.push(v);
        }
        ids.push(id);
        reference.push(reference_mg);
        instruments.push(instrument);
    }

    if ids.is_empty() {
        return Err(Error::InvalidDataset {
            msg: format!("{path_str} contains a header but no samples"),
        });
    }
    let n = ids.len();
    let absorbance = Array2::from_shape_vec((n, p), absorbance_rows).expect("row-major layout");
    SpectraSet::new(
        grid,
        absorbance,
        Array1::from_vec(reference),
        instruments,
        ids,
    )
}

pub fn save_csv(set: &SpectraSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::CsvFormat {
        path: path_str.clone(),
        msg: e.to_string(),
    })?;

    let mut header: Vec<String> = META_COLUMNS.iter().map(|s| s.to_string()).collect();
    for i in 0..set.grid().count() {
        header.push(format_float(set.grid().wavelength(i)));
    }
    writer.write_record(&header).map_err(|e| Error::CsvFormat {
        path: path_str.clone(),
        msg: e.to_string(),
    })?;

    for i in 0..set.n_samples() {
        let mut record = Vec::with_capacity(header.len());
        record.push(set.sample_ids()[i].clone());
        record.push(format_float(set.reference_mg()[i]));
        record.push(set.instrument()[i].label().to_string());
        for &v in set.spectrum(i) {
            record.push(format_float(v));
        }
        writer.write_record(&record).map_err(|e| Error::CsvFormat {
            path: path_str.clone(),
            msg: e.to_string(),
        })?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path_str.clone(), e))?;
    Ok(())
}

/// Shortest decimal representation that parses back to the same f64.
fn format_float(v: f64) -> String {
    format!("{v}")
}
