//! Prediction quality metrics, kernel-activation summaries, and the CSV
//! writers used by the pipeline's result files.
//!
//! All floats written to CSV carry 12 significant digits, enough to read a
//! value back within a relative error of 1e-9.

use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::dataset::{Instrument, SpectraSet, WavelengthGrid};
use crate::error::{Error, Result};
use crate::hyperopt::BoRun;
use crate::nn::{loss::huber, CnnModel, TrainHistory};
use crate::pls::CvCurve;

/// Quality of a batch of predictions against reference values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Squared Pearson correlation between predictions and references.
    /// `None` when either side has zero variance, where correlation is
    /// undefined. Note this measures linear association, not agreement:
    /// a perfectly correlated but biased predictor still scores 1.
    pub r2: Option<f64>,
    pub rmse: f64,
    pub huber: f64,
}

/// Compute [`Metrics`] for predictions against references, scoring the
/// Huber term at the given elbow (milligrams).
pub fn evaluate(
    predictions: ArrayView1<f64>,
    targets: ArrayView1<f64>,
    huber_delta: f64,
) -> Result<Metrics> {
    if predictions.len() != targets.len() {
        return Err(Error::LengthMismatch {
            left: "predictions",
            left_len: predictions.len(),
            right: "targets",
            right_len: targets.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::EmptyResiduals);
    }
    let residuals: Vec<f64> = predictions
        .iter()
        .zip(targets.iter())
        .map(|(p, t)| p - t)
        .collect();
    let huber = huber(&residuals, huber_delta)?;
    let n = predictions.len() as f64;
    let rmse = (residuals.iter().map(|r| r * r).sum::<f64>() / n).sqrt();

    let p_mean = predictions.mean().expect("non-empty");
    let t_mean = targets.mean().expect("non-empty");
    let mut cov = 0.0;
    let mut var_p = 0.0;
    let mut var_t = 0.0;
    for (p, t) in predictions.iter().zip(targets.iter()) {
        cov += (p - p_mean) * (t - t_mean);
        var_p += (p - p_mean).powi(2);
        var_t += (t - t_mean).powi(2);
    }
    let r2 = if var_p > 0.0 && var_t > 0.0 {
        Some((cov * cov) / (var_p * var_t))
    } else {
        None
    };
    Ok(Metrics { r2, rmse, huber })
}

/// Which convolution layer an activation summary refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvLayer {
    First,
    Second,
}

/// Statistic that scores a kernel's activity over a set. Post-ReLU
/// activations are non-negative, so the L1 norm is a plain sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationStat {
    /// Sum of activations over all samples and positions.
    L1,
    /// Largest single activation over all samples and positions.
    Max,
}

impl ActivationStat {
    pub fn label(&self) -> &'static str {
        match self {
            ActivationStat::L1 => "l1",
            ActivationStat::Max => "max",
        }
    }
}

/// One kernel's aggregate activation strength over a set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRank {
    pub kernel: usize,
    /// Value of the chosen statistic.
    pub score: f64,
}

/// Grid-index shift that centers an activation position on the input
/// window it was computed from (window center rounded down). The second
/// layer accumulates the shifts of both filters.
pub fn grid_offset(layer: ConvLayer, filter_len1: usize, filter_len2: usize) -> usize {
    match layer {
        ConvLayer::First => (filter_len1 - 1) / 2,
        ConvLayer::Second => (filter_len1 - 1) / 2 + (filter_len2 - 1) / 2,
    }
}

/// Rank a layer's kernels by activity over a set, strongest first; ties
/// break toward the lower kernel index.
pub fn rank_kernels(
    model: &CnnModel,
    set: &SpectraSet,
    layer: ConvLayer,
    stat: ActivationStat,
) -> Result<Vec<KernelRank>> {
    if set.grid().count() != model.spec().input_len {
        return Err(Error::InputLengthMismatch {
            got: set.grid().count(),
            expected: model.spec().input_len,
        });
    }
    let n_kernels = match layer {
        ConvLayer::First => model.spec().kernels1,
        ConvLayer::Second => model.spec().kernels2,
    };
    let mut scores = vec![0.0f64; n_kernels];
    for i in 0..set.n_samples() {
        let (a1, a2) = model.activations_one(set.spectrum(i))?;
        let a = match layer {
            ConvLayer::First => a1,
            ConvLayer::Second => a2,
        };
        for (k, row) in a.outer_iter().enumerate() {
            match stat {
                ActivationStat::L1 => scores[k] += row.sum(),
                ActivationStat::Max => {
                    scores[k] = row.iter().fold(scores[k], |acc, &v| acc.max(v))
                }
            }
        }
    }
    let mut ranks: Vec<KernelRank> = scores
        .into_iter()
        .enumerate()
        .map(|(kernel, score)| KernelRank { kernel, score })
        .collect();
    ranks.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.kernel.cmp(&b.kernel))
    });
    Ok(ranks)
}

/// Mean activation traces for chosen kernels, laid out on the wavelength
/// grid: one row per grid point, one column per kernel, `NaN` where the
/// kernel's output does not cover the grid (the window margins).
pub fn activation_traces(
    model: &CnnModel,
    set: &SpectraSet,
    layer: ConvLayer,
    kernels: &[usize],
) -> Result<Array2<f64>> {
    let sums = activation_sums(model, set, layer)?;
    let n_kernels = sums.nrows();
    let trace_len = sums.ncols();
    for &k in kernels {
        if k >= n_kernels {
            return Err(Error::InvalidConfig {
                msg: format!("kernel {k} out of range for a layer with {n_kernels} kernels"),
            });
        }
    }
    let spec = model.spec();
    let offset = grid_offset(layer, spec.filter_len1, spec.filter_len2);
    let grid_count = set.grid().count();
    let n = set.n_samples() as f64;

    let mut traces = Array2::from_elem((grid_count, kernels.len()), f64::NAN);
    for (col, &k) in kernels.iter().enumerate() {
        for t in 0..trace_len {
            traces[[offset + t, col]] = sums[[k, t]] / n;
        }
    }
    Ok(traces)
}

/// Per-kernel, per-position activation sums over all samples of a set.
fn activation_sums(
    model: &CnnModel,
    set: &SpectraSet,
    layer: ConvLayer,
) -> Result<Array2<f64>> {
    if set.grid().count() != model.spec().input_len {
        return Err(Error::InputLengthMismatch {
            got: set.grid().count(),
            expected: model.spec().input_len,
        });
    }
    let spec = model.spec();
    let (k, len) = match layer {
        ConvLayer::First => (spec.kernels1, spec.len1()),
        ConvLayer::Second => (spec.kernels2, spec.len2()),
    };
    let mut sums = Array2::zeros((k, len));
    for i in 0..set.n_samples() {
        let (a1, a2) = model.activations_one(set.spectrum(i))?;
        let a = match layer {
            ConvLayer::First => a1,
            ConvLayer::Second => a2,
        };
        sums += &a;
    }
    Ok(sums)
}

// ---------------------------------------------------------------------------
// CSV writers

/// 12 significant digits: round-trips through text within 1e-9 relative.
pub fn fmt_sig(v: f64) -> String {
    format!("{v:.11e}")
}

fn open_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(csv::Writer::from_writer(file))
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn csv_record_err(path: &Path, e: csv::Error) -> Error {
    Error::CsvFormat {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

/// One labeled metrics row per subset (for example train/test).
pub fn write_metrics_csv(path: &Path, rows: &[(String, Metrics)]) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_record(["subset", "r2", "rmse", "huber"])
        .map_err(|e| csv_record_err(path, e))?;
    for (label, m) in rows {
        let r2 = m.r2.map(fmt_sig).unwrap_or_default();
        w.write_record([label.as_str(), &r2, &fmt_sig(m.rmse), &fmt_sig(m.huber)])
            .map_err(|e| csv_record_err(path, e))?;
    }
    finish(w, path)
}

/// Per-sample predicted vs reference values, one labeled block per subset.
pub fn write_scatter_csv(
    path: &Path,
    entries: &[(&SpectraSet, ArrayView1<f64>, &str)],
) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_record(["sample_id", "subset", "instrument", "reference_mg", "predicted_mg"])
        .map_err(|e| csv_record_err(path, e))?;
    for (set, predictions, subset) in entries {
        if predictions.len() != set.n_samples() {
            return Err(Error::LengthMismatch {
                left: "predictions",
                left_len: predictions.len(),
                right: "samples",
                right_len: set.n_samples(),
            });
        }
        for i in 0..set.n_samples() {
            let instrument = match set.instrument()[i] {
                Instrument::One => "1",
                Instrument::Two => "2",
            };
            w.write_record([
                set.sample_ids()[i].as_str(),
                subset,
                instrument,
                &fmt_sig(set.reference_mg()[i]),
                &fmt_sig(predictions[i]),
            ])
            .map_err(|e| csv_record_err(path, e))?;
        }
    }
    finish(w, path)
}

/// Per-epoch training record.
pub fn write_history_csv(path: &Path, history: &TrainHistory) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_record(["epoch", "train_loss", "val_loss", "learning_rate"])
        .map_err(|e| csv_record_err(path, e))?;
    for e in &history.epochs {
        w.write_record([
            e.epoch.to_string(),
            fmt_sig(e.train_loss),
            fmt_sig(e.val_loss),
            fmt_sig(e.learning_rate),
        ])
        .map_err(|e| csv_record_err(path, e))?;
    }
    finish(w, path)
}

/// Component-selection curve, one row per component count.
pub fn write_cv_curve_csv(path: &Path, curve: &CvCurve) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_record(["components", "train_loss", "cv_loss", "corrected_cv_loss", "holdout_loss"])
        .map_err(|e| csv_record_err(path, e))?;
    for (i, &a) in curve.components.iter().enumerate() {
        let holdout = curve
            .holdout_loss
            .as_ref()
            .map(|h| fmt_sig(h[i]))
            .unwrap_or_default();
        w.write_record([
            a.to_string(),
            fmt_sig(curve.train_loss[i]),
            fmt_sig(curve.cv_loss[i]),
            fmt_sig(curve.corrected_cv_loss[i]),
            holdout,
        ])
        .map_err(|e| csv_record_err(path, e))?;
    }
    finish(w, path)
}

/// Objective value and best-so-far per trial of a search run. Failed
/// trials leave the objective column empty.
pub fn write_convergence_csv(path: &Path, run: &BoRun) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_record(["trial", "objective", "best_so_far", "failed"])
        .map_err(|e| csv_record_err(path, e))?;
    for (t, best) in run.trials.iter().zip(&run.best_curve) {
        let value = if t.failed { String::new() } else { fmt_sig(t.value) };
        let best_txt = if best.is_finite() { fmt_sig(*best) } else { String::new() };
        w.write_record([
            t.index.to_string(),
            value,
            best_txt,
            t.failed.to_string(),
        ])
        .map_err(|e| csv_record_err(path, e))?;
    }
    finish(w, path)
}

/// Activation traces on the wavelength grid: one row per grid point, one
/// column per kernel, empty cells where a kernel's output does not reach.
pub fn write_activation_csv(
    path: &Path,
    grid: &WavelengthGrid,
    traces: &Array2<f64>,
    labels: &[String],
) -> Result<()> {
    if traces.nrows() != grid.count() || traces.ncols() != labels.len() {
        return Err(Error::InvalidConfig {
            msg: format!(
                "trace shape {}x{} does not match {} grid points and {} labels",
                traces.nrows(),
                traces.ncols(),
                grid.count(),
                labels.len()
            ),
        });
    }
    let mut w = open_writer(path)?;
    let mut header = vec!["wavelength_nm".to_string()];
    header.extend_from_slice(labels);
    w.write_record(&header).map_err(|e| csv_record_err(path, e))?;
    let wavelengths = grid.wavelengths();
    for (i, nm) in wavelengths.iter().enumerate() {
        let mut record = vec![fmt_sig(*nm)];
        for j in 0..traces.ncols() {
            let v = traces[[i, j]];
            record.push(if v.is_nan() { String::new() } else { fmt_sig(v) });
        }
        w.write_record(&record).map_err(|e| csv_record_err(path, e))?;
    }
    finish(w, path)
}

/// Kernel strength ranking with the grid shift of each layer's windows.
pub fn write_ranking_csv(
    path: &Path,
    layer: ConvLayer,
    stat: ActivationStat,
    ranks: &[KernelRank],
    filter_len1: usize,
    filter_len2: usize,
) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_record(["layer", "kernel", "statistic", "score", "grid_offset"])
        .map_err(|e| csv_record_err(path, e))?;
    let layer_txt = match layer {
        ConvLayer::First => "1",
        ConvLayer::Second => "2",
    };
    let offset = grid_offset(layer, filter_len1, filter_len2);
    for r in ranks {
        w.write_record([
            layer_txt.to_string(),
            r.kernel.to_string(),
            stat.label().to_string(),
            fmt_sig(r.score),
            offset.to_string(),
        ])
        .map_err(|e| csv_record_err(path, e))?;
    }
    finish(w, path)
}
