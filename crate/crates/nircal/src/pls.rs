//! Partial least squares regression (single response) fit by NIPALS with
//! deflation, plus k-fold cross-validation, component selection, and a
//! residual-based outlier screen.
//!
//! Inputs are centered (never scaled) inside the fit; targets stay in
//! milligrams. All selection criteria score residuals with a Huber loss at
//! a fixed 1 mg elbow, matching the training loss of the network model.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SpectraSet;
use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::loss::huber;

/// Huber elbow (in milligrams) used by every selection criterion here.
pub const SELECTION_HUBER_DELTA: f64 = 1.0;

/// Relative tolerance on the score vector for the NIPALS inner loop.
const NIPALS_TOL: f64 = 1e-16;
/// Iteration cap for the NIPALS inner loop; with a single response the
/// loop stabilizes after two passes, the cap is a guard.
const NIPALS_MAX_ITER: usize = 100_000;

/// Fitted PLS1 model. Weights, loadings, and per-component response
/// loadings are stored per component so the model can be truncated to any
/// leading subset; regression coefficients are derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlsModel {
    x_mean: Array1<f64>,
    y_mean: f64,
    /// Weight vectors, one column per component.
    weights: Array2<f64>,
    /// Loading vectors, one column per component.
    loadings: Array2<f64>,
    /// Response loadings, one per component.
    q: Array1<f64>,
    /// Regression coefficients in the centered space.
    coefficients: Array1<f64>,
}

impl PlsModel {
    pub fn n_components(&self) -> usize {
        self.q.len()
    }

    pub fn n_features(&self) -> usize {
        self.x_mean.len()
    }

    /// `y = (x - x_mean) . b + y_mean` for every row of `x`.
    pub fn predict_matrix(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        if x.ncols() != self.n_features() {
            return Err(Error::InputLengthMismatch {
                got: x.ncols(),
                expected: self.n_features(),
            });
        }
        let centered = &x - &self.x_mean;
        Ok(centered.dot(&self.coefficients) + self.y_mean)
    }

    pub fn predict(&self, set: &SpectraSet) -> Result<Array1<f64>> {
        self.predict_matrix(set.absorbance().view())
    }

    /// Latent scores for new rows: `(x - x_mean) W (P^T W)^{-1}`.
    pub fn scores(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.n_features() {
            return Err(Error::InputLengthMismatch {
                got: x.ncols(),
                expected: self.n_features(),
            });
        }
        let rotation = rotation_matrix(&self.weights, &self.loadings)?;
        let centered = &x - &self.x_mean;
        Ok(centered.dot(&rotation))
    }

    /// Model using only the first `a` components. Components are nested:
    /// truncating a larger fit equals fitting with `a` from the start.
    pub fn truncate(&self, a: usize) -> Result<PlsModel> {
        if a == 0 || a > self.n_components() {
            return Err(Error::InvalidConfig {
                msg: format!(
                    "cannot truncate a {}-component model to {a} components",
                    self.n_components()
                ),
            });
        }
        let weights = self.weights.slice(ndarray::s![.., ..a]).to_owned();
        let loadings = self.loadings.slice(ndarray::s![.., ..a]).to_owned();
        let q = self.q.slice(ndarray::s![..a]).to_owned();
        let coefficients = coefficients_from(&weights, &loadings, &q)?;
        Ok(PlsModel {
            x_mean: self.x_mean.clone(),
            y_mean: self.y_mean,
            weights,
            loadings,
            q,
            coefficients,
        })
    }

    /// Coefficient vectors for every truncation level: column `a - 1` holds
    /// the coefficients of the leading-`a` model.
    pub fn coefficient_path(&self) -> Result<Array2<f64>> {
        let (p, a_max) = (self.n_features(), self.n_components());
        let mut path = Array2::zeros((p, a_max));
        let pw = self.loadings.t().dot(&self.weights);
        for a in 1..=a_max {
            let sub = pw.slice(ndarray::s![..a, ..a]).to_owned();
            let rhs = self.q.slice(ndarray::s![..a]).to_owned();
            let z = linalg::solve(&sub, &rhs).ok_or(Error::ZeroWeight { component: a })?;
            let b = self.weights.slice(ndarray::s![.., ..a]).dot(&z);
            path.column_mut(a - 1).assign(&b);
        }
        Ok(path)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("pls model", e))
    }

    pub fn from_json(json: &str) -> Result<PlsModel> {
        let model: PlsModel =
            serde_json::from_str(json).map_err(|e| Error::json("pls model", e))?;
        if model.weights.dim() != (model.n_features(), model.n_components())
            || model.loadings.dim() != model.weights.dim()
            || model.coefficients.len() != model.n_features()
        {
            return Err(Error::Json {
                context: "pls model".into(),
                msg: "inconsistent array shapes".into(),
            });
        }
        Ok(model)
    }
}

fn rotation_matrix(weights: &Array2<f64>, loadings: &Array2<f64>) -> Result<Array2<f64>> {
    let a = weights.ncols();
    let pw = loadings.t().dot(weights);
    let mut rotation = Array2::zeros((weights.nrows(), a));
    for j in 0..a {
        let mut e = Array1::zeros(a);
        e[j] = 1.0;
        // Column j of (P^T W)^{-1}; P^T W has unit diagonal by construction,
        // so failure means a collapsed component.
        let col = linalg::solve(&pw, &e).ok_or(Error::ZeroWeight { component: j + 1 })?;
        let r = weights.dot(&col);
        rotation.column_mut(j).assign(&r);
    }
    Ok(rotation)
}

fn coefficients_from(
    weights: &Array2<f64>,
    loadings: &Array2<f64>,
    q: &Array1<f64>,
) -> Result<Array1<f64>> {
    let pw = loadings.t().dot(weights);
    let z = linalg::solve(&pw, q).ok_or(Error::ZeroWeight {
        component: q.len(),
    })?;
    Ok(weights.dot(&z))
}

/// Fit a PLS1 model with `n_components` latent components by NIPALS.
///
/// Each component runs the weight/score iteration to a relative score
/// tolerance of 1e-16, then deflates both the predictors and the response.
/// Requires `1 <= n_components <= min(n - 1, p)` and a non-constant target.
pub fn fit(x: ArrayView2<f64>, y: ArrayView1<f64>, n_components: usize) -> Result<PlsModel> {
    let (n, p) = x.dim();
    if y.len() != n {
        return Err(Error::LengthMismatch {
            left: "spectra rows",
            left_len: n,
            right: "targets",
            right_len: y.len(),
        });
    }
    if n < 2 || p < 1 {
        return Err(Error::InvalidDataset {
            msg: format!("need at least 2 samples and 1 feature, got {n} x {p}"),
        });
    }
    let cap = (n - 1).min(p);
    if n_components == 0 || n_components > cap {
        return Err(Error::InvalidConfig {
            msg: format!(
                "component count must lie in [1, {cap}] for {n} samples with {p} features, got {n_components}"
            ),
        });
    }

    let x_mean = x.mean_axis(Axis(0)).expect("non-empty");
    let y_mean = y.mean().expect("non-empty");
    let mut xd = &x - &x_mean;
    let mut yd = y.to_owned() - y_mean;
    if yd.iter().all(|v| *v == 0.0) {
        return Err(Error::ConstantTarget);
    }

    let mut weights = Array2::zeros((p, n_components));
    let mut loadings = Array2::zeros((p, n_components));
    let mut q = Array1::zeros(n_components);

    for a in 0..n_components {
        // First pass seeds the weight direction from the response itself.
        let mut w = xd.t().dot(&yd);
        let w_norm = w.dot(&w).sqrt();
        if w_norm == 0.0 {
            return Err(Error::ZeroWeight { component: a + 1 });
        }
        w /= w_norm;
        let mut t = xd.dot(&w);
        let mut last_diff = f64::INFINITY;
        for _ in 1..NIPALS_MAX_ITER {
            let tt = t.dot(&t);
            if tt == 0.0 {
                return Err(Error::ZeroWeight { component: a + 1 });
            }
            let q_trial = yd.dot(&t) / tt;
            if q_trial == 0.0 {
                // The response has no projection on this score; further
                // iteration cannot change the direction.
                break;
            }
            let u = yd.mapv(|v| v / q_trial);
            let mut w_next = xd.t().dot(&u);
            let w_next_norm = w_next.dot(&w_next).sqrt();
            if w_next_norm == 0.0 {
                return Err(Error::ZeroWeight { component: a + 1 });
            }
            w_next /= w_next_norm;
            let t_next = xd.dot(&w_next);
            let d = &t_next - &t;
            let diff = d.dot(&d).sqrt();
            let t_norm = t_next.dot(&t_next).sqrt();
            w = w_next;
            t = t_next;
            // Stop at tolerance, or as soon as the step stops shrinking —
            // with one response the direction is fixed after the first
            // pass, so anything further is rounding jitter.
            if diff <= NIPALS_TOL * t_norm || diff >= last_diff {
                break;
            }
            last_diff = diff;
        }

        let tt = t.dot(&t);
        if tt == 0.0 {
            return Err(Error::ZeroWeight { component: a + 1 });
        }
        let p_a = xd.t().dot(&t) / tt;
        let q_a = yd.dot(&t) / tt;

        // Deflation: remove the explained part from both blocks.
        let outer = t
            .view()
            .insert_axis(Axis(1))
            .dot(&p_a.view().insert_axis(Axis(0)));
        xd -= &outer;
        yd.scaled_add(-q_a, &t);

        weights.column_mut(a).assign(&w);
        loadings.column_mut(a).assign(&p_a);
        q[a] = q_a;
    }

    let coefficients = coefficients_from(&weights, &loadings, &q)?;
    Ok(PlsModel {
        x_mean,
        y_mean,
        weights,
        loadings,
        q,
        coefficients,
    })
}

/// How the component count is chosen from a [`CvCurve`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// Minimize loss on a held-out set (requires a curve with holdout data).
    HoldoutOptimal,
    /// Minimize the cross-validated loss.
    Cv,
    /// Minimize the bias-corrected cross-validated loss.
    CorrectedCv,
}

/// Per-component losses from cross-validation, plus an optional held-out
/// column. All losses are mean Huber at the fixed 1 mg elbow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCurve {
    /// Component counts, always `1..=max_components`.
    pub components: Vec<usize>,
    /// Loss of the full-data fit at each count.
    pub train_loss: Vec<f64>,
    /// Pooled out-of-fold loss at each count.
    pub cv_loss: Vec<f64>,
    /// `cv + |cv - train|` at each count.
    pub corrected_cv_loss: Vec<f64>,
    /// Loss on a separate held-out set, when one was supplied.
    pub holdout_loss: Option<Vec<f64>>,
}

impl CvCurve {
    /// Index of the minimum with ties broken toward fewer components.
    fn argmin(losses: &[f64]) -> usize {
        let mut best = 0;
        for (i, v) in losses.iter().enumerate() {
            if *v < losses[best] {
                best = i;
            }
        }
        best
    }

    /// Chosen component count for a strategy.
    pub fn select(&self, strategy: SelectionStrategy) -> Result<usize> {
        let losses = match strategy {
            SelectionStrategy::Cv => &self.cv_loss,
            SelectionStrategy::CorrectedCv => &self.corrected_cv_loss,
            SelectionStrategy::HoldoutOptimal => {
                self.holdout_loss.as_ref().ok_or(Error::InvalidConfig {
                    msg: "holdout-optimal selection needs a curve built with a held-out set"
                        .into(),
                })?
            }
        };
        Ok(self.components[Self::argmin(losses)])
    }

    /// Attach held-out losses: fit on `(x_train, y_train)` once at the
    /// curve's maximum component count and score every truncation on
    /// `(x_holdout, y_holdout)`.
    pub fn with_holdout(
        mut self,
        x_train: ArrayView2<f64>,
        y_train: ArrayView1<f64>,
        x_holdout: ArrayView2<f64>,
        y_holdout: ArrayView1<f64>,
    ) -> Result<CvCurve> {
        let a_max = self.components.len();
        let model = fit(x_train, y_train, a_max)?;
        let path = model.coefficient_path()?;
        let centered = &x_holdout - &model.x_mean;
        let mut losses = Vec::with_capacity(a_max);
        for a in 1..=a_max {
            let preds = centered.dot(&path.column(a - 1)) + model.y_mean;
            let residuals: Vec<f64> = preds
                .iter()
                .zip(y_holdout.iter())
                .map(|(p, t)| p - t)
                .collect();
            losses.push(huber(&residuals, SELECTION_HUBER_DELTA)?);
        }
        self.holdout_loss = Some(losses);
        Ok(self)
    }
}

/// K-fold cross-validation over component counts `1..=max_components`.
///
/// Rows are shuffled once with a seeded generator and dealt round-robin
/// into `folds` folds. Each fold's models are fit at the maximum count and
/// truncated, exploiting the nesting of NIPALS components. Out-of-fold
/// residuals are pooled per count before scoring.
pub fn cross_validate(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    max_components: usize,
    folds: usize,
    seed: u64,
) -> Result<CvCurve> {
    let (n, p) = x.dim();
    if folds < 2 {
        return Err(Error::InvalidCv {
            msg: format!("need at least 2 folds, got {folds}"),
        });
    }
    if folds > n {
        return Err(Error::InvalidCv {
            msg: format!("cannot split {n} samples into {folds} folds"),
        });
    }
    let max_fold = n.div_ceil(folds);
    let min_train = n - max_fold;
    let cap = min_train.saturating_sub(1).min(p);
    if max_components == 0 || max_components > cap {
        return Err(Error::InvalidCv {
            msg: format!(
                "component count must lie in [1, {cap}] for {n} samples in {folds} folds, got {max_components}"
            ),
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    // Full-data fit supplies the train-loss column.
    let full = fit(x, y, max_components)?;
    let full_path = full.coefficient_path()?;
    let centered_all = &x - &full.x_mean;
    let mut train_loss = Vec::with_capacity(max_components);
    for a in 1..=max_components {
        let preds = centered_all.dot(&full_path.column(a - 1)) + full.y_mean;
        let residuals: Vec<f64> = preds.iter().zip(y.iter()).map(|(p, t)| p - t).collect();
        train_loss.push(huber(&residuals, SELECTION_HUBER_DELTA)?);
    }

    // Pooled out-of-fold residuals per component count.
    let mut pooled: Vec<Vec<f64>> = vec![Vec::with_capacity(n); max_components];
    for f in 0..folds {
        let held: Vec<usize> = order.iter().skip(f).step_by(folds).copied().collect();
        let mut in_held = vec![false; n];
        for &i in &held {
            in_held[i] = true;
        }
        let train_idx: Vec<usize> = (0..n).filter(|i| !in_held[*i]).collect();

        let mut x_tr = Array2::zeros((train_idx.len(), p));
        let mut y_tr = Array1::zeros(train_idx.len());
        for (r, &i) in train_idx.iter().enumerate() {
            x_tr.row_mut(r).assign(&x.row(i));
            y_tr[r] = y[i];
        }
        let model = fit(x_tr.view(), y_tr.view(), max_components)?;
        let path = model.coefficient_path()?;

        let mut x_ho = Array2::zeros((held.len(), p));
        for (r, &i) in held.iter().enumerate() {
            x_ho.row_mut(r).assign(&x.row(i));
        }
        let centered = &x_ho - &model.x_mean;
        for a in 1..=max_components {
            let preds = centered.dot(&path.column(a - 1)) + model.y_mean;
            for (r, &i) in held.iter().enumerate() {
                pooled[a - 1].push(preds[r] - y[i]);
            }
        }
    }

    let mut cv_loss = Vec::with_capacity(max_components);
    let mut corrected = Vec::with_capacity(max_components);
    for a in 0..max_components {
        let cv = huber(&pooled[a], SELECTION_HUBER_DELTA)?;
        cv_loss.push(cv);
        corrected.push(cv + (cv - train_loss[a]).abs());
    }

    Ok(CvCurve {
        components: (1..=max_components).collect(),
        train_loss,
        cv_loss,
        corrected_cv_loss: corrected,
        holdout_loss: None,
    })
}

/// Result of the residual outlier screen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierScreen {
    /// Indices kept, ascending, in the coordinate system of the screened set.
    pub kept: Vec<usize>,
    /// Indices flagged as outliers, ascending.
    pub flagged: Vec<usize>,
    /// Component count selected (by cross-validated loss) for the screen fit.
    pub n_components: usize,
}

/// One-pass outlier screen: select a component count by cross-validated
/// loss, fit the whole set at that count, and flag every sample whose
/// absolute residual exceeds `sigma_mult` times the residual standard
/// deviation. A small floor proportional to the target spread keeps exact
/// or near-exact fits (residuals at rounding level) from flagging anything.
pub fn remove_outliers(
    set: &SpectraSet,
    folds: usize,
    max_components: usize,
    sigma_mult: f64,
    seed: u64,
) -> Result<OutlierScreen> {
    if !(sigma_mult.is_finite() && sigma_mult > 0.0) {
        return Err(Error::InvalidConfig {
            msg: format!("sigma multiplier must be positive, got {sigma_mult}"),
        });
    }
    let x = set.absorbance().view();
    let y = set.reference_mg().view();
    let n = y.len();

    let curve = cross_validate(x, y, max_components, folds, seed)?;
    let a = curve.select(SelectionStrategy::Cv)?;
    let model = fit(x, y, a)?;
    let preds = model.predict_matrix(x)?;
    let residuals = &preds - &y;

    let mean = residuals.mean().expect("non-empty");
    let sigma = (residuals.mapv(|r| (r - mean).powi(2)).sum() / n as f64).sqrt();
    let y_mean = y.mean().expect("non-empty");
    let y_spread = (y.mapv(|v| (v - y_mean).powi(2)).sum() / n as f64).sqrt();
    let threshold = (sigma_mult * sigma).max(1e-9 * y_spread);

    let mut kept = Vec::with_capacity(n);
    let mut flagged = Vec::new();
    for i in 0..n {
        if residuals[i].abs() > threshold {
            flagged.push(i);
        } else {
            kept.push(i);
        }
    }
    if kept.is_empty() {
        return Err(Error::AllOutliers);
    }
    Ok(OutlierScreen {
        kept,
        flagged,
        n_components: a,
    })
}
