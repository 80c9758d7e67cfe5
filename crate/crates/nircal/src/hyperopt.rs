//! Sequential model-based hyperparameter search: a Gaussian process
//! surrogate with a Matérn-5/2 kernel (one lengthscale per dimension) and
//! expected improvement as the acquisition rule.
//!
//! The optimizer minimizes a black-box objective over a box of integer and
//! float dimensions. Proposals are scored on the unit cube; integer
//! dimensions are rounded before the objective ever sees them, and the
//! rounded point is also what the surrogate is trained on. Every random
//! choice is derived from the trial index and a fixed seed, so a run can be
//! resumed from its recorded trials and continue bit-for-bit as if it had
//! never stopped.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal as GaussDraw};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg;

/// One box dimension of the search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dim {
    pub name: String,
    pub low: f64,
    pub high: f64,
    /// Integer dimensions are rounded to the nearest whole number before
    /// evaluation; bounds are inclusive.
    pub integer: bool,
}

impl Dim {
    pub fn int(name: &str, low: i64, high: i64) -> Dim {
        Dim {
            name: name.into(),
            low: low as f64,
            high: high as f64,
            integer: true,
        }
    }

    pub fn float(name: &str, low: f64, high: f64) -> Dim {
        Dim {
            name: name.into(),
            low,
            high,
            integer: false,
        }
    }
}

/// An ordered box of named dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    dims: Vec<Dim>,
}

impl SearchSpace {
    pub fn new(dims: Vec<Dim>) -> Result<SearchSpace> {
        if dims.is_empty() {
            return Err(Error::InvalidSearchSpace {
                msg: "search space needs at least one dimension".into(),
            });
        }
        let mut names = std::collections::HashSet::new();
        for d in &dims {
            if d.name.is_empty() {
                return Err(Error::InvalidSearchSpace {
                    msg: "dimension names must not be empty".into(),
                });
            }
            if !names.insert(d.name.as_str()) {
                return Err(Error::InvalidSearchSpace {
                    msg: format!("duplicate dimension name \"{}\"", d.name),
                });
            }
            if !(d.low.is_finite() && d.high.is_finite() && d.low < d.high) {
                return Err(Error::InvalidSearchSpace {
                    msg: format!(
                        "dimension \"{}\" needs finite bounds with low < high, got [{}, {}]",
                        d.name, d.low, d.high
                    ),
                });
            }
        }
        Ok(SearchSpace { dims })
    }

    /// Search region for the convolutional model's structure: kernel
    /// counts, filter lengths, dropout rate, and dense width.
    pub fn cnn_search_space() -> SearchSpace {
        SearchSpace::new(vec![
            Dim::int("kernels1", 2, 40),
            Dim::int("filter_len1", 5, 150),
            Dim::int("kernels2", 2, 40),
            Dim::int("filter_len2", 5, 150),
            Dim::float("dropout_rate", 0.0, 0.5),
            Dim::int("dense_units", 4, 1000),
        ])
        .expect("static space is valid")
    }

    pub fn dims(&self) -> &[Dim] {
        &self.dims
    }

    pub fn n_dims(&self) -> usize {
        self.dims.len()
    }

    /// Map a point in natural units onto the unit cube.
    pub fn to_unit(&self, point: &[f64]) -> Vec<f64> {
        self.dims
            .iter()
            .zip(point)
            .map(|(d, v)| ((v - d.low) / (d.high - d.low)).clamp(0.0, 1.0))
            .collect()
    }

    /// Map a unit-cube point into natural units, rounding integer
    /// dimensions. The result is always canonical.
    pub fn from_unit(&self, unit: &[f64]) -> Vec<f64> {
        self.dims
            .iter()
            .zip(unit)
            .map(|(d, u)| {
                let v = d.low + u.clamp(0.0, 1.0) * (d.high - d.low);
                if d.integer {
                    v.round().clamp(d.low, d.high)
                } else {
                    v
                }
            })
            .collect()
    }

    /// Clamp into bounds and round integer dimensions.
    pub fn canonicalize(&self, point: &[f64]) -> Vec<f64> {
        self.dims
            .iter()
            .zip(point)
            .map(|(d, v)| {
                let c = v.clamp(d.low, d.high);
                if d.integer {
                    c.round().clamp(d.low, d.high)
                } else {
                    c
                }
            })
            .collect()
    }

    pub fn validate_point(&self, point: &[f64]) -> Result<()> {
        if point.len() != self.n_dims() {
            return Err(Error::InvalidSearchSpace {
                msg: format!(
                    "point has {} coordinates but the space has {} dimensions",
                    point.len(),
                    self.n_dims()
                ),
            });
        }
        for (d, v) in self.dims.iter().zip(point) {
            if !v.is_finite() || *v < d.low || *v > d.high {
                return Err(Error::InvalidSearchSpace {
                    msg: format!("coordinate \"{}\" = {v} outside [{}, {}]", d.name, d.low, d.high),
                });
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Quasi-random sequences

/// First `n` primes, for radical-inverse bases.
fn primes(n: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(n);
    let mut candidate = 2u64;
    while out.len() < n {
        if out.iter().all(|p| candidate % p != 0) {
            out.push(candidate);
        }
        candidate += 1;
    }
    out
}

/// Radical-inverse of `index` in the given base (van der Corput).
fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let mut result = 0.0;
    let mut frac = 1.0 / base as f64;
    while index > 0 {
        result += (index % base) as f64 * frac;
        index /= base;
        frac /= base as f64;
    }
    result
}

/// `index`-th point of the Halton sequence in `bases.len()` dimensions.
fn halton_point(index: u64, bases: &[u64]) -> Vec<f64> {
    bases
        .iter()
        .map(|b| radical_inverse(index, *b))
        .collect()
}

// ---------------------------------------------------------------------------
// Gaussian process surrogate

/// Log-space bounds for the kernel hyperparameters (on the unit cube with a
/// standardized response).
const LOG_LS_BOUNDS: (f64, f64) = (-4.605170185988091, 2.302585092994046); // [1e-2, 1e1]
const LOG_SIGNAL_BOUNDS: (f64, f64) = (-9.210340371976182, 4.605170185988092); // [1e-4, 1e2]
const LOG_NOISE_BOUNDS: (f64, f64) = (-20.72326583694641, 0.0); // [1e-9, 1e0]

/// Jitter ladder tried when the covariance fails to factor.
const JITTER_LADDER: [f64; 5] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4];

/// Matérn-5/2 correlation at scaled distance `r`.
fn matern52(r: f64) -> f64 {
    let s = 5.0_f64.sqrt() * r;
    (1.0 + s + s * s / 3.0) * (-s).exp()
}

/// Scaled distance between two points under per-dimension lengthscales.
fn scaled_distance(a: &[f64], b: &[f64], lengthscales: &[f64]) -> f64 {
    let mut sum = 0.0;
    for i in 0..a.len() {
        let d = (a[i] - b[i]) / lengthscales[i];
        sum += d * d;
    }
    sum.sqrt()
}

/// Gaussian process regressor on the unit cube with standardized response.
#[derive(Debug, Clone)]
pub struct GpModel {
    /// Training inputs (duplicates collapsed), one row per point.
    x: Array2<f64>,
    y_mean: f64,
    y_scale: f64,
    lengthscales: Vec<f64>,
    signal_var: f64,
    noise_var: f64,
    /// Lower Cholesky factor of the regularized covariance.
    chol: Array2<f64>,
    /// Solution of `K alpha = y_std`.
    alpha: Array1<f64>,
}

/// Collapse exactly-equal rows, averaging their responses. Order follows
/// first occurrence so the result is deterministic.
fn collapse_duplicates(x: ArrayView2<f64>, y: &[f64]) -> (Array2<f64>, Vec<f64>) {
    let mut index: std::collections::HashMap<Vec<u64>, usize> = std::collections::HashMap::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for (i, row) in x.outer_iter().enumerate() {
        let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
        match index.get(&key) {
            Some(&j) => {
                sums[j].0 += y[i];
                sums[j].1 += 1;
            }
            None => {
                index.insert(key, rows.len());
                rows.push(row.to_vec());
                sums.push((y[i], 1));
            }
        }
    }
    let m = rows.len();
    let d = x.ncols();
    let mut xd = Array2::zeros((m, d));
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            xd[[i, j]] = *v;
        }
    }
    let yd = sums.iter().map(|(s, c)| s / *c as f64).collect();
    (xd, yd)
}

/// Covariance of the training set under the given hyperparameters.
fn covariance(x: &Array2<f64>, lengthscales: &[f64], signal_var: f64, noise_var: f64) -> Array2<f64> {
    let m = x.nrows();
    let mut k = Array2::zeros((m, m));
    for i in 0..m {
        for j in 0..=i {
            let r = scaled_distance(
                x.row(i).as_slice().expect("standard layout"),
                x.row(j).as_slice().expect("standard layout"),
                lengthscales,
            );
            let v = signal_var * matern52(r);
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    for i in 0..m {
        k[[i, i]] += noise_var;
    }
    k
}

/// Cholesky with a jitter ladder; returns the factor and the jitter used.
fn jittered_cholesky(k: &Array2<f64>) -> Option<(Array2<f64>, f64)> {
    for jitter in JITTER_LADDER {
        let mut kj = k.clone();
        if jitter > 0.0 {
            for i in 0..kj.nrows() {
                kj[[i, i]] += jitter;
            }
        }
        if let Some(l) = linalg::cholesky(&kj) {
            return Some((l, jitter));
        }
    }
    None
}

/// Log marginal likelihood of the standardized response under the kernel,
/// or `None` when the covariance cannot be factored at any jitter level.
fn log_marginal_likelihood(
    x: &Array2<f64>,
    y_std: &Array1<f64>,
    lengthscales: &[f64],
    signal_var: f64,
    noise_var: f64,
) -> Option<f64> {
    let k = covariance(x, lengthscales, signal_var, noise_var);
    let (l, _) = jittered_cholesky(&k)?;
    let alpha = linalg::cho_solve(&l, y_std);
    let m = y_std.len() as f64;
    let log_det_half: f64 = (0..l.nrows()).map(|i| l[[i, i]].ln()).sum();
    Some(-0.5 * y_std.dot(&alpha) - log_det_half - 0.5 * m * (2.0 * std::f64::consts::PI).ln())
}

/// Nelder–Mead minimization clipped to a box. Returns the best vertex.
fn nelder_mead(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    bounds: &[(f64, f64)],
    max_iter: usize,
) -> (Vec<f64>, f64) {
    let n = x0.len();
    let clip = |x: &mut Vec<f64>| {
        for (v, (lo, hi)) in x.iter_mut().zip(bounds) {
            *v = v.clamp(*lo, *hi);
        }
    };

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut start = x0.to_vec();
    clip(&mut start);
    simplex.push(start.clone());
    for i in 0..n {
        let mut v = start.clone();
        v[i] += step;
        clip(&mut v);
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();

    for _ in 0..max_iter {
        // Order vertices best-first.
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
        let best = order[0];
        let worst = order[n];
        let second_worst = order[n - 1];

        if (values[worst] - values[best]).abs()
            <= 1e-10 * (values[best].abs().max(1.0))
        {
            break;
        }

        // Centroid of all but the worst vertex.
        let mut centroid = vec![0.0; n];
        for &i in order.iter().take(n) {
            for j in 0..n {
                centroid[j] += simplex[i][j] / n as f64;
            }
        }

        let blend = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> {
            let mut out: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + t * (x - y)).collect();
            clip(&mut out);
            out
        };

        let reflected = blend(&centroid, &simplex[worst], 1.0);
        let fr = f(&reflected);
        if fr < values[best] {
            let expanded = blend(&centroid, &simplex[worst], 2.0);
            let fe = f(&expanded);
            if fe < fr {
                simplex[worst] = expanded;
                values[worst] = fe;
            } else {
                simplex[worst] = reflected;
                values[worst] = fr;
            }
        } else if fr < values[second_worst] {
            simplex[worst] = reflected;
            values[worst] = fr;
        } else {
            let contracted = blend(&centroid, &simplex[worst], -0.5);
            let fc = f(&contracted);
            if fc < values[worst] {
                simplex[worst] = contracted;
                values[worst] = fc;
            } else {
                // Shrink toward the best vertex.
                let anchor = simplex[best].clone();
                for i in 0..=n {
                    if i == best {
                        continue;
                    }
                    let mut v: Vec<f64> = anchor
                        .iter()
                        .zip(&simplex[i])
                        .map(|(a, b)| a + 0.5 * (b - a))
                        .collect();
                    clip(&mut v);
                    values[i] = f(&v);
                    simplex[i] = v;
                }
            }
        }
    }

    let mut best = 0;
    for i in 1..=n {
        if values[i] < values[best] {
            best = i;
        }
    }
    (simplex[best].clone(), values[best])
}

impl GpModel {
    /// Build a model with fixed hyperparameters (lengthscales and variances
    /// in natural units, not logs).
    pub fn with_hyperparams(
        x: ArrayView2<f64>,
        y: &[f64],
        lengthscales: &[f64],
        signal_var: f64,
        noise_var: f64,
    ) -> Result<GpModel> {
        if x.nrows() == 0 || x.nrows() != y.len() {
            return Err(Error::LengthMismatch {
                left: "surrogate inputs",
                left_len: x.nrows(),
                right: "responses",
                right_len: y.len(),
            });
        }
        if lengthscales.len() != x.ncols() {
            return Err(Error::LengthMismatch {
                left: "lengthscales",
                left_len: lengthscales.len(),
                right: "input dimensions",
                right_len: x.ncols(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "surrogate training data",
            });
        }
        if lengthscales.iter().any(|l| !(l.is_finite() && *l > 0.0))
            || !(signal_var.is_finite() && signal_var > 0.0)
            || !(noise_var.is_finite() && noise_var >= 0.0)
        {
            return Err(Error::InvalidConfig {
                msg: "kernel hyperparameters must be positive and finite".into(),
            });
        }

        let (xd, yd) = collapse_duplicates(x, y);
        let m = yd.len();
        let y_mean = yd.iter().sum::<f64>() / m as f64;
        let var = yd.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / m as f64;
        // A flat response still yields a usable (prior-dominated) model.
        let y_scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        let y_std = Array1::from_iter(yd.iter().map(|v| (v - y_mean) / y_scale));

        let k = covariance(&xd, lengthscales, signal_var, noise_var);
        let (chol, _) = jittered_cholesky(&k).ok_or(Error::CovarianceNotPd {
            max_jitter: *JITTER_LADDER.last().expect("non-empty ladder"),
        })?;
        let alpha = linalg::cho_solve(&chol, &y_std);
        Ok(GpModel {
            x: xd,
            y_mean,
            y_scale,
            lengthscales: lengthscales.to_vec(),
            signal_var,
            noise_var,
            chol,
            alpha,
        })
    }

    /// Posterior mean and standard deviation at a point, in the units of
    /// the original response. The variance is clamped at zero before the
    /// square root.
    pub fn posterior(&self, point: &[f64]) -> (f64, f64) {
        let m = self.x.nrows();
        let mut k_star = Array1::zeros(m);
        for i in 0..m {
            let r = scaled_distance(
                self.x.row(i).as_slice().expect("standard layout"),
                point,
                &self.lengthscales,
            );
            k_star[i] = self.signal_var * matern52(r);
        }
        let mean_std = k_star.dot(&self.alpha);
        let v = linalg::solve_lower(&self.chol, &k_star);
        let var_std = (self.signal_var + self.noise_var - v.dot(&v)).max(0.0);
        (
            self.y_mean + self.y_scale * mean_std,
            self.y_scale * var_std.sqrt(),
        )
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }
}

/// Fit a Gaussian process by maximizing the log marginal likelihood with a
/// multi-start Nelder–Mead search over log hyperparameters. One start is
/// biased toward near-noiseless interpolation; the rest sample the box.
pub fn gp_fit(x: ArrayView2<f64>, y: &[f64], seed: u64) -> Result<GpModel> {
    if x.nrows() == 0 || x.nrows() != y.len() {
        return Err(Error::LengthMismatch {
            left: "surrogate inputs",
            left_len: x.nrows(),
            right: "responses",
            right_len: y.len(),
        });
    }
    if y.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "surrogate training data",
        });
    }
    let d = x.ncols();
    let (xd, yd) = collapse_duplicates(x, y);
    let m = yd.len();
    let y_mean = yd.iter().sum::<f64>() / m as f64;
    let var = yd.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / m as f64;
    let y_scale = if var > 0.0 { var.sqrt() } else { 1.0 };
    let y_std = Array1::from_iter(yd.iter().map(|v| (v - y_mean) / y_scale));

    // theta = [log lengthscale per dim, log signal variance, log noise variance]
    let mut bounds = vec![LOG_LS_BOUNDS; d];
    bounds.push(LOG_SIGNAL_BOUNDS);
    bounds.push(LOG_NOISE_BOUNDS);

    let mut objective = |theta: &[f64]| -> f64 {
        let ls: Vec<f64> = theta[..d].iter().map(|v| v.exp()).collect();
        let sv = theta[d].exp();
        let nv = theta[d + 1].exp();
        match log_marginal_likelihood(&xd, &y_std, &ls, sv, nv) {
            Some(lml) if lml.is_finite() => -lml,
            _ => f64::INFINITY,
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts: Vec<Vec<f64>> = Vec::with_capacity(8);
    // Moderate default: mid-range lengthscales, unit signal, some noise.
    let mut base = vec![(0.5f64).ln(); d];
    base.push(0.0);
    base.push((1e-2f64).ln());
    starts.push(base);
    // Low-noise start favors interpolating fits.
    let mut low_noise = vec![(0.5f64).ln(); d];
    low_noise.push(0.0);
    low_noise.push((1e-6f64).ln());
    starts.push(low_noise);
    while starts.len() < 8 {
        let theta: Vec<f64> = bounds
            .iter()
            .map(|(lo, hi)| rng.random_range(*lo..*hi))
            .collect();
        starts.push(theta);
    }

    let mut best_theta = None;
    let mut best_val = f64::INFINITY;
    for start in &starts {
        let (theta, val) = nelder_mead(&mut objective, start, 0.5, &bounds, 150);
        if val < best_val {
            best_val = val;
            best_theta = Some(theta);
        }
    }
    let theta = best_theta.ok_or(Error::CovarianceNotPd {
        max_jitter: *JITTER_LADDER.last().expect("non-empty ladder"),
    })?;
    if !best_val.is_finite() {
        return Err(Error::CovarianceNotPd {
            max_jitter: *JITTER_LADDER.last().expect("non-empty ladder"),
        });
    }

    let ls: Vec<f64> = theta[..d].iter().map(|v| v.exp()).collect();
    GpModel::with_hyperparams(x, y, &ls, theta[d].exp(), theta[d + 1].exp())
}

/// Expected improvement for minimization: how much a new draw at a point
/// with posterior `(mean, std)` is expected to undercut `best`.
pub fn expected_improvement(mean: f64, std: f64, best: f64) -> f64 {
    if std <= 0.0 {
        return (best - mean).max(0.0);
    }
    let unit = Normal::new(0.0, 1.0).expect("standard normal");
    let z = (best - mean) / std;
    ((best - mean) * unit.cdf(z) + std * unit.pdf(z)).max(0.0)
}

// ---------------------------------------------------------------------------
// Optimization loop

/// One evaluated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    /// Point in natural units (integer dimensions already rounded).
    pub point: Vec<f64>,
    /// Objective value; meaningless when `failed` is set.
    pub value: f64,
    pub failed: bool,
}

/// Budget and seeding for [`optimize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoConfig {
    /// Quasi-random evaluations before the surrogate takes over.
    pub n_init: usize,
    /// Surrogate-guided evaluations after the initial design.
    pub n_iter: usize,
    pub seed: u64,
}

impl Default for BoConfig {
    fn default() -> Self {
        BoConfig {
            n_init: 20,
            n_iter: 40,
            seed: 0,
        }
    }
}

/// Result of an optimization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoRun {
    pub trials: Vec<Trial>,
    pub best_point: Vec<f64>,
    pub best_value: f64,
    /// Best value seen after each trial; infinite before the first success.
    pub best_curve: Vec<f64>,
}

/// Surrogate-guided candidates per iteration.
const N_CANDIDATES: usize = 2048;
/// Local perturbations added around each of the best points.
const N_LOCAL_PER_ANCHOR: usize = 32;
const N_ANCHORS: usize = 5;
/// Standard deviation of local perturbations on the unit cube.
const LOCAL_STD: f64 = 0.05;
/// Stride in Halton index space reserved per trial, so that resumed runs
/// consume exactly the same quasi-random points as uninterrupted ones.
const HALTON_STRIDE: u64 = 4096;

fn per_trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Penalized training data for the surrogate: failures count as the worst
/// observed success, steering the search away without poisoning the scale.
fn surrogate_data(space: &SearchSpace, trials: &[Trial]) -> Option<(Array2<f64>, Vec<f64>, f64)> {
    let successes: Vec<&Trial> = trials.iter().filter(|t| !t.failed).collect();
    if successes.is_empty() {
        return None;
    }
    let worst = successes.iter().map(|t| t.value).fold(f64::NEG_INFINITY, f64::max);
    let best = successes.iter().map(|t| t.value).fold(f64::INFINITY, f64::min);
    let mut x = Array2::zeros((trials.len(), space.n_dims()));
    let mut y = Vec::with_capacity(trials.len());
    for (i, t) in trials.iter().enumerate() {
        let unit = space.to_unit(&t.point);
        for (j, u) in unit.iter().enumerate() {
            x[[i, j]] = *u;
        }
        y.push(if t.failed { worst } else { t.value });
    }
    Some((x, y, best))
}

/// Propose the next point: fit the surrogate, score a quasi-random sweep
/// plus local perturbations around the best evaluated points, and take the
/// expected-improvement maximizer that has not been evaluated yet. Falls
/// back to re-evaluation only when every candidate is a duplicate (tiny
/// discrete spaces), and to the quasi-random stream when nothing has
/// succeeded yet.
fn propose(
    space: &SearchSpace,
    trials: &[Trial],
    bases: &[u64],
    seed: u64,
) -> Result<Vec<f64>> {
    let t = trials.len();
    let halton_base = 1 + t as u64 * HALTON_STRIDE;

    let Some((x, y, best)) = surrogate_data(space, trials) else {
        return Ok(space.from_unit(&halton_point(halton_base, bases)));
    };
    let gp = gp_fit(x.view(), &y, seed ^ 0xA5A5_5A5A)?;

    let mut rng = per_trial_rng(seed, t);
    let gauss = GaussDraw::new(0.0, LOCAL_STD).expect("valid std");

    let mut candidates: Vec<Vec<f64>> = Vec::with_capacity(N_CANDIDATES + N_ANCHORS * N_LOCAL_PER_ANCHOR);
    for j in 0..N_CANDIDATES as u64 {
        candidates.push(halton_point(halton_base + j, bases));
    }
    // Anchors: best distinct successful points.
    let mut ranked: Vec<&Trial> = trials.iter().filter(|t| !t.failed).collect();
    ranked.sort_by(|a, b| a.value.partial_cmp(&b.value).unwrap_or(std::cmp::Ordering::Equal));
    let mut anchor_keys = std::collections::HashSet::new();
    let mut anchors = 0;
    for t in ranked {
        let key: Vec<u64> = t.point.iter().map(|v| v.to_bits()).collect();
        if !anchor_keys.insert(key) {
            continue;
        }
        let unit = space.to_unit(&t.point);
        for _ in 0..N_LOCAL_PER_ANCHOR {
            let perturbed: Vec<f64> = unit
                .iter()
                .map(|u| (u + gauss.sample(&mut rng)).clamp(0.0, 1.0))
                .collect();
            candidates.push(perturbed);
        }
        anchors += 1;
        if anchors == N_ANCHORS {
            break;
        }
    }

    let evaluated: std::collections::HashSet<Vec<u64>> = trials
        .iter()
        .map(|t| t.point.iter().map(|v| v.to_bits()).collect())
        .collect();

    let mut best_new: Option<(f64, Vec<f64>)> = None;
    let mut best_any: Option<(f64, Vec<f64>)> = None;
    let mut scored = std::collections::HashSet::new();
    for unit in &candidates {
        let natural = space.from_unit(unit);
        let key: Vec<u64> = natural.iter().map(|v| v.to_bits()).collect();
        if !scored.insert(key.clone()) {
            continue;
        }
        let canonical_unit = space.to_unit(&natural);
        let (mean, std) = gp.posterior(&canonical_unit);
        let ei = expected_improvement(mean, std, best);
        if best_any.as_ref().is_none_or(|(b, _)| ei > *b) {
            best_any = Some((ei, natural.clone()));
        }
        if !evaluated.contains(&key) && best_new.as_ref().is_none_or(|(b, _)| ei > *b) {
            best_new = Some((ei, natural));
        }
    }

    match (best_new, best_any) {
        (Some((_, p)), _) => Ok(p),
        (None, Some((_, p))) => Ok(p),
        (None, None) => Ok(space.from_unit(&halton_point(halton_base, bases))),
    }
}

/// Minimize `objective` over `space`.
///
/// The first `n_init` trials come from a Halton design; afterwards each
/// trial maximizes expected improvement under a freshly fit surrogate.
/// `initial_trials` resume a previous run: they count toward the budget and
/// the continuation is identical to a run that never stopped. `on_trial`
/// fires once per new evaluation, in order, before the next one starts.
pub fn optimize<F, C>(
    space: &SearchSpace,
    config: &BoConfig,
    initial_trials: &[Trial],
    mut objective: F,
    mut on_trial: C,
) -> Result<BoRun>
where
    F: FnMut(&[f64]) -> Result<f64>,
    C: FnMut(&Trial) -> Result<()>,
{
    if config.n_init == 0 {
        return Err(Error::InvalidConfig {
            msg: "need at least one initial evaluation".into(),
        });
    }
    let target = config.n_init + config.n_iter;
    let bases = primes(space.n_dims());

    let mut trials: Vec<Trial> = Vec::with_capacity(target);
    for (i, t) in initial_trials.iter().enumerate() {
        if t.index != i {
            return Err(Error::InvalidConfig {
                msg: format!("resumed trials must be contiguous from 0, found index {} at position {i}", t.index),
            });
        }
        space.validate_point(&t.point)?;
        trials.push(t.clone());
    }

    while trials.len() < target {
        let t = trials.len();
        let point = if t < config.n_init {
            space.from_unit(&halton_point(1 + t as u64 * HALTON_STRIDE, &bases))
        } else {
            propose(space, &trials, &bases, config.seed)?
        };
        let trial = match objective(&point) {
            Ok(v) if v.is_finite() => Trial {
                index: t,
                point,
                value: v,
                failed: false,
            },
            _ => Trial {
                index: t,
                point,
                value: 0.0,
                failed: true,
            },
        };
        on_trial(&trial)?;
        trials.push(trial);
    }

    let mut best_curve = Vec::with_capacity(trials.len());
    let mut best_value = f64::INFINITY;
    let mut best_point: Option<Vec<f64>> = None;
    for t in &trials {
        if !t.failed && t.value < best_value {
            best_value = t.value;
            best_point = Some(t.point.clone());
        }
        best_curve.push(best_value);
    }
    let best_point = best_point.ok_or(Error::AllTrialsFailed)?;
    Ok(BoRun {
        trials,
        best_point,
        best_value,
        best_curve,
    })
}
