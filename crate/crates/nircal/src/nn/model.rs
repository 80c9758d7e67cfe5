//! Network state, forward passes, and the batch backward pass.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{conv1d_backward_acc, conv1d_forward, dense_backward_acc, dense_forward};
use super::loss::huber_grad;
use super::tensors::Tensors;
use super::CnnSpec;
use crate::dataset::SpectraSet;
use crate::error::{Error, Result};

/// Convolutional regressor with explicit weight storage. Every weight
/// mutation bumps an internal version counter; forward caches remember the
/// version they were computed against so a backward pass over stale
/// activations is rejected instead of silently producing wrong gradients.
#[derive(Debug, Clone)]
pub struct CnnModel {
    spec: CnnSpec,
    weights: Tensors,
    rng: ChaCha8Rng,
    version: u64,
}

/// Gradients with the same shapes as the model weights.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub(crate) t: Tensors,
}

impl Gradients {
    pub fn n_params(&self) -> usize {
        self.t.n_params()
    }

    /// Flat access in the same parameter order as [`CnnModel::param`].
    pub fn param(&self, index: usize) -> Option<f64> {
        self.t.get_flat(index)
    }
}

/// Stochastic draws for one training batch: additive input noise and the
/// inverted-dropout mask (entries are 0 or `1 / (1 - rate)`). Drawing is
/// separated from the forward pass so gradient checks can replay the exact
/// same randomness.
#[derive(Debug, Clone)]
pub struct TrainNoise {
    pub(crate) input: Array2<f64>,
    pub(crate) dropout: Array2<f64>,
}

/// Activations recorded by a training-mode forward pass, consumed by
/// [`CnnModel::backward`].
#[derive(Debug, Clone)]
pub struct Cache {
    version: u64,
    x_noisy: Array2<f64>,
    a1: Array3<f64>,
    a2: Array3<f64>,
    mask: Array2<f64>,
    dropped: Array2<f64>,
    hidden: Array2<f64>,
    preds: Array1<f64>,
}

impl Cache {
    pub fn predictions(&self) -> &Array1<f64> {
        &self.preds
    }

}

impl CnnModel {
    /// Build a model with Glorot-uniform weights and zero biases. Weight
    /// tensors are filled in declaration order from a counter-based
    /// generator seeded here; the same generator then supplies training
    /// noise, so a (spec, seed) pair fixes the whole training trajectory.
    pub fn new(spec: CnnSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Tensors::zeros(&spec);

        let glorot = |rng: &mut ChaCha8Rng, t: &mut [f64], fan_in: usize, fan_out: usize| {
            let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in t {
                *v = rng.random_range(-lim..lim);
            }
        };
        glorot(
            &mut rng,
            weights.conv1_w.as_slice_mut().expect("standard layout"),
            spec.filter_len1,
            spec.kernels1 * spec.filter_len1,
        );
        glorot(
            &mut rng,
            weights.conv2_w.as_slice_mut().expect("standard layout"),
            spec.kernels1 * spec.filter_len2,
            spec.kernels2 * spec.filter_len2,
        );
        glorot(
            &mut rng,
            weights.dense_w.as_slice_mut().expect("standard layout"),
            spec.flat_len(),
            spec.dense_units,
        );
        glorot(
            &mut rng,
            weights.out_w.as_slice_mut().expect("standard layout"),
            spec.dense_units,
            1,
        );
        Ok(CnnModel {
            spec,
            weights,
            rng,
            version: 0,
        })
    }

    pub fn spec(&self) -> &CnnSpec {
        &self.spec
    }

    /// Monotone counter identifying the current weight state.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn n_params(&self) -> usize {
        self.weights.n_params()
    }

    /// Flat parameter access walking the weight tensors in declaration
    /// order (conv1 weights, conv1 biases, conv2 weights, conv2 biases,
    /// dense weights, dense biases, output weights, output bias).
    pub fn param(&self, index: usize) -> Option<f64> {
        self.weights.get_flat(index)
    }

    pub fn set_param(&mut self, index: usize, value: f64) -> Result<()> {
        if self.weights.set_flat(index, value) {
            self.version += 1;
            Ok(())
        } else {
            Err(Error::InvalidConfig {
                msg: format!(
                    "parameter index {index} out of range for a model with {} parameters",
                    self.weights.n_params()
                ),
            })
        }
    }

    pub(crate) fn weights(&self) -> &Tensors {
        &self.weights
    }

    /// Direct weight replacement for deserialization; bumps the version.
    pub(crate) fn replace_weights(&mut self, weights: Tensors) {
        debug_assert!(weights.same_shape(&self.weights));
        self.weights = weights;
        self.version += 1;
    }

    pub(crate) fn apply_update(&mut self, f: impl FnOnce(&mut Tensors)) {
        f(&mut self.weights);
        self.version += 1;
    }

    /// Draw the stochastic parts of one training batch: first the additive
    /// input noise (row-major), then the dropout mask (row-major). Both use
    /// the model's own generator, advancing it.
    pub fn draw_noise(&mut self, batch_size: usize) -> TrainNoise {
        let n = self.spec.input_len;
        let flat = self.spec.flat_len();
        let normal = Normal::new(0.0, self.spec.noise_std).expect("validated noise level");
        let mut input = Array2::zeros((batch_size, n));
        for i in 0..batch_size {
            for j in 0..n {
                input[[i, j]] = normal.sample(&mut self.rng);
            }
        }
        let rate = self.spec.dropout_rate;
        let scale = 1.0 / (1.0 - rate);
        let mut dropout = Array2::zeros((batch_size, flat));
        for i in 0..batch_size {
            for f in 0..flat {
                dropout[[i, f]] = if self.rng.random::<f64>() < rate {
                    0.0
                } else {
                    scale
                };
            }
        }
        TrainNoise { input, dropout }
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.spec.input_len {
            return Err(Error::InputLengthMismatch {
                got: x.ncols(),
                expected: self.spec.input_len,
            });
        }
        Ok(())
    }

    /// Training-mode forward pass over a batch: adds the supplied input
    /// noise, applies both convolutions with ReLU, flattens channel-major,
    /// applies the inverted-dropout mask, then the linear dense and output
    /// layers. Returns predictions plus the activation cache backward needs.
    pub fn forward_train(
        &self,
        x: ArrayView2<f64>,
        noise: &TrainNoise,
    ) -> Result<(Array1<f64>, Cache)> {
        self.check_input(&x)?;
        let b = x.nrows();
        if noise.input.dim() != (b, self.spec.input_len)
            || noise.dropout.dim() != (b, self.spec.flat_len())
        {
            return Err(Error::LengthMismatch {
                left: "batch rows",
                left_len: b,
                right: "noise rows",
                right_len: noise.input.nrows(),
            });
        }
        let spec = &self.spec;
        let (k1, l1) = (spec.kernels1, spec.len1());
        let (k2, l2) = (spec.kernels2, spec.len2());
        let flat = spec.flat_len();

        let x_noisy = &x + &noise.input;
        let mut a1 = Array3::zeros((b, k1, l1));
        let mut a2 = Array3::zeros((b, k2, l2));
        let mut dropped = Array2::zeros((b, flat));
        let mut hidden = Array2::zeros((b, spec.dense_units));
        let mut preds = Array1::zeros(b);

        for i in 0..b {
            let row = x_noisy.row(i);
            let xin = row.insert_axis(Axis(0));
            let mut a1_s = conv1d_forward(xin, &self.weights.conv1_w, &self.weights.conv1_b);
            a1_s.mapv_inplace(|v| v.max(0.0));
            let mut a2_s = conv1d_forward(a1_s.view(), &self.weights.conv2_w, &self.weights.conv2_b);
            a2_s.mapv_inplace(|v| v.max(0.0));

            // Channel-major flatten followed by the dropout mask.
            let mask_row = noise.dropout.row(i);
            {
                let mut d = dropped.row_mut(i);
                let flat_view = a2_s
                    .view()
                    .into_shape_with_order(flat)
                    .expect("standard layout");
                for f in 0..flat {
                    d[f] = flat_view[f] * mask_row[f];
                }
            }
            let hidden_s = dense_forward(
                dropped.row(i),
                &self.weights.dense_w,
                &self.weights.dense_b,
            );
            let mut pred = self.weights.out_b[0];
            for u in 0..spec.dense_units {
                pred += hidden_s[u] * self.weights.out_w[u];
            }
            a1.index_axis_mut(Axis(0), i).assign(&a1_s);
            a2.index_axis_mut(Axis(0), i).assign(&a2_s);
            hidden.row_mut(i).assign(&hidden_s);
            preds[i] = pred;
        }

        let cache = Cache {
            version: self.version,
            x_noisy,
            a1,
            a2,
            mask: noise.dropout.clone(),
            dropped,
            hidden,
            preds: preds.clone(),
        };
        Ok((preds, cache))
    }

    /// Inference-mode forward pass: no noise, no dropout. Each sample is
    /// processed independently, so predictions cannot depend on how the
    /// inputs are batched.
    pub fn forward_infer(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check_input(&x)?;
        let spec = &self.spec;
        let flat = spec.flat_len();
        let mut preds = Array1::zeros(x.nrows());
        for i in 0..x.nrows() {
            let row = x.row(i);
            let xin = row.insert_axis(Axis(0));
            let mut a1_s = conv1d_forward(xin, &self.weights.conv1_w, &self.weights.conv1_b);
            a1_s.mapv_inplace(|v| v.max(0.0));
            let mut a2_s = conv1d_forward(a1_s.view(), &self.weights.conv2_w, &self.weights.conv2_b);
            a2_s.mapv_inplace(|v| v.max(0.0));
            let flat_s = a2_s
                .into_shape_with_order(flat)
                .expect("standard layout");
            let hidden_s = dense_forward(flat_s.view(), &self.weights.dense_w, &self.weights.dense_b);
            let mut pred = self.weights.out_b[0];
            for u in 0..spec.dense_units {
                pred += hidden_s[u] * self.weights.out_w[u];
            }
            preds[i] = pred;
        }
        Ok(preds)
    }

    /// Post-activation maps of both convolution layers for one spectrum in
    /// inference mode (no noise, no dropout): `(kernels1 x len1, kernels2 x
    /// len2)`.
    pub fn activations_one(&self, row: ArrayView1<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if row.len() != self.spec.input_len {
            return Err(Error::InputLengthMismatch {
                got: row.len(),
                expected: self.spec.input_len,
            });
        }
        let xin = row.insert_axis(Axis(0));
        let mut a1 = conv1d_forward(xin, &self.weights.conv1_w, &self.weights.conv1_b);
        a1.mapv_inplace(|v| v.max(0.0));
        let mut a2 = conv1d_forward(a1.view(), &self.weights.conv2_w, &self.weights.conv2_b);
        a2.mapv_inplace(|v| v.max(0.0));
        Ok((a1, a2))
    }

    /// Predict drug content in milligrams for every sample of a set.
    pub fn predict(&self, set: &SpectraSet) -> Result<Array1<f64>> {
        if set.grid().count() != self.spec.input_len {
            return Err(Error::InputLengthMismatch {
                got: set.grid().count(),
                expected: self.spec.input_len,
            });
        }
        self.forward_infer(set.absorbance().view())
    }

    /// Batch backward pass for the mean Huber loss of the cached forward
    /// pass against `targets`. Gradients are averaged over the batch.
    pub fn backward(
        &self,
        cache: &Cache,
        targets: ArrayView1<f64>,
        huber_delta: f64,
    ) -> Result<Gradients> {
        if cache.version != self.version {
            return Err(Error::StaleCache);
        }
        if !(huber_delta.is_finite() && huber_delta > 0.0) {
            return Err(Error::InvalidConfig {
                msg: format!("huber delta must be positive, got {huber_delta}"),
            });
        }
        let b = cache.preds.len();
        if targets.len() != b {
            return Err(Error::LengthMismatch {
                left: "cached predictions",
                left_len: b,
                right: "targets",
                right_len: targets.len(),
            });
        }
        let spec = &self.spec;
        let (k1, l1) = (spec.kernels1, spec.len1());
        let (k2, l2) = (spec.kernels2, spec.len2());
        let flat = spec.flat_len();
        let inv_b = 1.0 / b as f64;

        let mut g = Tensors::zeros(spec);
        let mut dhidden = Array1::zeros(spec.dense_units);
        let mut dflat = Array1::zeros(flat);
        let mut dz2 = Array2::zeros((k2, l2));
        let mut da1 = Array2::zeros((k1, l1));
        let mut dz1 = Array2::zeros((k1, l1));

        for i in 0..b {
            let dpred = huber_grad(cache.preds[i] - targets[i], huber_delta) * inv_b;
            if dpred == 0.0 {
                continue;
            }

            // Output layer.
            g.out_b[0] += dpred;
            let hidden_i = cache.hidden.row(i);
            for u in 0..spec.dense_units {
                g.out_w[u] += dpred * hidden_i[u];
                dhidden[u] = dpred * self.weights.out_w[u];
            }

            // Dense layer.
            dflat.fill(0.0);
            dense_backward_acc(
                cache.dropped.row(i),
                &self.weights.dense_w,
                dhidden.view(),
                &mut g.dense_w,
                &mut g.dense_b,
                &mut dflat,
            );

            // Dropout, un-flatten, and the second ReLU.
            let mask_i = cache.mask.row(i);
            let a2_i = cache.a2.index_axis(Axis(0), i);
            for c in 0..k2 {
                for t in 0..l2 {
                    let f = c * l2 + t;
                    dz2[[c, t]] = if a2_i[[c, t]] > 0.0 {
                        dflat[f] * mask_i[f]
                    } else {
                        0.0
                    };
                }
            }

            // Second convolution.
            let a1_i = cache.a1.index_axis(Axis(0), i);
            da1.fill(0.0);
            conv1d_backward_acc(
                a1_i,
                &self.weights.conv2_w,
                dz2.view(),
                &mut g.conv2_w,
                &mut g.conv2_b,
                Some(&mut da1),
            );

            // First ReLU and first convolution; the input gradient is not
            // needed because nothing precedes this layer.
            for c in 0..k1 {
                for t in 0..l1 {
                    dz1[[c, t]] = if a1_i[[c, t]] > 0.0 { da1[[c, t]] } else { 0.0 };
                }
            }
            let x_i = cache.x_noisy.row(i);
            conv1d_backward_acc(
                x_i.insert_axis(Axis(0)),
                &self.weights.conv1_w,
                dz1.view(),
                &mut g.conv1_w,
                &mut g.conv1_b,
                None,
            );
        }
        Ok(Gradients { t: g })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::loss::huber;
    use approx::assert_abs_diff_eq;

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

    fn random_batch(seed: u64, b: usize, n: usize) -> (Array2<f64>, Array1<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((b, n), |_| rng.random_range(-1.0..1.0));
        let y = Array1::from_shape_fn(b, |_| rng.random_range(-0.5..0.5));
        (x, y)
    }

    #[test]
    fn init_is_seed_deterministic_with_zero_biases_and_bounded_weights() {
        let a = CnnModel::new(tiny_spec(), 3).unwrap();
        let b = CnnModel::new(tiny_spec(), 3).unwrap();
        let c = CnnModel::new(tiny_spec(), 4).unwrap();
        for i in 0..a.n_params() {
            assert_eq!(a.param(i), b.param(i));
        }
        assert!((0..a.n_params()).any(|i| a.param(i) != c.param(i)));

        let w = a.weights();
        for v in &w.conv1_b {
            assert_eq!(*v, 0.0);
        }
        for v in &w.dense_b {
            assert_eq!(*v, 0.0);
        }
        assert_eq!(w.out_b[0], 0.0);
        let lim1 = (6.0 / (3 + 2 * 3) as f64).sqrt();
        assert!(w.conv1_w.iter().all(|v| v.abs() < lim1));
        let lim_d = (6.0 / (a.spec().flat_len() + 3) as f64).sqrt();
        assert!(w.dense_w.iter().all(|v| v.abs() < lim_d));
    }

    #[test]
    fn infer_is_deterministic_and_batch_independent() {
        let model = CnnModel::new(tiny_spec(), 9).unwrap();
        let (x, _) = random_batch(1, 7, 12);
        let all = model.forward_infer(x.view()).unwrap();
        let again = model.forward_infer(x.view()).unwrap();
        assert_eq!(all, again);
        for i in 0..7 {
            let single = model
                .forward_infer(x.slice(ndarray::s![i..i + 1, ..]))
                .unwrap();
            assert_eq!(single[0], all[i]);
        }
    }

    #[test]
    fn train_mode_without_noise_or_dropout_matches_infer_exactly() {
        let mut model = CnnModel::new(tiny_spec(), 9).unwrap();
        let (x, _) = random_batch(2, 5, 12);
        let noise = model.draw_noise(5);
        assert!(noise.input.iter().all(|v| *v == 0.0));
        assert!(noise.dropout.iter().all(|v| *v == 1.0));
        let (train_preds, _) = model.forward_train(x.view(), &noise).unwrap();
        let infer_preds = model.forward_infer(x.view()).unwrap();
        assert_eq!(train_preds, infer_preds);
    }

    #[test]
    fn noise_draws_advance_the_generator() {
        let mut spec = tiny_spec();
        spec.noise_std = 0.05;
        spec.dropout_rate = 0.4;
        let mut model = CnnModel::new(spec, 1).unwrap();
        let first = model.draw_noise(3);
        let second = model.draw_noise(3);
        assert_ne!(first.input, second.input);
        assert_ne!(first.dropout, second.dropout);
        assert!(first.dropout.iter().all(|v| *v == 0.0 || (*v - 1.0 / 0.6).abs() < 1e-15));
    }

    #[test]
    fn dropout_keeps_expected_activation_scale() {
        let mut spec = tiny_spec();
        spec.dropout_rate = 0.3;
        let mut model = CnnModel::new(spec, 5).unwrap();
        let (x, _) = random_batch(3, 1, 12);
        let infer = model.forward_infer(x.view()).unwrap()[0];

        // Inverted dropout is unbiased: averaging training-mode outputs over
        // many masks must approach the inference output. The output is
        // linear in the masked activations, so the sample mean concentrates.
        let n = 4000;
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let noise = model.draw_noise(1);
            let (p, _) = model.forward_train(x.view(), &noise).unwrap();
            vals.push(p[0]);
        }
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - infer).abs() < 5.0 * se.max(1e-12),
            "dropout mean {mean} vs inference {infer} (se {se})"
        );
    }

    #[test]
    fn stale_cache_is_rejected_after_weight_mutation() {
        let mut model = CnnModel::new(tiny_spec(), 2).unwrap();
        let (x, y) = random_batch(4, 3, 12);
        let noise = model.draw_noise(3);
        let (_, cache) = model.forward_train(x.view(), &noise).unwrap();
        model.set_param(0, 0.5).unwrap();
        let err = model.backward(&cache, y.view(), 1.0).unwrap_err();
        assert!(matches!(err, Error::StaleCache));
    }

    #[test]
    fn input_length_mismatch_is_reported() {
        let model = CnnModel::new(tiny_spec(), 2).unwrap();
        let (x, _) = random_batch(4, 3, 11);
        let err = model.forward_infer(x.view()).unwrap_err();
        assert!(matches!(
            err,
            Error::InputLengthMismatch {
                got: 11,
                expected: 12
            }
        ));
    }

    #[test]
    fn target_length_mismatch_is_reported() {
        let mut model = CnnModel::new(tiny_spec(), 2).unwrap();
        let (x, _) = random_batch(4, 3, 12);
        let noise = model.draw_noise(3);
        let (_, cache) = model.forward_train(x.view(), &noise).unwrap();
        let bad = Array1::zeros(2);
        assert!(model.backward(&cache, bad.view(), 1.0).is_err());
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
    }

    /// Smallest |pre-activation| over both convolution layers for the given
    /// batch and noise: the distance to the nearest ReLU kink. The forward
    /// pass is replayed layer by layer because the cache only keeps
    /// post-ReLU values, which hide pre-activations just below zero.
    fn kink_distance(model: &CnnModel, x: &Array2<f64>, noise: &TrainNoise) -> f64 {
        let w = model.weights();
        let mut min_abs = f64::INFINITY;
        let x_noisy = x + &noise.input;
        for i in 0..x.nrows() {
            let row = x_noisy.row(i);
            let z1 = conv1d_forward(row.insert_axis(Axis(0)), &w.conv1_w, &w.conv1_b);
            for v in &z1 {
                min_abs = min_abs.min(v.abs());
            }
            let a1 = z1.mapv(|v| v.max(0.0));
            let z2 = conv1d_forward(a1.view(), &w.conv2_w, &w.conv2_b);
            for v in &z2 {
                min_abs = min_abs.min(v.abs());
            }
        }
        min_abs
    }

    /// Full-model gradient check. The seed is scanned until the forward pass
    /// is safely away from every non-smooth point (ReLU kinks and the Huber
    /// elbow), so central differences see a locally smooth objective.
    fn gradient_check(spec: CnnSpec, b: usize) {
        let margin = 1e-3;
        let h = 1e-5;
        'seeds: for seed in 0..64u64 {
            let mut model = CnnModel::new(spec.clone(), seed).unwrap();
            let (x, y) = random_batch(seed.wrapping_add(100), b, spec.input_len);
            let noise = model.draw_noise(b);
            let (preds, cache) = model.forward_train(x.view(), &noise).unwrap();

            let near_kink = kink_distance(&model, &x, &noise) < margin;
            let near_elbow = preds
                .iter()
                .zip(y.iter())
                .any(|(p, t)| ((p - t).abs() - 1.0).abs() < margin);
            if near_kink || near_elbow {
                continue 'seeds;
            }

            let grads = model.backward(&cache, y.view(), 1.0).unwrap();
            let loss_at = |m: &CnnModel| {
                let (p, _) = m.forward_train(x.view(), &noise).unwrap();
                let residuals: Vec<f64> =
                    p.iter().zip(y.iter()).map(|(a, b)| a - b).collect();
                huber(&residuals, 1.0).unwrap()
            };
            for i in 0..model.n_params() {
                let orig = model.param(i).unwrap();
                model.set_param(i, orig + h).unwrap();
                let up = loss_at(&model);
                model.set_param(i, orig - h).unwrap();
                let down = loss_at(&model);
                model.set_param(i, orig).unwrap();
                let fd = (up - down) / (2.0 * h);
                let ana = grads.param(i).unwrap();
                assert!(
                    rel_err(fd, ana) < 1e-4,
                    "param {i}: finite difference {fd} vs analytic {ana} (seed {seed})"
                );
            }
            return;
        }
        panic!("no seed produced a kink-free forward pass");
    }

    #[test]
    fn gradients_match_finite_differences_plain() {
        gradient_check(tiny_spec(), 3);
    }

    #[test]
    fn gradients_match_finite_differences_with_noise_and_dropout() {
        let mut spec = tiny_spec();
        spec.noise_std = 0.05;
        spec.dropout_rate = 0.35;
        gradient_check(spec, 4);
    }

    #[test]
    fn gradients_match_finite_differences_outside_huber_elbow() {
        // Large targets push every residual into the linear branch.
        let spec = tiny_spec();
        let margin = 1e-3;
        let h = 1e-5;
        let (mut model, x, y, noise) = (0..64u64)
            .find_map(|seed| {
                let mut model = CnnModel::new(spec.clone(), seed).unwrap();
                let (x, mut y) = random_batch(seed.wrapping_add(200), 3, spec.input_len);
                y.mapv_inplace(|v| v + 25.0);
                let noise = model.draw_noise(3);
                (kink_distance(&model, &x, &noise) >= margin).then_some((model, x, y, noise))
            })
            .expect("some seed is kink-free");
        let (_, cache) = model.forward_train(x.view(), &noise).unwrap();
        let grads = model.backward(&cache, y.view(), 1.0).unwrap();
        let loss_at = |m: &CnnModel| {
            let (p, _) = m.forward_train(x.view(), &noise).unwrap();
            let residuals: Vec<f64> = p.iter().zip(y.iter()).map(|(a, b)| a - b).collect();
            huber(&residuals, 1.0).unwrap()
        };
        for i in (0..model.n_params()).step_by(7) {
            let orig = model.param(i).unwrap();
            model.set_param(i, orig + h).unwrap();
            let up = loss_at(&model);
            model.set_param(i, orig - h).unwrap();
            let down = loss_at(&model);
            model.set_param(i, orig).unwrap();
            let fd = (up - down) / (2.0 * h);
            let ana = grads.param(i).unwrap();
            // The loss sits near 25 here, so the finite difference carries
            // an absolute noise floor of about |loss| * eps / h ~ 1e-10;
            // tiny gradients need an absolute tolerance.
            assert!(
                rel_err(fd, ana) < 1e-4 || (fd - ana).abs() < 1e-8,
                "param {i}: finite difference {fd} vs analytic {ana}"
            );
        }
    }

    #[test]
    fn backward_zero_residuals_give_zero_gradients() {
        let mut model = CnnModel::new(tiny_spec(), 2).unwrap();
        let (x, _) = random_batch(4, 3, 12);
        let noise = model.draw_noise(3);
        let (preds, cache) = model.forward_train(x.view(), &noise).unwrap();
        let grads = model.backward(&cache, preds.view(), 1.0).unwrap();
        for i in 0..grads.n_params() {
            assert_eq!(grads.param(i), Some(0.0));
        }
    }

    #[test]
    fn predict_checks_grid_length_against_input_len() {
        use crate::dataset::{Instrument, SpectraSet, WavelengthGrid};
        let model = CnnModel::new(tiny_spec(), 2).unwrap();
        let grid = WavelengthGrid::new(1000.0, 2.0, 10).unwrap();
        let set = SpectraSet::new(
            grid,
            Array2::zeros((2, 10)),
            Array1::from(vec![200.0, 210.0]),
            vec![Instrument::One, Instrument::One],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let err = model.predict(&set).unwrap_err();
        assert!(matches!(
            err,
            Error::InputLengthMismatch {
                got: 10,
                expected: 12
            }
        ));
    }

    #[test]
    fn version_counter_tracks_mutations() {
        let mut model = CnnModel::new(tiny_spec(), 2).unwrap();
        assert_eq!(model.version(), 0);
        model.set_param(0, 1.0).unwrap();
        assert_eq!(model.version(), 1);
        model.apply_update(|w| w.out_b[0] = 2.0);
        assert_eq!(model.version(), 2);
    }

    #[test]
    fn flattening_is_channel_major() {
        // One kernel pair picked so channel 0 and channel 1 of the second
        // convolution produce distinguishable values; a dense layer that
        // reads only flat index len2 (the first unit of channel 1) must see
        // channel 1's first output.
        let spec = CnnSpec {
            input_len: 5,
            kernels1: 1,
            filter_len1: 1,
            kernels2: 2,
            filter_len2: 1,
            dropout_rate: 0.0,
            dense_units: 1,
            noise_std: 0.0,
        };
        let mut model = CnnModel::new(spec.clone(), 0).unwrap();
        let n = model.n_params();
        for i in 0..n {
            model.set_param(i, 0.0).unwrap();
        }
        // conv1: identity (weight 1, bias 0) -> a1 = x.
        model.set_param(0, 1.0).unwrap();
        // conv2: channel 0 weight 0, channel 1 weight 2 -> a2[1, t] = 2 x[t].
        // Parameter order: conv1_w (1), conv1_b (1), conv2_w (2), conv2_b (2),
        // dense_w (2 * 5 = 10), dense_b (1), out_w (1), out_b (1).
        model.set_param(3, 2.0).unwrap();
        // dense reads flat index 5 = first entry of channel 1.
        model.set_param(6 + 5, 1.0).unwrap();
        // output passes the hidden unit through.
        model.set_param(6 + 10 + 1, 1.0).unwrap();
        let x = ndarray::arr2(&[[3.0, 0.0, 0.0, 0.0, 0.0]]);
        let out = model.forward_infer(x.view()).unwrap();
        assert_abs_diff_eq!(out[0], 6.0, epsilon = 1e-15);
    }
}
