//! Single-sample layer primitives: valid cross-correlation and dense affine
//! maps, each with a matching backward pass. Backward passes accumulate into
//! caller-owned gradient tensors so a batch loop can reuse one set of
//! accumulators instead of allocating per sample. Every backward pass is
//! checked against central finite differences in isolation.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};

/// Valid 1-D cross-correlation, stride 1, no padding.
/// `input` is (channels_in, len_in), `w` is (channels_out, channels_in, f),
/// output is (channels_out, len_in - f + 1):
/// `out[o, t] = b[o] + sum_c sum_j w[o, c, j] * input[c, t + j]`.
pub(crate) fn conv1d_forward(
    input: ArrayView2<f64>,
    w: &Array3<f64>,
    b: &Array1<f64>,
) -> Array2<f64> {
    let (c_out, c_in, f) = w.dim();
    let (ic, len_in) = input.dim();
    debug_assert_eq!(c_in, ic);
    debug_assert!(len_in >= f);
    let len_out = len_in - f + 1;
    let mut out = Array2::zeros((c_out, len_out));
    for o in 0..c_out {
        let bias = b[o];
        for c in 0..c_in {
            let row = input.row(c);
            let row = row.as_slice().expect("contiguous input row");
            let k = w.slice(ndarray::s![o, c, ..]);
            let k = k.as_slice().expect("contiguous kernel");
            for t in 0..len_out {
                let window = &row[t..t + f];
                let mut acc = 0.0;
                for (wj, xj) in k.iter().zip(window) {
                    acc += wj * xj;
                }
                out[[o, t]] += acc;
            }
        }
        for t in 0..len_out {
            out[[o, t]] += bias;
        }
    }
    out
}

/// Backward pass of [`conv1d_forward`]: given the upstream gradient `dz`
/// (same shape as the forward output), add this sample's contributions to
/// `dw` and `db`, and to `dinput` when the caller needs it for an earlier
/// layer. All accumulators must have the matching forward shapes.
pub(crate) fn conv1d_backward_acc(
    input: ArrayView2<f64>,
    w: &Array3<f64>,
    dz: ArrayView2<f64>,
    dw: &mut Array3<f64>,
    db: &mut Array1<f64>,
    mut dinput: Option<&mut Array2<f64>>,
) {
    let (c_out, c_in, f) = w.dim();
    let (_, len_in) = input.dim();
    let (_, len_out) = dz.dim();
    debug_assert_eq!(len_out, len_in - f + 1);
    debug_assert_eq!(dw.dim(), w.dim());

    for o in 0..c_out {
        let dz_row = dz.row(o);
        let dz_row = dz_row.as_slice().expect("contiguous grad row");
        db[o] += dz_row.iter().sum::<f64>();
        for c in 0..c_in {
            let x_row = input.row(c);
            let x_row = x_row.as_slice().expect("contiguous input row");
            for j in 0..f {
                let mut acc = 0.0;
                for t in 0..len_out {
                    acc += dz_row[t] * x_row[t + j];
                }
                dw[[o, c, j]] += acc;
            }
            if let Some(di) = dinput.as_deref_mut() {
                let k = w.slice(ndarray::s![o, c, ..]);
                let k = k.as_slice().expect("contiguous kernel");
                for t in 0..len_out {
                    let g = dz_row[t];
                    if g == 0.0 {
                        continue;
                    }
                    for j in 0..f {
                        di[[c, t + j]] += g * k[j];
                    }
                }
            }
        }
    }
}

/// Dense affine map: `out[u] = b[u] + sum_f input[f] * w[f, u]`.
pub(crate) fn dense_forward(
    input: ArrayView1<f64>,
    w: &Array2<f64>,
    b: &Array1<f64>,
) -> Array1<f64> {
    let (n_in, n_out) = w.dim();
    debug_assert_eq!(input.len(), n_in);
    let mut out = b.clone();
    {
        let out = out.as_slice_mut().expect("contiguous output");
        for f in 0..n_in {
            let x = input[f];
            if x == 0.0 {
                continue;
            }
            let w_row = w.row(f);
            let w_row = w_row.as_slice().expect("contiguous weight row");
            for u in 0..n_out {
                out[u] += x * w_row[u];
            }
        }
    }
    out
}

/// Backward pass of [`dense_forward`], accumulating into `dw`, `db`, and
/// `dinput`. Rows whose input is exactly zero contribute nothing to `dw`
/// and are skipped there, but `dinput` does not depend on the input value
/// and is always accumulated in full.
pub(crate) fn dense_backward_acc(
    input: ArrayView1<f64>,
    w: &Array2<f64>,
    dz: ArrayView1<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array1<f64>,
    dinput: &mut Array1<f64>,
) {
    let (n_in, n_out) = w.dim();
    debug_assert_eq!(input.len(), n_in);
    debug_assert_eq!(dz.len(), n_out);
    for u in 0..n_out {
        db[u] += dz[u];
    }
    for f in 0..n_in {
        let x = input[f];
        let w_row = w.row(f);
        let w_row = w_row.as_slice().expect("contiguous weight row");
        let mut acc = 0.0;
        if x == 0.0 {
            for u in 0..n_out {
                acc += w_row[u] * dz[u];
            }
        } else {
            let dw_row = dw.row_mut(f);
            let dw_row = dw_row.into_slice().expect("contiguous grad row");
            for u in 0..n_out {
                dw_row[u] += x * dz[u];
                acc += w_row[u] * dz[u];
            }
        }
        dinput[f] += acc;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2, arr3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
    }

    #[test]
    fn conv_hand_example() {
        // [1, 2, 3] cross-correlated with [1, 1] -> [1+2, 2+3] = [3, 5].
        let input = arr2(&[[1.0, 2.0, 3.0]]);
        let w = arr3(&[[[1.0, 1.0]]]);
        let b = arr1(&[0.0]);
        let out = conv1d_forward(input.view(), &w, &b);
        assert_eq!(out, arr2(&[[3.0, 5.0]]));
    }

    #[test]
    fn conv_is_cross_correlation_not_convolution() {
        // An asymmetric kernel distinguishes the two: flipping it would
        // give [4, 7] instead.
        let input = arr2(&[[1.0, 2.0, 3.0]]);
        let w = arr3(&[[[1.0, 2.0]]]);
        let b = arr1(&[0.5]);
        let out = conv1d_forward(input.view(), &w, &b);
        assert_eq!(out, arr2(&[[5.5, 8.5]]));
    }

    #[test]
    fn conv_multichannel_shapes_and_values() {
        let input = arr2(&[[1.0, 0.0, -1.0, 2.0], [0.5, 0.5, 0.5, 0.5]]);
        let w = arr3(&[
            [[1.0, -1.0], [2.0, 0.0]],
            [[0.0, 1.0], [1.0, 1.0]],
            [[1.0, 1.0], [0.0, 0.0]],
        ]);
        let b = arr1(&[0.0, 1.0, -1.0]);
        let out = conv1d_forward(input.view(), &w, &b);
        assert_eq!(out.dim(), (3, 3));
        // Hand value for out[0, 0]: 1*1 + (-1)*0 + 2*0.5 + 0*0.5 = 2.
        assert_abs_diff_eq!(out[[0, 0]], 2.0, epsilon = 1e-15);
        // Hand value for out[1, 2]: 0*(-1) + 1*2 + 1*0.5 + 1*0.5 + 1 = 4.
        assert_abs_diff_eq!(out[[1, 2]], 4.0, epsilon = 1e-15);
    }

    /// Scalar objective for gradient checks: sum of squares of the layer
    /// output, whose upstream gradient is simply 2 * output.
    fn conv_loss(input: &Array2<f64>, w: &Array3<f64>, b: &Array1<f64>) -> f64 {
        conv1d_forward(input.view(), w, b)
            .iter()
            .map(|v| v * v)
            .sum()
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (c_out, c_in, f, len_in) = (3, 2, 4, 9);
        let input = Array2::from_shape_fn((c_in, len_in), |_| rng.random_range(-1.0..1.0));
        let w = Array3::from_shape_fn((c_out, c_in, f), |_| rng.random_range(-1.0..1.0));
        let b = Array1::from_shape_fn(c_out, |_| rng.random_range(-0.5..0.5));

        let z = conv1d_forward(input.view(), &w, &b);
        let dz = z.mapv(|v| 2.0 * v);
        let mut dw = Array3::zeros(w.dim());
        let mut db = Array1::zeros(c_out);
        let mut dinput = Array2::zeros(input.dim());
        conv1d_backward_acc(input.view(), &w, dz.view(), &mut dw, &mut db, Some(&mut dinput));

        let h = 1e-5;
        let mut wp = w.clone();
        for idx in [(0, 0, 0), (1, 1, 2), (2, 0, 3)] {
            let orig = wp[idx];
            wp[idx] = orig + h;
            let up = conv_loss(&input, &wp, &b);
            wp[idx] = orig - h;
            let down = conv_loss(&input, &wp, &b);
            wp[idx] = orig;
            assert!(rel_err((up - down) / (2.0 * h), dw[idx]) < 1e-6);
        }
        let mut bp = b.clone();
        for o in 0..c_out {
            let orig = bp[o];
            bp[o] = orig + h;
            let up = conv_loss(&input, &w, &bp);
            bp[o] = orig - h;
            let down = conv_loss(&input, &w, &bp);
            bp[o] = orig;
            assert!(rel_err((up - down) / (2.0 * h), db[o]) < 1e-6);
        }
        let mut xp = input.clone();
        for idx in [(0, 0), (1, 4), (0, 8)] {
            let orig = xp[idx];
            xp[idx] = orig + h;
            let up = conv_loss(&xp, &w, &b);
            xp[idx] = orig - h;
            let down = conv_loss(&xp, &w, &b);
            xp[idx] = orig;
            assert!(rel_err((up - down) / (2.0 * h), dinput[idx]) < 1e-6);
        }
    }

    #[test]
    fn conv_backward_accumulates_instead_of_overwriting() {
        let input = arr2(&[[1.0, 2.0, 3.0]]);
        let w = arr3(&[[[1.0, 1.0]]]);
        let dz = arr2(&[[1.0, 1.0]]);
        let mut dw = Array3::zeros((1, 1, 2));
        let mut db = arr1(&[0.0]);
        conv1d_backward_acc(input.view(), &w, dz.view(), &mut dw, &mut db, None);
        conv1d_backward_acc(input.view(), &w, dz.view(), &mut dw, &mut db, None);
        // Single pass gives dw = [1+2, 2+3] = [3, 5]; two passes double it.
        assert_eq!(dw, arr3(&[[[6.0, 10.0]]]));
        assert_eq!(db[0], 4.0);
    }

    fn dense_loss(input: &Array1<f64>, w: &Array2<f64>, b: &Array1<f64>) -> f64 {
        dense_forward(input.view(), w, b)
            .iter()
            .map(|v| v * v)
            .sum()
    }

    #[test]
    fn dense_hand_example() {
        let input = arr1(&[1.0, -2.0]);
        let w = arr2(&[[1.0, 0.0, 2.0], [3.0, 1.0, 0.0]]);
        let b = arr1(&[0.1, 0.2, 0.3]);
        let out = dense_forward(input.view(), &w, &b);
        // [1 - 6 + 0.1, 0 - 2 + 0.2, 2 - 0 + 0.3]
        assert_abs_diff_eq!(out[0], -4.9, epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], -1.8, epsilon = 1e-15);
        assert_abs_diff_eq!(out[2], 2.3, epsilon = 1e-15);
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n_in, n_out) = (6, 4);
        // A zero input entry exercises the skip path in both directions.
        let mut input = Array1::from_shape_fn(n_in, |_| rng.random_range(-1.0..1.0));
        input[2] = 0.0;
        let w = Array2::from_shape_fn((n_in, n_out), |_| rng.random_range(-1.0..1.0));
        let b = Array1::from_shape_fn(n_out, |_| rng.random_range(-0.5..0.5));

        let z = dense_forward(input.view(), &w, &b);
        let dz = z.mapv(|v| 2.0 * v);
        let mut dw = Array2::zeros(w.dim());
        let mut db = Array1::zeros(n_out);
        let mut dinput = Array1::zeros(n_in);
        dense_backward_acc(input.view(), &w, dz.view(), &mut dw, &mut db, &mut dinput);

        let h = 1e-5;
        for f in 0..n_in {
            for u in 0..n_out {
                let mut wp = w.clone();
                wp[[f, u]] += h;
                let up = dense_loss(&input, &wp, &b);
                wp[[f, u]] -= 2.0 * h;
                let down = dense_loss(&input, &wp, &b);
                let fd = (up - down) / (2.0 * h);
                assert!(rel_err(fd, dw[[f, u]]) < 1e-6 || (fd == 0.0 && dw[[f, u]] == 0.0));
            }
        }
        for u in 0..n_out {
            let mut bp = b.clone();
            bp[u] += h;
            let up = dense_loss(&input, &w, &bp);
            bp[u] -= 2.0 * h;
            let down = dense_loss(&input, &w, &bp);
            assert!(rel_err((up - down) / (2.0 * h), db[u]) < 1e-6);
        }
        for f in 0..n_in {
            let mut xp = input.clone();
            xp[f] += h;
            let up = dense_loss(&xp, &w, &b);
            xp[f] -= 2.0 * h;
            let down = dense_loss(&xp, &w, &b);
            assert!(rel_err((up - down) / (2.0 * h), dinput[f]) < 1e-6);
        }
    }

    #[test]
    fn dense_input_gradient_is_nonzero_even_for_zero_inputs() {
        // The weight gradient vanishes for a zeroed input, the input
        // gradient must not: a dropped unit still has upstream sensitivity.
        let input = arr1(&[0.0]);
        let w = arr2(&[[2.0]]);
        let dz = arr1(&[3.0]);
        let mut dw = Array2::zeros((1, 1));
        let mut db = arr1(&[0.0]);
        let mut dinput = arr1(&[0.0]);
        dense_backward_acc(input.view(), &w, dz.view(), &mut dw, &mut db, &mut dinput);
        assert_eq!(dw[[0, 0]], 0.0);
        assert_eq!(dinput[0], 6.0);
        assert_eq!(db[0], 3.0);
    }
}
