//! Weight-shaped tensor bundle shared by the model, its gradients, and the
//! optimizer accumulators.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use super::CnnSpec;

/// One tensor per trainable parameter group, in fixed declaration order.
/// That order defines flat parameter indexing and the on-disk layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Tensors {
    /// First convolution: (kernels1, 1, filter_len1).
    pub conv1_w: Array3<f64>,
    pub conv1_b: Array1<f64>,
    /// Second convolution: (kernels2, kernels1, filter_len2).
    pub conv2_w: Array3<f64>,
    pub conv2_b: Array1<f64>,
    /// Dense layer: (flat_len, dense_units).
    pub dense_w: Array2<f64>,
    pub dense_b: Array1<f64>,
    /// Output layer: (dense_units,) plus a single bias.
    pub out_w: Array1<f64>,
    pub out_b: Array1<f64>,
}

impl Tensors {
    pub fn zeros(spec: &CnnSpec) -> Self {
        Tensors {
            conv1_w: Array3::zeros((spec.kernels1, 1, spec.filter_len1)),
            conv1_b: Array1::zeros(spec.kernels1),
            conv2_w: Array3::zeros((spec.kernels2, spec.kernels1, spec.filter_len2)),
            conv2_b: Array1::zeros(spec.kernels2),
            dense_w: Array2::zeros((spec.flat_len(), spec.dense_units)),
            dense_b: Array1::zeros(spec.dense_units),
            out_w: Array1::zeros(spec.dense_units),
            out_b: Array1::zeros(1),
        }
    }

    /// Tensor names paired with their element counts, in declaration order.
    pub fn layout(&self) -> [(&'static str, usize); 8] {
        [
            ("conv1_w", self.conv1_w.len()),
            ("conv1_b", self.conv1_b.len()),
            ("conv2_w", self.conv2_w.len()),
            ("conv2_b", self.conv2_b.len()),
            ("dense_w", self.dense_w.len()),
            ("dense_b", self.dense_b.len()),
            ("out_w", self.out_w.len()),
            ("out_b", self.out_b.len()),
        ]
    }

    /// Immutable flat slices in declaration order. All tensors are freshly
    /// allocated in standard layout, so the slice views always exist.
    pub fn slices(&self) -> [&[f64]; 8] {
        [
            self.conv1_w.as_slice().expect("standard layout"),
            self.conv1_b.as_slice().expect("standard layout"),
            self.conv2_w.as_slice().expect("standard layout"),
            self.conv2_b.as_slice().expect("standard layout"),
            self.dense_w.as_slice().expect("standard layout"),
            self.dense_b.as_slice().expect("standard layout"),
            self.out_w.as_slice().expect("standard layout"),
            self.out_b.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.conv1_w.as_slice_mut().expect("standard layout"),
            self.conv1_b.as_slice_mut().expect("standard layout"),
            self.conv2_w.as_slice_mut().expect("standard layout"),
            self.conv2_b.as_slice_mut().expect("standard layout"),
            self.dense_w.as_slice_mut().expect("standard layout"),
            self.dense_b.as_slice_mut().expect("standard layout"),
            self.out_w.as_slice_mut().expect("standard layout"),
            self.out_b.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.layout().iter().map(|(_, n)| n).sum()
    }

    pub fn get_flat(&self, index: usize) -> Option<f64> {
        let mut i = index;
        for s in self.slices() {
            if i < s.len() {
                return Some(s[i]);
            }
            i -= s.len();
        }
        None
    }

    pub fn set_flat(&mut self, index: usize, value: f64) -> bool {
        let mut i = index;
        for s in self.slices_mut() {
            if i < s.len() {
                s[i] = value;
                return true;
            }
            i -= s.len();
        }
        false
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn same_shape(&self, other: &Tensors) -> bool {
        self.conv1_w.dim() == other.conv1_w.dim()
            && self.conv1_b.dim() == other.conv1_b.dim()
            && self.conv2_w.dim() == other.conv2_w.dim()
            && self.conv2_b.dim() == other.conv2_b.dim()
            && self.dense_w.dim() == other.dense_w.dim()
            && self.dense_b.dim() == other.dense_b.dim()
            && self.out_w.dim() == other.out_w.dim()
            && self.out_b.dim() == other.out_b.dim()
    }
}
