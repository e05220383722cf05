use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::layers::Activation;
use crate::error::{HintError, Result};

/// Tensor shapes of one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Window side length.
    pub w: usize,
    pub n_st: usize,
    pub n_s: usize,
    pub n_t: usize,
    /// Graph-convolution width.
    pub h: usize,
    /// LSTM input width.
    pub m: usize,
    /// LSTM hidden width.
    pub h_l: usize,
    /// Spatial embedding width.
    pub s_d: usize,
    /// Hidden-layer activation.
    #[serde(default)]
    pub activation: Activation,
}

impl ModelDims {
    pub fn w2(&self) -> usize {
        self.w * self.w
    }

    pub fn fc_in_inputs(&self) -> usize {
        self.w2() * self.h + self.n_t
    }
}

/// Every learnable tensor. Dense weights are stored `[out, in]`; LSTM gate
/// blocks are stacked in the order input, forget, output, candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    /// `[n_st, h]`
    pub gc_st_1: Array2<f64>,
    /// `[h, h]`
    pub gc_st_2: Array2<f64>,
    /// `[n_s, h]`
    pub gc_spatial: Array2<f64>,
    /// `[m, w^2 h + n_t]`
    pub fc_in_w: Array2<f64>,
    pub fc_in_b: Array1<f64>,
    /// `[4 h_l, m]`
    pub lstm_w: Array2<f64>,
    /// `[4 h_l, h_l]`
    pub lstm_u: Array2<f64>,
    pub lstm_b: Array1<f64>,
    /// `[s_d, w^2 h]`
    pub fc_spatial_w: Array2<f64>,
    pub fc_spatial_b: Array1<f64>,
    /// `[1, h_l + s_d]`
    pub fc_out_w: Array2<f64>,
    pub fc_out_b: Array1<f64>,
}

pub const TENSOR_NAMES: [&str; 12] = [
    "gc_st_1",
    "gc_st_2",
    "gc_spatial",
    "fc_in_w",
    "fc_in_b",
    "lstm_w",
    "lstm_u",
    "lstm_b",
    "fc_spatial_w",
    "fc_spatial_b",
    "fc_out_w",
    "fc_out_b",
];

/// Tensors of the output head.
pub const HEAD_TENSORS: [&str; 2] = ["fc_out_w", "fc_out_b"];

fn glorot(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let d = dims;
        ModelParams {
            dims,
            gc_st_1: Array2::zeros((d.n_st, d.h)),
            gc_st_2: Array2::zeros((d.h, d.h)),
            gc_spatial: Array2::zeros((d.n_s, d.h)),
            fc_in_w: Array2::zeros((d.m, d.fc_in_inputs())),
            fc_in_b: Array1::zeros(d.m),
            lstm_w: Array2::zeros((4 * d.h_l, d.m)),
            lstm_u: Array2::zeros((4 * d.h_l, d.h_l)),
            lstm_b: Array1::zeros(4 * d.h_l),
            fc_spatial_w: Array2::zeros((d.s_d, d.w2() * d.h)),
            fc_spatial_b: Array1::zeros(d.s_d),
            fc_out_w: Array2::zeros((1, d.h_l + d.s_d)),
            fc_out_b: Array1::zeros(1),
        }
    }

    /// Glorot-uniform weights, zero biases, forget-gate bias 1.
    pub fn init(dims: ModelDims, rng: &mut impl Rng) -> Self {
        let d = dims;
        let mut p = ModelParams::zeros(dims);
        p.gc_st_1 = glorot(rng, d.n_st, d.h, d.n_st, d.h);
        p.gc_st_2 = glorot(rng, d.h, d.h, d.h, d.h);
        p.gc_spatial = glorot(rng, d.n_s, d.h, d.n_s, d.h);
        p.fc_in_w = glorot(rng, d.m, d.fc_in_inputs(), d.fc_in_inputs(), d.m);
        p.lstm_w = glorot(rng, 4 * d.h_l, d.m, d.m, 4 * d.h_l);
        p.lstm_u = glorot(rng, 4 * d.h_l, d.h_l, d.h_l, 4 * d.h_l);
        p.lstm_b.slice_mut(ndarray::s![d.h_l..2 * d.h_l]).fill(1.0);
        p.fc_spatial_w = glorot(rng, d.s_d, d.w2() * d.h, d.w2() * d.h, d.s_d);
        p.fc_out_w = glorot(rng, 1, d.h_l + d.s_d, d.h_l + d.s_d, 1);
        p
    }

    pub fn tensors(&self) -> [(&'static str, &[f64]); 12] {
        fn s(a: Option<&[f64]>) -> &[f64] {
            a.expect("parameters are contiguous")
        }
        [
            (TENSOR_NAMES[0], s(self.gc_st_1.as_slice())),
            (TENSOR_NAMES[1], s(self.gc_st_2.as_slice())),
            (TENSOR_NAMES[2], s(self.gc_spatial.as_slice())),
            (TENSOR_NAMES[3], s(self.fc_in_w.as_slice())),
            (TENSOR_NAMES[4], s(self.fc_in_b.as_slice())),
            (TENSOR_NAMES[5], s(self.lstm_w.as_slice())),
            (TENSOR_NAMES[6], s(self.lstm_u.as_slice())),
            (TENSOR_NAMES[7], s(self.lstm_b.as_slice())),
            (TENSOR_NAMES[8], s(self.fc_spatial_w.as_slice())),
            (TENSOR_NAMES[9], s(self.fc_spatial_b.as_slice())),
            (TENSOR_NAMES[10], s(self.fc_out_w.as_slice())),
            (TENSOR_NAMES[11], s(self.fc_out_b.as_slice())),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 12] {
        fn s(a: Option<&mut [f64]>) -> &mut [f64] {
            a.expect("parameters are contiguous")
        }
        [
            (TENSOR_NAMES[0], s(self.gc_st_1.as_slice_mut())),
            (TENSOR_NAMES[1], s(self.gc_st_2.as_slice_mut())),
            (TENSOR_NAMES[2], s(self.gc_spatial.as_slice_mut())),
            (TENSOR_NAMES[3], s(self.fc_in_w.as_slice_mut())),
            (TENSOR_NAMES[4], s(self.fc_in_b.as_slice_mut())),
            (TENSOR_NAMES[5], s(self.lstm_w.as_slice_mut())),
            (TENSOR_NAMES[6], s(self.lstm_u.as_slice_mut())),
            (TENSOR_NAMES[7], s(self.lstm_b.as_slice_mut())),
            (TENSOR_NAMES[8], s(self.fc_spatial_w.as_slice_mut())),
            (TENSOR_NAMES[9], s(self.fc_spatial_b.as_slice_mut())),
            (TENSOR_NAMES[10], s(self.fc_out_w.as_slice_mut())),
            (TENSOR_NAMES[11], s(self.fc_out_b.as_slice_mut())),
        ]
    }

    pub fn shapes(&self) -> [Vec<usize>; 12] {
        [
            self.gc_st_1.shape().to_vec(),
            self.gc_st_2.shape().to_vec(),
            self.gc_spatial.shape().to_vec(),
            self.fc_in_w.shape().to_vec(),
            self.fc_in_b.shape().to_vec(),
            self.lstm_w.shape().to_vec(),
            self.lstm_u.shape().to_vec(),
            self.lstm_b.shape().to_vec(),
            self.fc_spatial_w.shape().to_vec(),
            self.fc_spatial_b.shape().to_vec(),
            self.fc_out_w.shape().to_vec(),
            self.fc_out_b.shape().to_vec(),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.1.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.1.iter().all(|v| v.is_finite()))
    }

    /// Rebuilds parameters from named flat tensors, checking every shape.
    pub fn from_tensors(dims: ModelDims, tensors: &[(String, Vec<f64>)]) -> Result<Self> {
        let mut p = ModelParams::zeros(dims);
        if tensors.len() != TENSOR_NAMES.len() {
            return Err(HintError::InvalidInput(format!("expected 12 tensors, got {}", tensors.len())));
        }
        for ((name, dst), (src_name, src)) in p.tensors_mut().into_iter().zip(tensors) {
            if name != src_name {
                return Err(HintError::InvalidInput(format!("expected tensor {name}, found {src_name}")));
            }
            if dst.len() != src.len() {
                return Err(HintError::Shape {
                    layer: name,
                    detail: format!("{} values, expected {}", src.len(), dst.len()),
                });
            }
            dst.copy_from_slice(src);
        }
        Ok(p)
    }

    /// Bitwise equality of every tensor.
    pub fn bit_identical(&self, other: &ModelParams) -> bool {
        self.dims == other.dims
            && self
                .tensors()
                .iter()
                .zip(other.tensors().iter())
                .all(|(a, b)| a.1.len() == b.1.len() && a.1.iter().zip(b.1).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ModelDims {
        ModelDims { w: 5, n_st: 13, n_s: 29, n_t: 5, h: 16, m: 16, h_l: 32, s_d: 16, activation: Activation::Relu }
    }

    #[test]
    fn init_respects_glorot_limits_and_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ModelParams::init(dims(), &mut rng);
        let lim = (6.0f64 / 29.0).sqrt();
        assert!(p.gc_st_1.iter().all(|v| v.abs() <= lim));
        assert!(p.fc_in_b.iter().all(|&v| v == 0.0));
        assert_eq!(p.lstm_b.iter().filter(|&&v| v == 1.0).count(), 32);
        assert!(p.lstm_b.slice(ndarray::s![32..64]).iter().all(|&v| v == 1.0));
        assert!(p.is_finite());
    }

    #[test]
    fn parameter_count_matches_shapes() {
        let p = ModelParams::zeros(dims());
        let d = dims();
        let expected = 13 * 16 + 16 * 16 + 29 * 16 + 16 * (25 * 16 + 5) + 16 + 128 * 16 + 128 * 32 + 128 + 16 * 400 + 16 + 48 + 1;
        assert_eq!(p.n_params(), expected);
        assert_eq!(d.fc_in_inputs(), 405);
    }

    #[test]
    fn from_tensors_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ModelParams::init(dims(), &mut rng);
        let flat: Vec<(String, Vec<f64>)> = p.tensors().iter().map(|(n, v)| (n.to_string(), v.to_vec())).collect();
        assert!(ModelParams::from_tensors(dims(), &flat).unwrap().bit_identical(&p));
        let mut bad = flat.clone();
        bad[3].1.pop();
        assert!(ModelParams::from_tensors(dims(), &bad).is_err());
    }
}
