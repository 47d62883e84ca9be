//! Dense feature containers and the numeric kernel of the coarse matcher:
//! 4D correlation, soft mutual-nearest-neighbour filtering, the 4D
//! convolutional neighbourhood-consensus network, dual softmax, hard
//! assignment, and the weakly supervised objective with its gradients.

mod assign;
mod conv4d;
mod correlation;
mod features;
mod loss;

pub use assign::{dual_softmax, hard_assign, AssignmentProbabilities, CellMatch, CellMatchSet};
pub use conv4d::{
    conv4d_backward, conv4d_forward, neighborhood_consensus, ChannelTensor4, Conv4dModel,
    KernelBank, CHANNEL_CHAIN, KERNEL_TAPS,
};
pub use correlation::{cosine_correlation, soft_mutual_nn, soft_mutual_nn_backward, SOFT_MNN_EPS};
pub use features::DenseFeatureMap;
pub use loss::{
    loss_at_fixed_matches, loss_gradients, weak_supervision_loss, Label, LossGradients,
    LossOutcome, ModelGradients, TrainingPair,
};

use crate::error::{GeolocError, Result};

/// A dense `h_u × w_u × h_s × w_s` volume of match scores, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

/// Alias naming the role a [`Tensor4`] plays between the two images.
pub type CorrelationTensor4D = Tensor4;

impl Tensor4 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Tensor4 {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(GeolocError::Dimension(format!(
                "dims {dims:?} need {} values, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    for l in 0..dims[3] {
                        data.push(f([i, j, k, l]));
                    }
                }
            }
        }
        Tensor4 { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    /// Number of cells on the UAV side (`h_u * w_u`).
    pub fn uav_cells(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    /// Number of cells on the satellite side (`h_s * w_s`).
    pub fn sat_cells(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize, l: usize) -> usize {
        ((i * self.dims[1] + j) * self.dims[2] + k) * self.dims[3] + l
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.data[self.index(i, j, k, l)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, l: usize, v: f64) {
        let idx = self.index(i, j, k, l);
        self.data[idx] = v;
    }

    /// Swaps the UAV axes `(i, j)` with the satellite axes `(k, l)`.
    pub fn transposed(&self) -> Tensor4 {
        let [a, b, c, d] = self.dims;
        let (u, s) = (a * b, c * d);
        let mut out = vec![0.0; self.data.len()];
        for p in 0..u {
            for q in 0..s {
                out[q * u + p] = self.data[p * s + q];
            }
        }
        Tensor4 {
            dims: [c, d, a, b],
            data: out,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        assert_eq!(self.dims, other.dims, "tensor dims differ");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
