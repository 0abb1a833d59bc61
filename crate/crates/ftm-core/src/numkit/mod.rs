//! Minimal differentiable numeric core.
//!
//! Everything the two detector models are built from: dense tensors, the
//! handful of layer forward/backward pairs they need (softmax, layer norm,
//! multi-head self-attention, a GRU cell), the Adam optimizer with global
//! gradient clipping, and a central-difference gradient checker used by the
//! test suites. All math is f64; all functions are pure.

mod attention;
mod gradcheck;
mod gru;
mod ops;
mod optim;

pub use attention::{mhsa_backward, mhsa_forward, AttentionDims, MhsaCache, MhsaGrads, MhsaParams};
pub use gradcheck::finite_difference_check;
pub use gru::{gru_backward, gru_step, gru_step_with_cache, GruCache, GruDims, GruGrads, GruParams};
pub use ops::{
    add_outer_product, dropout_mask, layer_norm, layer_norm_backward, linear, linear_backward,
    masked_softmax, matmul_nn, matmul_nt, matmul_tn, relu, relu_backward, sigmoid, softmax,
    softmax_backward, LayerNormCache,
};
pub use optim::{adam_step, clip_global_norm, AdamHyper, AdamState};

use thiserror::Error;

/// Errors from the numeric core. Every fallible op names itself so that a
/// failure deep inside a model forward pass is attributable.
#[derive(Debug, Error)]
pub enum NumError {
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("{op}: length mismatch ({left} vs {right})")]
    LengthMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },
    #[error("{op}: shape {got:?} does not match expected {expected:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("attention: every key position is masked")]
    AllMasked,
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}

/// Dense row-major tensor. The shape product always equals the data length;
/// constructors enforce it so downstream code can index without checks.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumError::ShapeMismatch {
                op: "Tensor::new",
                expected: shape.clone(),
                got: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count for rank-2 tensors.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count for rank-2 tensors.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn tensor_row_access() {
        let t = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.row(1), &[4.0, 5.0, 6.0]);
    }
}
