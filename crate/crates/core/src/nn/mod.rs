//! Differentiable kernels with explicit forward and backward passes.
//!
//! Activations are `ndarray` arrays: images are `batch x height x width x
//! channels`, sequences are `time x features`. Parameters are passed as flat
//! row-major slices so the model can keep them in one store.

pub mod attention;
pub mod conv;
pub mod dense;
pub mod dropout;
pub mod gradcheck;
pub mod loss;
pub mod lstm;
pub mod norm;
pub mod optim;
pub mod pool;
pub mod tensor;

use serde::{Deserialize, Serialize};

pub use attention::{attention_backward, attention_pool, AttentionParams};
pub use conv::{conv2d_same, conv2d_same_backward, ConvGrads};
pub use dense::{dense, dense_backward};
pub use dropout::dropout;
pub use gradcheck::{grad_check, GradCheckReport};
pub use loss::{softmax_rows, softmax_xent, Xent};
pub use lstm::{bilstm_backward, bilstm_forward, lstm_backward, lstm_forward, lstm_step, LstmCellParams};
pub use norm::{batchnorm, batchnorm_backward, BatchNormCache};
pub use optim::{adam_update, scaled_descent, AdamConfig, Optimizer, OptimizerState};
pub use pool::{avgpool2d, avgpool2d_backward};
pub use tensor::Tensor;

/// Forward-pass behaviour of batch normalization and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<D: ndarray::Dimension>(
    dy: &ndarray::Array<f64, D>,
    y: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}
