//! Temporal attention pooling with scalar scores `e_t = w . h_t + b`.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams<'a> {
    pub weights: &'a [f64],
    pub bias: f64,
}

/// Returns the attended vector `v = sum_t alpha_t h_t` and the weights `alpha`.
pub fn attention_pool(h: ArrayView2<f64>, params: &AttentionParams) -> Result<(Array1<f64>, Array1<f64>)> {
    let (t_len, d) = h.dim();
    if t_len == 0 {
        return Err(Error::arg("attention over an empty sequence"));
    }
    if params.weights.len() != d {
        return Err(Error::arg(format!("attention has {} weights for width {d}", params.weights.len())));
    }
    let w = ndarray::ArrayView1::from(params.weights);
    let scores = h.dot(&w) + params.bias;
    let peak = scores.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = scores.mapv(|s| (s - peak).exp());
    let alpha = &exp / exp.sum();
    let v = alpha.dot(&h);
    Ok((v, alpha))
}

pub struct AttentionGrads {
    pub input: Array2<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

pub fn attention_backward(
    h: ArrayView2<f64>,
    alpha: &Array1<f64>,
    params: &AttentionParams,
    dv: &Array1<f64>,
) -> AttentionGrads {
    let dalpha = h.dot(dv);
    let mean = alpha.dot(&dalpha);
    let de = alpha * &(dalpha - mean);
    let w = ndarray::ArrayView1::from(params.weights);
    let mut dh = Array2::zeros(h.dim());
    for t in 0..h.nrows() {
        let mut row = dh.row_mut(t);
        row.scaled_add(alpha[t], dv);
        row.scaled_add(de[t], &w);
    }
    AttentionGrads { input: dh, weights: de.dot(&h).to_vec(), bias: de.sum() }
}
