//! Per-channel batch normalization over `batch x height x width`.

use ndarray::Array4;

use super::Mode;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub xhat: Array4<f64>,
    pub inv_std: Vec<f64>,
    pub mode: Mode,
}

/// Batch statistics computed in training mode: mean and unbiased variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

impl BatchStats {
    /// Exponential moving update of running statistics.
    pub fn update_running(&self, running_mean: &mut [f64], running_var: &mut [f64], momentum: f64) {
        for c in 0..self.mean.len() {
            running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * self.mean[c];
            running_var[c] = (1.0 - momentum) * running_var[c] + momentum * self.var_unbiased[c];
        }
    }
}

/// Normalizes each channel then applies `gamma * xhat + beta`.
///
/// `Mode::Train` normalizes with batch statistics (returned so the caller can
/// update running statistics); `Mode::Eval` uses the running statistics.
pub fn batchnorm(
    x: &Array4<f64>,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    mode: Mode,
) -> (Array4<f64>, BatchNormCache, Option<BatchStats>) {
    let c = x.dim().3;
    let count = x.len() / c.max(1);
    let x = x.as_standard_layout().into_owned();
    let xs = x.as_slice().expect("standard layout");

    let (mean, var, stats) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; c];
            for chunk in xs.chunks_exact(c) {
                mean.iter_mut().zip(chunk).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            let mut var = vec![0.0; c];
            for chunk in xs.chunks_exact(c) {
                for ch in 0..c {
                    let d = chunk[ch] - mean[ch];
                    var[ch] += d * d;
                }
            }
            let unbiased = var.iter().map(|v| if count > 1 { v / (count - 1) as f64 } else { 0.0 }).collect();
            var.iter_mut().for_each(|v| *v /= count as f64);
            let stats = BatchStats { mean: mean.clone(), var_unbiased: unbiased };
            (mean, var, Some(stats))
        }
        Mode::Eval => (running_mean.to_vec(), running_var.to_vec(), None),
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = x;
    let mut y = Array4::zeros(xhat.dim());
    {
        let xh = xhat.as_slice_mut().expect("standard layout");
        let ys = y.as_slice_mut().expect("standard layout");
        for (xc, yc) in xh.chunks_exact_mut(c).zip(ys.chunks_exact_mut(c)) {
            for ch in 0..c {
                xc[ch] = (xc[ch] - mean[ch]) * inv_std[ch];
                yc[ch] = gamma[ch] * xc[ch] + beta[ch];
            }
        }
    }
    (y, BatchNormCache { xhat, inv_std, mode }, stats)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward(dy: &Array4<f64>, cache: &BatchNormCache, gamma: &[f64]) -> (Array4<f64>, Vec<f64>, Vec<f64>) {
    let c = dy.dim().3;
    let count = dy.len() / c.max(1);
    let dy = dy.as_standard_layout();
    let dys = dy.as_slice().expect("standard layout");
    let xh = cache.xhat.as_slice().expect("standard layout");

    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (g, xc) in dys.chunks_exact(c).zip(xh.chunks_exact(c)) {
        for ch in 0..c {
            dbeta[ch] += g[ch];
            dgamma[ch] += g[ch] * xc[ch];
        }
    }

    let mut dx = Array4::zeros(dy.dim());
    let dxs = dx.as_slice_mut().expect("standard layout");
    match cache.mode {
        Mode::Eval => {
            for (d, g) in dxs.chunks_exact_mut(c).zip(dys.chunks_exact(c)) {
                for ch in 0..c {
                    d[ch] = g[ch] * gamma[ch] * cache.inv_std[ch];
                }
            }
        }
        Mode::Train => {
            // dx = gamma * inv_std / N * (N dy - sum(dy) - xhat * sum(dy * xhat))
            let n = count as f64;
            for ((d, g), xc) in dxs.chunks_exact_mut(c).zip(dys.chunks_exact(c)).zip(xh.chunks_exact(c)) {
                for ch in 0..c {
                    d[ch] = gamma[ch] * cache.inv_std[ch] / n * (n * g[ch] - dbeta[ch] - xc[ch] * dgamma[ch]);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}
