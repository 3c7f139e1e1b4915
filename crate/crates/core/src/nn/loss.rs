use ndarray::{Array2, Axis};

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.axis_iter_mut(Axis(0)) {
        let peak = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - peak).exp());
        let z = row.sum();
        row /= z;
    }
    p
}

#[derive(Debug, Clone)]
pub struct Xent {
    /// Mean negative log-likelihood over the batch.
    pub loss: f64,
    pub probs: Array2<f64>,
    /// Gradient of `loss` with respect to the logits.
    pub grad: Array2<f64>,
}

pub fn softmax_xent(logits: &Array2<f64>, labels: &[u8]) -> Xent {
    assert_eq!(logits.nrows(), labels.len(), "one label per row");
    let b = labels.len().max(1) as f64;
    let probs = softmax_rows(logits);
    let mut grad = probs.clone();
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let y = y as usize;
        // log-softmax directly keeps the loss finite for saturated logits
        let row = logits.row(r);
        let peak = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = peak + row.iter().map(|v| (v - peak).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        grad[[r, y]] -= 1.0;
    }
    grad /= b;
    Xent { loss: loss / b, probs, grad }
}
