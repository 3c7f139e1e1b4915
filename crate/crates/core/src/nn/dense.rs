use ndarray::{Array1, Array2, ArrayView2};

/// `x W + b` for `x: batch x in`, `W: in x out` (row-major slice).
pub fn dense(x: &Array2<f64>, weights: &[f64], bias: &[f64]) -> Array2<f64> {
    let (fan_in, fan_out) = (x.ncols(), bias.len());
    let w = ArrayView2::from_shape((fan_in, fan_out), weights).expect("weight length matches in x out");
    x.dot(&w) + ArrayView2::from_shape((1, fan_out), bias).expect("bias row")
}

/// Returns `(dx, dW, db)`.
pub fn dense_backward(x: &Array2<f64>, weights: &[f64], dy: &Array2<f64>) -> (Array2<f64>, Vec<f64>, Vec<f64>) {
    let (fan_in, fan_out) = (x.ncols(), dy.ncols());
    let w = ArrayView2::from_shape((fan_in, fan_out), weights).expect("weight length matches in x out");
    let dx = dy.dot(&w.t());
    let dw = x.t().dot(dy);
    let db: Array1<f64> = dy.sum_axis(ndarray::Axis(0));
    (dx, dw.as_standard_layout().iter().copied().collect(), db.to_vec())
}
