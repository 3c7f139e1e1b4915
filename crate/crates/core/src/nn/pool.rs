use ndarray::Array4;

/// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
pub fn avgpool2d(x: &Array4<f64>) -> Array4<f64> {
    let (b, h, w, c) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    Array4::from_shape_fn((b, ho, wo, c), |(n, i, j, ch)| {
        0.25 * (x[[n, 2 * i, 2 * j, ch]]
            + x[[n, 2 * i, 2 * j + 1, ch]]
            + x[[n, 2 * i + 1, 2 * j, ch]]
            + x[[n, 2 * i + 1, 2 * j + 1, ch]])
    })
}

/// Spreads each pooled gradient evenly over its 2x2 block.
pub fn avgpool2d_backward(dy: &Array4<f64>, input_dim: (usize, usize, usize, usize)) -> Array4<f64> {
    let (b, h, w, c) = input_dim;
    let (_, ho, wo, _) = dy.dim();
    Array4::from_shape_fn((b, h, w, c), |(n, i, j, ch)| {
        let (pi, pj) = (i / 2, j / 2);
        if pi < ho && pj < wo {
            0.25 * dy[[n, pi, pj, ch]]
        } else {
            0.0
        }
    })
}
