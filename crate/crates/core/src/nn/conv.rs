//! Stride-1 2-D convolution with "same" zero padding.
//!
//! Cross-correlation convention (no kernel flip). Kernels are laid out as
//! `kh x kw x c_in x c_out`.

use ndarray::Array4;

use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone)]
pub struct ConvGrads {
    /// `None` when the caller did not ask for the input gradient.
    pub input: Option<Array4<f64>>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

fn check(x: &Array4<f64>, kernel: &[f64], kshape: [usize; 4], bias_len: usize) -> Result<()> {
    let [kh, kw, cin, cout] = kshape;
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::arg(format!("kernel {kh}x{kw} has an even side; same padding needs odd sides")));
    }
    if x.dim().3 != cin {
        return Err(Error::arg(format!("input has {} channels, kernel expects {cin}", x.dim().3)));
    }
    if kernel.len() != kh * kw * cin * cout || bias_len != cout {
        return Err(Error::arg("kernel or bias length does not match kernel shape"));
    }
    Ok(())
}

/// Valid kernel-offset range for output index `i` along an axis of length `n`.
#[inline]
fn taps(i: usize, k: usize, n: usize) -> (usize, usize) {
    let pad = k / 2;
    let lo = pad.saturating_sub(i);
    let hi = (n + pad - i).min(k);
    (lo, hi)
}

pub fn conv2d_same(x: &Array4<f64>, kernel: &[f64], kshape: [usize; 4], bias: &[f64]) -> Result<Array4<f64>> {
    check(x, kernel, kshape, bias.len())?;
    let [kh, kw, cin, cout] = kshape;
    let (b, h, w, _) = x.dim();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut out = vec![0.0; b * h * w * cout];
    par::for_each_chunk_mut(&mut out, h * w * cout, |n, o_img| {
        let x_img = &xs[n * h * w * cin..(n + 1) * h * w * cin];
        for i in 0..h {
            let (di0, di1) = taps(i, kh, h);
            for j in 0..w {
                let (dj0, dj1) = taps(j, kw, w);
                let o = &mut o_img[(i * w + j) * cout..(i * w + j + 1) * cout];
                o.copy_from_slice(bias);
                for di in di0..di1 {
                    let ii = i + di - kh / 2;
                    for dj in dj0..dj1 {
                        let jj = j + dj - kw / 2;
                        let xin = &x_img[(ii * w + jj) * cin..(ii * w + jj + 1) * cin];
                        let kk = &kernel[(di * kw + dj) * cin * cout..(di * kw + dj + 1) * cin * cout];
                        for (ci, &xv) in xin.iter().enumerate() {
                            let krow = &kk[ci * cout..(ci + 1) * cout];
                            for (ov, &kv) in o.iter_mut().zip(krow) {
                                *ov += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(Array4::from_shape_vec((b, h, w, cout), out).expect("shape matches"))
}

/// Gradients of [`conv2d_same`] given the upstream gradient `dy`.
pub fn conv2d_same_backward(
    x: &Array4<f64>,
    kernel: &[f64],
    kshape: [usize; 4],
    dy: &Array4<f64>,
    need_input: bool,
) -> Result<ConvGrads> {
    check(x, kernel, kshape, kshape[3])?;
    let [kh, kw, cin, cout] = kshape;
    let (b, h, w, _) = x.dim();
    if dy.dim() != (b, h, w, cout) {
        return Err(Error::arg("upstream gradient shape does not match conv output"));
    }
    let x = x.as_standard_layout();
    let dy = dy.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let dys = dy.as_slice().expect("standard layout");
    let klen = kernel.len();

    let per_sample = par::map_indexed(b, |n| {
        let x_img = &xs[n * h * w * cin..(n + 1) * h * w * cin];
        let dy_img = &dys[n * h * w * cout..(n + 1) * h * w * cout];
        let mut dk = vec![0.0; klen];
        let mut db = vec![0.0; cout];
        let mut dx = if need_input { vec![0.0; h * w * cin] } else { Vec::new() };
        for i in 0..h {
            let (di0, di1) = taps(i, kh, h);
            for j in 0..w {
                let (dj0, dj1) = taps(j, kw, w);
                let g = &dy_img[(i * w + j) * cout..(i * w + j + 1) * cout];
                for (d, &gv) in db.iter_mut().zip(g) {
                    *d += gv;
                }
                for di in di0..di1 {
                    let ii = i + di - kh / 2;
                    for dj in dj0..dj1 {
                        let jj = j + dj - kw / 2;
                        let base = (ii * w + jj) * cin;
                        let koff = (di * kw + dj) * cin * cout;
                        for ci in 0..cin {
                            let xv = x_img[base + ci];
                            let krow = &kernel[koff + ci * cout..koff + (ci + 1) * cout];
                            let dkrow = &mut dk[koff + ci * cout..koff + (ci + 1) * cout];
                            let mut acc = 0.0;
                            for co in 0..cout {
                                dkrow[co] += xv * g[co];
                                acc += krow[co] * g[co];
                            }
                            if need_input {
                                dx[base + ci] += acc;
                            }
                        }
                    }
                }
            }
        }
        (dx, dk, db)
    });

    let mut dk = vec![0.0; klen];
    let mut db = vec![0.0; cout];
    let mut dx_all = if need_input { Vec::with_capacity(b * h * w * cin) } else { Vec::new() };
    for (dx, k, bb) in per_sample {
        dk.iter_mut().zip(k).for_each(|(a, v)| *a += v);
        db.iter_mut().zip(bb).for_each(|(a, v)| *a += v);
        dx_all.extend(dx);
    }
    let input = need_input.then(|| Array4::from_shape_vec((b, h, w, cin), dx_all).expect("shape matches"));
    Ok(ConvGrads { input, kernel: dk, bias: db })
}
