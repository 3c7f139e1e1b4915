//! LSTM cell, sequence unrolling with backpropagation through time, and the
//! bidirectional wrapper.
//!
//! Gate pre-activations are `W_g [h_{t-1}, x_t] + b_g` for the forget, input,
//! candidate and output gates, stored in that order as one `4H x (H + I)`
//! row-major matrix with a `4H` bias.

use ndarray::{s, Array2, ArrayView2};

use super::sigmoid;
use crate::error::{Error, Result};

const F: usize = 0;
const I: usize = 1;
const G: usize = 2;
const O: usize = 3;

/// Borrowed weights of one LSTM direction.
#[derive(Debug, Clone, Copy)]
pub struct LstmCellParams<'a> {
    pub input_size: usize,
    pub hidden_size: usize,
    pub weights: &'a [f64],
    pub bias: &'a [f64],
}

impl<'a> LstmCellParams<'a> {
    pub fn new(input_size: usize, hidden_size: usize, weights: &'a [f64], bias: &'a [f64]) -> Result<Self> {
        if weights.len() != 4 * hidden_size * (hidden_size + input_size) || bias.len() != 4 * hidden_size {
            return Err(Error::arg(format!(
                "LSTM parameters have {} weights and {} biases, expected {} and {}",
                weights.len(),
                bias.len(),
                4 * hidden_size * (hidden_size + input_size),
                4 * hidden_size
            )));
        }
        Ok(Self { input_size, hidden_size, weights, bias })
    }

    fn stride(&self) -> usize {
        self.hidden_size + self.input_size
    }

    fn row(&self, gate: usize, unit: usize) -> &[f64] {
        let r = gate * self.hidden_size + unit;
        &self.weights[r * self.stride()..(r + 1) * self.stride()]
    }
}

/// Everything one step needs for its backward pass.
#[derive(Debug, Clone)]
struct StepCache {
    z: Vec<f64>,
    f: Vec<f64>,
    i: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
}

fn step_cached(x: &[f64], h_prev: &[f64], c_prev: &[f64], p: &LstmCellParams) -> (Vec<f64>, Vec<f64>, StepCache) {
    let h = p.hidden_size;
    let mut z = Vec::with_capacity(p.stride());
    z.extend_from_slice(h_prev);
    z.extend_from_slice(x);
    let pre = |gate: usize, unit: usize| -> f64 {
        p.bias[gate * h + unit] + p.row(gate, unit).iter().zip(&z).map(|(w, v)| w * v).sum::<f64>()
    };
    let f: Vec<f64> = (0..h).map(|u| sigmoid(pre(F, u))).collect();
    let i: Vec<f64> = (0..h).map(|u| sigmoid(pre(I, u))).collect();
    let g: Vec<f64> = (0..h).map(|u| pre(G, u).tanh()).collect();
    let o: Vec<f64> = (0..h).map(|u| sigmoid(pre(O, u))).collect();
    let c: Vec<f64> = (0..h).map(|u| f[u] * c_prev[u] + i[u] * g[u]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h_new: Vec<f64> = (0..h).map(|u| o[u] * tanh_c[u]).collect();
    let cache = StepCache { z, f, i, g, o, c_prev: c_prev.to_vec(), tanh_c };
    (h_new, c, cache)
}

/// One LSTM step: returns `(h_t, C_t)`.
pub fn lstm_step(x: &[f64], h_prev: &[f64], c_prev: &[f64], params: &LstmCellParams) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() != params.input_size || h_prev.len() != params.hidden_size || c_prev.len() != params.hidden_size {
        return Err(Error::arg("lstm_step input or state length does not match the cell"));
    }
    let (h, c, _) = step_cached(x, h_prev, c_prev, params);
    Ok((h, c))
}

/// Forward unroll from zero state, kept for backpropagation through time.
#[derive(Debug, Clone)]
pub struct LstmTrace {
    steps: Vec<StepCache>,
}

/// Runs the cell over `xs` (`time x input`) from zero state; returns `time x hidden`.
pub fn lstm_forward(xs: ArrayView2<f64>, params: &LstmCellParams) -> Result<(Array2<f64>, LstmTrace)> {
    let (t_len, feat) = xs.dim();
    if t_len == 0 {
        return Err(Error::arg("empty sequence"));
    }
    if feat != params.input_size {
        return Err(Error::arg(format!("sequence has {feat} features, cell expects {}", params.input_size)));
    }
    let hs = params.hidden_size;
    let mut h = vec![0.0; hs];
    let mut c = vec![0.0; hs];
    let mut out = Array2::zeros((t_len, hs));
    let mut steps = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let x = xs.row(t).to_vec();
        let (h_new, c_new, cache) = step_cached(&x, &h, &c, params);
        out.row_mut(t).assign(&ndarray::ArrayView1::from(&h_new));
        steps.push(cache);
        h = h_new;
        c = c_new;
    }
    Ok((out, LstmTrace { steps }))
}

/// Gradients of one LSTM direction.
#[derive(Debug, Clone)]
pub struct LstmGrads {
    pub input: Array2<f64>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Backpropagation through time given `dh` (`time x hidden`), the gradient
/// of the loss with respect to every emitted hidden state.
pub fn lstm_backward(dh: ArrayView2<f64>, trace: &LstmTrace, params: &LstmCellParams) -> LstmGrads {
    let (hs, is) = (params.hidden_size, params.input_size);
    let stride = params.stride();
    let t_len = trace.steps.len();
    let mut dw = vec![0.0; params.weights.len()];
    let mut db = vec![0.0; params.bias.len()];
    let mut dx = Array2::zeros((t_len, is));
    let mut dh_next = vec![0.0; hs];
    let mut dc_next = vec![0.0; hs];
    let mut dpre = vec![0.0; 4 * hs];
    for t in (0..t_len).rev() {
        let st = &trace.steps[t];
        for u in 0..hs {
            let dh_u = dh[[t, u]] + dh_next[u];
            let dc = dc_next[u] + dh_u * st.o[u] * (1.0 - st.tanh_c[u] * st.tanh_c[u]);
            dpre[O * hs + u] = dh_u * st.tanh_c[u] * st.o[u] * (1.0 - st.o[u]);
            dpre[F * hs + u] = dc * st.c_prev[u] * st.f[u] * (1.0 - st.f[u]);
            dpre[I * hs + u] = dc * st.g[u] * st.i[u] * (1.0 - st.i[u]);
            dpre[G * hs + u] = dc * st.i[u] * (1.0 - st.g[u] * st.g[u]);
            dc_next[u] = dc * st.f[u];
        }
        let mut dz = vec![0.0; stride];
        for (r, &d) in dpre.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            db[r] += d;
            let w_row = &params.weights[r * stride..(r + 1) * stride];
            let dw_row = &mut dw[r * stride..(r + 1) * stride];
            for k in 0..stride {
                dw_row[k] += d * st.z[k];
                dz[k] += d * w_row[k];
            }
        }
        dh_next.copy_from_slice(&dz[..hs]);
        for k in 0..is {
            dx[[t, k]] = dz[hs + k];
        }
    }
    LstmGrads { input: dx, weights: dw, bias: db }
}

#[derive(Debug, Clone)]
pub struct BiLstmTrace {
    fwd: LstmTrace,
    bwd: LstmTrace,
}

/// Forward direction on `xs`, backward direction on the time-reversed input
/// re-reversed; per-timestep output is `[h_fwd, h_bwd]` (`time x 2H`).
pub fn bilstm_forward(
    xs: ArrayView2<f64>,
    fwd: &LstmCellParams,
    bwd: &LstmCellParams,
) -> Result<(Array2<f64>, BiLstmTrace)> {
    let (hf, tf) = lstm_forward(xs, fwd)?;
    let reversed = xs.slice(s![..;-1, ..]);
    let (hb_rev, tb) = lstm_forward(reversed, bwd)?;
    let t_len = xs.nrows();
    let mut out = Array2::zeros((t_len, fwd.hidden_size + bwd.hidden_size));
    out.slice_mut(s![.., ..fwd.hidden_size]).assign(&hf);
    out.slice_mut(s![.., fwd.hidden_size..]).assign(&hb_rev.slice(s![..;-1, ..]));
    Ok((out, BiLstmTrace { fwd: tf, bwd: tb }))
}

/// Returns `(d input, forward-direction grads, backward-direction grads)`;
/// the `input` field of each direction's grads is left empty.
pub fn bilstm_backward(
    dout: ArrayView2<f64>,
    trace: &BiLstmTrace,
    fwd: &LstmCellParams,
    bwd: &LstmCellParams,
) -> (Array2<f64>, LstmGrads, LstmGrads) {
    let hf = fwd.hidden_size;
    let mut gf = lstm_backward(dout.slice(s![.., ..hf]), &trace.fwd, fwd);
    let dh_b = dout.slice(s![..;-1, hf..]);
    let mut gb = lstm_backward(dh_b, &trace.bwd, bwd);
    let dx = &gf.input + &gb.input.slice(s![..;-1, ..]);
    gf.input = Array2::zeros((0, 0));
    gb.input = Array2::zeros((0, 0));
    (dx, gf, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logistic(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Scalar transcription of the gate equations with separate W_f, W_i, W_C, W_o.
    fn scalar_step(x: &[f64], h: &[f64], c: &[f64], w: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hs = h.len();
        let n = hs + x.len();
        let concat: Vec<f64> = h.iter().chain(x).copied().collect();
        let affine = |gate: usize, u: usize| {
            let mut acc = b[gate * hs + u];
            for k in 0..n {
                acc += w[(gate * hs + u) * n + k] * concat[k];
            }
            acc
        };
        let mut h_out = vec![0.0; hs];
        let mut c_out = vec![0.0; hs];
        for u in 0..hs {
            let f_t = logistic(affine(0, u));
            let i_t = logistic(affine(1, u));
            let c_tilde = affine(2, u).tanh();
            let o_t = logistic(affine(3, u));
            c_out[u] = f_t * c[u] + i_t * c_tilde;
            h_out[u] = o_t * c_out[u].tanh();
        }
        (h_out, c_out)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect()
    }

    #[test]
    fn zero_params_give_zero_state() {
        let (w, b) = (vec![0.0; 4 * 2 * 5], vec![0.0; 8]);
        let p = LstmCellParams::new(3, 2, &w, &b).unwrap();
        let (h, c) = lstm_step(&[0.3, -1.0, 2.0], &[0.0, 0.0], &[0.0, 0.0], &p).unwrap();
        assert_eq!(h, vec![0.0, 0.0]);
        assert_eq!(c, vec![0.0, 0.0]);
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let w = vec![0.0; 4 * 2 * 5];
        let mut b = vec![0.0; 8];
        b[0] = 20.0;
        b[1] = 20.0;
        let p = LstmCellParams::new(3, 2, &w, &b).unwrap();
        let (_, c) = lstm_step(&[0.1, 0.2, 0.3], &[0.5, -0.5], &[1.7, -0.4], &p).unwrap();
        assert!((c[0] - 1.7).abs() < 1e-6 && (c[1] + 0.4).abs() < 1e-6);
    }

    #[test]
    fn step_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let w = rand_vec(&mut rng, 4 * 2 * 5, 1.0);
            let b = rand_vec(&mut rng, 8, 1.0);
            let p = LstmCellParams::new(3, 2, &w, &b).unwrap();
            let x = rand_vec(&mut rng, 3, 2.0);
            let h = rand_vec(&mut rng, 2, 1.0);
            let c = rand_vec(&mut rng, 2, 2.0);
            let (h1, c1) = lstm_step(&x, &h, &c, &p).unwrap();
            let (h2, c2) = scalar_step(&x, &h, &c, &w, &b);
            for u in 0..2 {
                assert!((h1[u] - h2[u]).abs() < 1e-10 && (c1[u] - c2[u]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gates_and_cell_stay_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = rand_vec(&mut rng, 4 * 3 * 7, 3.0);
        let b = rand_vec(&mut rng, 12, 3.0);
        let p = LstmCellParams::new(4, 3, &w, &b).unwrap();
        let (mut h, mut c) = (vec![0.0; 3], vec![0.0; 3]);
        for _ in 0..200 {
            let x = rand_vec(&mut rng, 4, 5.0);
            let (_, _, cache) = step_cached(&x, &h, &c, &p);
            for v in cache.f.iter().chain(&cache.i).chain(&cache.o) {
                assert!(*v > 0.0 && *v < 1.0);
            }
            let (h1, c1) = lstm_step(&x, &h, &c, &p).unwrap();
            for u in 0..3 {
                assert!(c1[u].is_finite() && c1[u].abs() <= c[u].abs() + 1.0);
            }
            h = h1;
            c = c1;
        }
    }

    #[test]
    fn bilstm_zero_params_and_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs = Array2::from_shape_fn((5, 3), |_| rng.random::<f64>() - 0.5);
        let zeros = vec![0.0; 4 * 2 * 5];
        let zb = vec![0.0; 8];
        let z = LstmCellParams::new(3, 2, &zeros, &zb).unwrap();
        let (out, _) = bilstm_forward(xs.view(), &z, &z).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));

        let wf = rand_vec(&mut rng, 40, 1.0);
        let bf = rand_vec(&mut rng, 8, 1.0);
        let wb = rand_vec(&mut rng, 40, 1.0);
        let bb = rand_vec(&mut rng, 8, 1.0);
        let pf = LstmCellParams::new(3, 2, &wf, &bf).unwrap();
        let pb = LstmCellParams::new(3, 2, &wb, &bb).unwrap();
        let (out, _) = bilstm_forward(xs.view(), &pf, &pb).unwrap();

        // Oracle: compose lstm_step left-to-right and right-to-left.
        let (mut h, mut c) = (vec![0.0; 2], vec![0.0; 2]);
        for t in 0..5 {
            (h, c) = lstm_step(xs.row(t).as_slice().unwrap(), &h, &c, &pf).unwrap();
            assert!((out[[t, 0]] - h[0]).abs() < 1e-10 && (out[[t, 1]] - h[1]).abs() < 1e-10);
        }
        let (mut h, mut c) = (vec![0.0; 2], vec![0.0; 2]);
        for t in (0..5).rev() {
            (h, c) = lstm_step(xs.row(t).as_slice().unwrap(), &h, &c, &pb).unwrap();
            assert!((out[[t, 2]] - h[0]).abs() < 1e-10 && (out[[t, 3]] - h[1]).abs() < 1e-10);
        }
        assert!(bilstm_forward(Array2::<f64>::zeros((0, 3)).view(), &pf, &pb).is_err());
    }
}
