//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails. Pass criterion numbers as arguments to
//! run a subset.

use std::time::Instant;

use ndarray::{Array1, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stann_core::graph::{build_knn_adjacency, Montage, Sensor};
use stann_core::io::{read_checkpoint, read_dataset, write_checkpoint, write_dataset, Dataset};
use stann_core::model::{backward, flat_grads, forward, Batch, Role, StannConfig, StannModel};
use stann_core::nn::gradcheck::grad_check;
use stann_core::nn::optim::scaled_step;
use stann_core::nn::{
    attention_backward, attention_pool, avgpool2d, avgpool2d_backward, batchnorm, batchnorm_backward, bilstm_backward,
    bilstm_forward, conv2d_same, conv2d_same_backward, dense, dense_backward, lstm_step, softmax_xent, AttentionParams,
    LstmCellParams, Mode, Optimizer,
};
use stann_core::prep::{default_threshold, prepare, PrepConfig, WindowSet};
use stann_core::protocol::RunConfig;
use stann_core::signal::{generate_synthetic, Band, SynthSpec};
use stann_core::train::{cross_validate, evaluate_metrics, mean_sd, train_model, Hyper};
use stann_core::transfer::{finetune, select_budget, train_from_scratch, Budget, FinetuneConfig, FreezeScheme};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-scale..scale)).collect()
}

// 1. Parameter table

fn table_parity() -> Outcome {
    let model = StannModel::build(StannConfig::full(32, 128), 0).map_err(|e| e.to_string())?;
    let table = model.parameter_table();
    let row = |name: &str| table.iter().find(|r| r.name == name).ok_or(format!("no row {name}"));
    let want: [(&str, Option<usize>, [usize; 3]); 18] = [
        ("IN1", None, [32, 128, 1]),
        ("C1_1", Some(750), [32, 128, 25]),
        ("C1_2", Some(900), [32, 128, 30]),
        ("C1_3", Some(560), [32, 128, 40]),
        ("P1_1", None, [16, 64, 25]),
        ("P1_2", None, [16, 64, 30]),
        ("P1_3", None, [16, 64, 40]),
        ("C2_1", Some(11500), [16, 64, 50]),
        ("C2_2", Some(16500), [16, 64, 60]),
        ("C2_3", Some(3600), [16, 64, 80]),
        ("P2_1", None, [8, 32, 50]),
        ("P2_2", None, [8, 32, 60]),
        ("P2_3", None, [8, 32, 80]),
        ("C3_1", Some(11375), [8, 32, 25]),
        ("C3_2", Some(16350), [8, 32, 30]),
        ("C3_3", Some(3400), [8, 32, 40]),
        ("CON1", None, [8, 32, 95]),
        ("C4", Some(96), [8, 32, 1]),
    ];
    for (name, count, shape) in want {
        let r = row(name)?;
        ensure(r.output_shape == shape, format!("{name}: shape {:?}, expected {shape:?}", r.output_shape))?;
        if let Some(c) = count {
            ensure(r.parity_count == Some(c), format!("{name}: {:?} parameters, expected {c}", r.parity_count))?;
        }
    }
    Ok("10 parameter counts and 18 output shapes match".into())
}

// 2. Spectral suite

fn random_montage(r: &mut ChaCha8Rng) -> Montage {
    let n = r.random_range(4..=24);
    let sensors = (0..n)
        .map(|i| {
            let (theta, phi): (f64, f64) = (r.random_range(0.0..1.6), r.random_range(-3.1..3.1));
            let rad: f64 = r.random_range(0.9..1.1);
            Sensor::new(format!("S{i}"), rad * theta.sin() * phi.cos(), rad * theta.sin() * phi.sin(), rad * theta.cos())
        })
        .collect();
    Montage::new(sensors).expect("distinct labels")
}

fn quad(l: &Array2<f64>, x: &Array2<f64>) -> f64 {
    (x * &l.dot(x)).sum()
}

fn spectral_suite() -> Outcome {
    let mut r = rng(2);
    let mut worst = [0.0f64; 5];
    for case in 0..1000 {
        let m = random_montage(&mut r);
        let n = m.len();
        let k = r.random_range(1..n);
        let g = build_knn_adjacency(&m, k).map_err(|e| format!("case {case}: {e}"))?;
        let a = &g.adjacency;
        ensure(*a == a.t(), format!("case {case}: adjacency not symmetric"))?;
        let v = &g.eigvecs;
        let ortho = (v.t().dot(v) - Array2::<f64>::eye(n)).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let t = r.random_range(1..6);
        let x = Array2::from_shape_vec((n, t), uniform(&mut r, n * t, 1.0)).unwrap();
        let coeffs = g.gft(x.view()).unwrap();
        let energy = x.iter().map(|v| v * v).sum::<f64>();
        let parseval = (energy - coeffs.iter().map(|v| v * v).sum::<f64>()).abs() / energy;
        let full = g.lowpass_smooth(x.view(), n).unwrap();
        let identity = (&full - &x).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        let w = r.random_range(1..=n);
        let once = g.lowpass_smooth(x.view(), w).unwrap();
        let twice = g.lowpass_smooth(once.view(), w).unwrap();
        let idem = (&twice - &once).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        let (qs, qx) = (quad(&g.laplacian, &once), quad(&g.laplacian, &x));
        let excess = (qs - qx) / qx.abs().max(1.0);
        for (slot, val) in worst.iter_mut().zip([ortho, parseval, identity, idem, excess]) {
            *slot = slot.max(val);
        }
        ensure(ortho <= 1e-8, format!("case {case}: |VtV - I| = {ortho:e}"))?;
        ensure(parseval <= 1e-8, format!("case {case}: Parseval error {parseval:e}"))?;
        ensure(identity <= 1e-10, format!("case {case}: full-band smoothing error {identity:e}"))?;
        ensure(idem <= 1e-10, format!("case {case}: idempotence error {idem:e}"))?;
        ensure(qs <= qx + 1e-12 * qx.abs().max(1.0), format!("case {case}: smoothing raised variation {qx} -> {qs}"))?;
    }
    Ok(format!(
        "1000 graphs; worst ortho {:.1e}, Parseval {:.1e}, identity {:.1e}, idempotence {:.1e}",
        worst[0], worst[1], worst[2], worst[3]
    ))
}

// 3. Oracles

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Textbook LSTM step with separate gate matrices `[h, x]` order.
fn oracle_lstm_step(x: &[f64], h: &[f64], c: &[f64], w: &[f64], b: &[f64], hid: usize) -> (Vec<f64>, Vec<f64>) {
    let input = x.len();
    let stride = hid + input;
    let gate = |g: usize, u: usize| {
        let row = &w[(g * hid + u) * stride..(g * hid + u + 1) * stride];
        let mut s = b[g * hid + u];
        for j in 0..hid {
            s += row[j] * h[j];
        }
        for j in 0..input {
            s += row[hid + j] * x[j];
        }
        s
    };
    let mut h_new = vec![0.0; hid];
    let mut c_new = vec![0.0; hid];
    for u in 0..hid {
        let f = sig(gate(0, u));
        let i = sig(gate(1, u));
        let g = gate(2, u).tanh();
        let o = sig(gate(3, u));
        c_new[u] = f * c[u] + i * g;
        h_new[u] = o * c_new[u].tanh();
    }
    (h_new, c_new)
}

fn oracle_unroll(xs: &[Vec<f64>], w: &[f64], b: &[f64], hid: usize) -> Vec<Vec<f64>> {
    let (mut h, mut c) = (vec![0.0; hid], vec![0.0; hid]);
    xs.iter()
        .map(|x| {
            let (hn, cn) = oracle_lstm_step(x, &h, &c, w, b, hid);
            h = hn;
            c = cn;
            h.clone()
        })
        .collect()
}

fn oracle_conv(x: &Array4<f64>, k: &[f64], [kh, kw, cin, cout]: [usize; 4], bias: &[f64]) -> Array4<f64> {
    let (b, h, w, _) = x.dim();
    let (ph, pw) = (kh / 2, kw / 2);
    let mut padded = Array4::zeros((b, h + 2 * ph, w + 2 * pw, cin));
    padded.slice_mut(ndarray::s![.., ph..ph + h, pw..pw + w, ..]).assign(x);
    Array4::from_shape_fn((b, h, w, cout), |(n, i, j, o)| {
        let mut s = bias[o];
        for di in 0..kh {
            for dj in 0..kw {
                for ci in 0..cin {
                    s += padded[[n, i + di, j + dj, ci]] * k[((di * kw + dj) * cin + ci) * cout + o];
                }
            }
        }
        s
    })
}

fn max_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn oracles() -> Outcome {
    let mut r = rng(3);
    let tol = 1e-10;
    let mut worst = 0.0f64;
    for case in 0..200 {
        let (input, hid) = (r.random_range(1..6), r.random_range(1..6));
        let w = uniform(&mut r, 4 * hid * (hid + input), 1.0);
        let b = uniform(&mut r, 4 * hid, 1.0);
        let p = LstmCellParams::new(input, hid, &w, &b).unwrap();
        let (x, h, c) = (uniform(&mut r, input, 2.0), uniform(&mut r, hid, 1.0), uniform(&mut r, hid, 1.0));
        let (gh, gc) = lstm_step(&x, &h, &c, &p).unwrap();
        let (oh, oc) = oracle_lstm_step(&x, &h, &c, &w, &b, hid);
        let d = max_diff(&gh, &oh).max(max_diff(&gc, &oc));
        worst = worst.max(d);
        ensure(d < tol, format!("lstm_step case {case}: {d:e}"))?;
    }
    for case in 0..100 {
        let (input, hid, t) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..9));
        let (wf, bf) = (uniform(&mut r, 4 * hid * (hid + input), 1.0), uniform(&mut r, 4 * hid, 1.0));
        let (wb, bb) = (uniform(&mut r, 4 * hid * (hid + input), 1.0), uniform(&mut r, 4 * hid, 1.0));
        let xs: Vec<Vec<f64>> = (0..t).map(|_| uniform(&mut r, input, 1.0)).collect();
        let arr = Array2::from_shape_fn((t, input), |(i, j)| xs[i][j]);
        let (out, _) = bilstm_forward(
            arr.view(),
            &LstmCellParams::new(input, hid, &wf, &bf).unwrap(),
            &LstmCellParams::new(input, hid, &wb, &bb).unwrap(),
        )
        .unwrap();
        let fwd = oracle_unroll(&xs, &wf, &bf, hid);
        let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
        let mut bwd = oracle_unroll(&rev, &wb, &bb, hid);
        bwd.reverse();
        for s in 0..t {
            let want: Vec<f64> = fwd[s].iter().chain(&bwd[s]).copied().collect();
            let d = max_diff(out.row(s), &want);
            worst = worst.max(d);
            ensure(d < tol, format!("bilstm case {case} step {s}: {d:e}"))?;
        }
    }
    for case in 0..100 {
        let (t, d) = (r.random_range(1..10), r.random_range(1..6));
        let h = Array2::from_shape_vec((t, d), uniform(&mut r, t * d, 2.0)).unwrap();
        let w = uniform(&mut r, d, 1.0);
        let bias = r.random_range(-1.0..1.0);
        let (v, alpha) = attention_pool(h.view(), &AttentionParams { weights: &w, bias }).unwrap();
        let scores: Vec<f64> = (0..t).map(|s| bias + (0..d).map(|j| w[j] * h[[s, j]]).sum::<f64>()).collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let a: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
        let want: Vec<f64> = (0..d).map(|j| (0..t).map(|s| a[s] * h[[s, j]]).sum()).collect();
        let diff = max_diff(&v, &want).max(max_diff(&alpha, &a));
        worst = worst.max(diff);
        ensure(diff < tol, format!("attention case {case}: {diff:e}"))?;
    }
    for case in 0..100 {
        let kh = [1, 3, 5][r.random_range(0..3)];
        let kw = [1, 3, 5][r.random_range(0..3)];
        let (b, h, w, cin, cout) =
            (r.random_range(1..3), r.random_range(1..7), r.random_range(1..7), r.random_range(1..4), r.random_range(1..4));
        let x = Array4::from_shape_vec((b, h, w, cin), uniform(&mut r, b * h * w * cin, 1.0)).unwrap();
        let k = uniform(&mut r, kh * kw * cin * cout, 1.0);
        let bias = uniform(&mut r, cout, 1.0);
        let got = conv2d_same(&x, &k, [kh, kw, cin, cout], &bias).unwrap();
        let want = oracle_conv(&x, &k, [kh, kw, cin, cout], &bias);
        let d = max_diff(&got, &want);
        worst = worst.max(d);
        ensure(d < tol, format!("conv case {case}: {d:e}"))?;
    }
    for case in 0..200 {
        let n = r.random_range(1..60);
        let preds: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        let m = evaluate_metrics(&preds, &labels).unwrap();
        let mut cm = [[0usize; 2]; 2];
        for (&p, &y) in preds.iter().zip(&labels) {
            cm[y as usize][p as usize] += 1;
        }
        let (tp, tn, fp, fne) = (cm[1][1], cm[0][0], cm[0][1], cm[1][0]);
        let acc = (tp + tn) as f64 / n as f64;
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fne == 0 { 0.0 } else { tp as f64 / (tp + fne) as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        let d = (m.accuracy - acc).abs().max((m.f1 - f1).abs());
        worst = worst.max(d);
        ensure(d < tol && (m.tp, m.tn, m.fp, m.fn_) == (tp, tn, fp, fne), format!("metrics case {case}: {m:?}"))?;
    }
    Ok(format!("lstm_step 200, bilstm 100, attention 100, conv 100, metrics 200 instances; worst {worst:.1e}"))
}

// 4. Gradients

fn tiny_model_gradients(mode: Mode, seed: u64) -> Result<f64, String> {
    let mut cfg = StannConfig::tiny(4, 16);
    if mode == Mode::Train {
        cfg.ste_dropout = [0.3, 0.3];
        cfg.ran_dropout = [0.2, 0.2];
    }
    let mut m = StannModel::build(cfg.clone(), seed).map_err(|e| e.to_string())?;
    let mut r = rng(seed);
    for block in &mut m.store.blocks {
        for t in &mut block.tensors {
            if t.role == Role::Running {
                let base = if t.name == "running_var" { 0.5 } else { -0.3 };
                t.value.data.iter_mut().for_each(|v| *v = base + r.random::<f64>());
            }
        }
    }
    let x = Array3::from_shape_vec((3, 4, 16), uniform(&mut r, 3 * 4 * 16, 1.0)).unwrap();
    let labels = [0u8, 1, 1];
    let batch = Batch::from_windows(x.view());
    let theta = m.store.flat_trainable();
    let trace = forward(&m.store, &cfg, &batch, mode, 7).map_err(|e| e.to_string())?;
    let grads = backward(&m.store, &cfg, &trace, &softmax_xent(&trace.logits, &labels).grad).map_err(|e| e.to_string())?;
    let analytic = flat_grads(&m.store, &grads);
    let mut store = m.store.clone();
    let loss = |th: &[f64]| {
        store.set_flat_trainable(th);
        let t = forward(&store, &cfg, &batch, mode, 7).expect("forward");
        softmax_xent(&t.logits, &labels).loss
    };
    let coords: Vec<usize> = (0..theta.len()).collect();
    Ok(grad_check(loss, &theta, &analytic, &coords, 1e-5).map_err(|e| e.to_string())?.max_rel_error)
}

/// Checks `d <r, f(theta)> / d theta` for a kernel `f` against `analytic`.
fn kernel_check(name: &str, f: impl FnMut(&[f64]) -> f64, theta: &[f64], analytic: &[f64]) -> Result<f64, String> {
    let coords: Vec<usize> = (0..theta.len()).collect();
    let rep = grad_check(f, theta, analytic, &coords, 1e-5).map_err(|e| format!("{name}: {e}"))?;
    ensure(rep.max_rel_error < 1e-6, format!("{name}: relative error {:.2e} at {}", rep.max_rel_error, rep.worst_coord))?;
    Ok(rep.max_rel_error)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn kernel_gradients() -> Result<f64, String> {
    let mut r = rng(4);
    let mut worst = 0.0f64;
    let (b, h, w, cin, cout) = (2, 4, 5, 2, 3);
    let kshape = [3, 3, cin, cout];
    let x = uniform(&mut r, b * h * w * cin, 1.0);
    let k = uniform(&mut r, 9 * cin * cout, 1.0);
    let bias = uniform(&mut r, cout, 1.0);
    let weights = uniform(&mut r, b * h * w * cout, 1.0);
    let xa = Array4::from_shape_vec((b, h, w, cin), x.clone()).unwrap();
    let dy = Array4::from_shape_vec((b, h, w, cout), weights.clone()).unwrap();
    let g = conv2d_same_backward(&xa, &k, kshape, &dy, true).unwrap();
    let conv_loss = |x: &[f64], k: &[f64], bias: &[f64]| {
        let out = conv2d_same(&Array4::from_shape_vec((b, h, w, cin), x.to_vec()).unwrap(), k, kshape, bias).unwrap();
        dot(out.as_slice().unwrap(), &weights)
    };
    worst = worst.max(kernel_check("conv input", |t| conv_loss(t, &k, &bias), &x, g.input.unwrap().as_slice().unwrap())?);
    worst = worst.max(kernel_check("conv kernel", |t| conv_loss(&x, t, &bias), &k, &g.kernel)?);
    worst = worst.max(kernel_check("conv bias", |t| conv_loss(&x, &k, t), &bias, &g.bias)?);

    let c = 3;
    let xb = uniform(&mut r, 4 * 2 * 3 * c, 1.5);
    let (gamma, beta) = (uniform(&mut r, c, 1.0), uniform(&mut r, c, 1.0));
    let wy = uniform(&mut r, xb.len(), 1.0);
    let bn_loss = |x: &[f64], gamma: &[f64], beta: &[f64]| {
        let xa = Array4::from_shape_vec((4, 2, 3, c), x.to_vec()).unwrap();
        let (y, _, _) = batchnorm(&xa, gamma, beta, &[0.0; 3], &[1.0; 3], Mode::Train);
        dot(y.as_slice().unwrap(), &wy)
    };
    let xa = Array4::from_shape_vec((4, 2, 3, c), xb.clone()).unwrap();
    let (_, cache, _) = batchnorm(&xa, &gamma, &beta, &[0.0; 3], &[1.0; 3], Mode::Train);
    let (dx, dg, db) = batchnorm_backward(&Array4::from_shape_vec((4, 2, 3, c), wy.clone()).unwrap(), &cache, &gamma);
    worst = worst.max(kernel_check("batchnorm input", |t| bn_loss(t, &gamma, &beta), &xb, dx.as_slice().unwrap())?);
    worst = worst.max(kernel_check("batchnorm gamma", |t| bn_loss(&xb, t, &beta), &gamma, &dg)?);
    worst = worst.max(kernel_check("batchnorm beta", |t| bn_loss(&xb, &gamma, t), &beta, &db)?);

    let xp = uniform(&mut r, 2 * 4 * 6 * 2, 1.0);
    let wp = uniform(&mut r, 2 * 2 * 3 * 2, 1.0);
    let pool_loss = |x: &[f64]| {
        let y = avgpool2d(&Array4::from_shape_vec((2, 4, 6, 2), x.to_vec()).unwrap());
        dot(y.as_slice().unwrap(), &wp)
    };
    let dpool = avgpool2d_backward(&Array4::from_shape_vec((2, 2, 3, 2), wp.clone()).unwrap(), (2, 4, 6, 2));
    worst = worst.max(kernel_check("avgpool input", pool_loss, &xp, dpool.as_slice().unwrap())?);

    let (t, input, hid) = (5, 3, 2);
    let xs = uniform(&mut r, t * input, 1.0);
    let (wf, bf, wb, bb) = (
        uniform(&mut r, 4 * hid * (hid + input), 0.8),
        uniform(&mut r, 4 * hid, 0.5),
        uniform(&mut r, 4 * hid * (hid + input), 0.8),
        uniform(&mut r, 4 * hid, 0.5),
    );
    let wo = uniform(&mut r, t * 2 * hid, 1.0);
    let lstm_loss = |xs: &[f64], wf: &[f64], bf: &[f64], wb: &[f64], bb: &[f64]| {
        let arr = Array2::from_shape_vec((t, input), xs.to_vec()).unwrap();
        let (out, _) = bilstm_forward(
            arr.view(),
            &LstmCellParams::new(input, hid, wf, bf).unwrap(),
            &LstmCellParams::new(input, hid, wb, bb).unwrap(),
        )
        .unwrap();
        dot(out.as_slice().unwrap(), &wo)
    };
    let arr = Array2::from_shape_vec((t, input), xs.clone()).unwrap();
    let (pf, pb) = (LstmCellParams::new(input, hid, &wf, &bf).unwrap(), LstmCellParams::new(input, hid, &wb, &bb).unwrap());
    let (_, trace) = bilstm_forward(arr.view(), &pf, &pb).unwrap();
    let (dx, gf, gb) = bilstm_backward(Array2::from_shape_vec((t, 2 * hid), wo.clone()).unwrap().view(), &trace, &pf, &pb);
    worst = worst.max(kernel_check("bilstm input", |v| lstm_loss(v, &wf, &bf, &wb, &bb), &xs, dx.as_slice().unwrap())?);
    worst = worst.max(kernel_check("bilstm fwd weights", |v| lstm_loss(&xs, v, &bf, &wb, &bb), &wf, &gf.weights)?);
    worst = worst.max(kernel_check("bilstm fwd bias", |v| lstm_loss(&xs, &wf, v, &wb, &bb), &bf, &gf.bias)?);
    worst = worst.max(kernel_check("bilstm bwd weights", |v| lstm_loss(&xs, &wf, &bf, v, &bb), &wb, &gb.weights)?);
    worst = worst.max(kernel_check("bilstm bwd bias", |v| lstm_loss(&xs, &wf, &bf, &wb, v), &bb, &gb.bias)?);

    let (ta, d) = (6, 4);
    let ha = uniform(&mut r, ta * d, 1.0);
    let (wa, ba) = (uniform(&mut r, d, 1.0), vec![0.3]);
    let wv = uniform(&mut r, d, 1.0);
    let att_loss = |h: &[f64], w: &[f64], b: &[f64]| {
        let arr = Array2::from_shape_vec((ta, d), h.to_vec()).unwrap();
        let (v, _) = attention_pool(arr.view(), &AttentionParams { weights: w, bias: b[0] }).unwrap();
        dot(v.as_slice().unwrap(), &wv)
    };
    let arr = Array2::from_shape_vec((ta, d), ha.clone()).unwrap();
    let params = AttentionParams { weights: &wa, bias: ba[0] };
    let (_, alpha) = attention_pool(arr.view(), &params).unwrap();
    let ag = attention_backward(arr.view(), &alpha, &params, &Array1::from(wv.clone()));
    worst = worst.max(kernel_check("attention input", |v| att_loss(v, &wa, &ba), &ha, ag.input.as_slice().unwrap())?);
    worst = worst.max(kernel_check("attention weights", |v| att_loss(&ha, v, &ba), &wa, &ag.weights)?);
    worst = worst.max(kernel_check("attention bias", |v| att_loss(&ha, &wa, v), &ba, &[ag.bias])?);

    let (bd, din, dout) = (3, 4, 2);
    let xd = uniform(&mut r, bd * din, 1.0);
    let (wd, bdv) = (uniform(&mut r, din * dout, 1.0), uniform(&mut r, dout, 1.0));
    let wyd = uniform(&mut r, bd * dout, 1.0);
    let dense_loss = |x: &[f64], w: &[f64], b: &[f64]| {
        let y = dense(&Array2::from_shape_vec((bd, din), x.to_vec()).unwrap(), w, b);
        dot(y.as_slice().unwrap(), &wyd)
    };
    let (ddx, ddw, ddb) = dense_backward(
        &Array2::from_shape_vec((bd, din), xd.clone()).unwrap(),
        &wd,
        &Array2::from_shape_vec((bd, dout), wyd.clone()).unwrap(),
    );
    worst = worst.max(kernel_check("dense input", |v| dense_loss(v, &wd, &bdv), &xd, ddx.as_slice().unwrap())?);
    worst = worst.max(kernel_check("dense weights", |v| dense_loss(&xd, v, &bdv), &wd, &ddw)?);
    worst = worst.max(kernel_check("dense bias", |v| dense_loss(&xd, &wd, v), &bdv, &ddb)?);
    Ok(worst)
}

fn gradient_integrity() -> Outcome {
    let eval = tiny_model_gradients(Mode::Eval, 1)?;
    let train = tiny_model_gradients(Mode::Train, 2)?;
    ensure(eval < 1e-4 && train < 1e-4, format!("tiny model relative error eval {eval:.2e}, train {train:.2e}"))?;
    let kernels = kernel_gradients()?;
    Ok(format!("tiny model eval {eval:.1e}, train {train:.1e}; kernels {kernels:.1e}"))
}

// 5-7. Desk-scale surrogates: 8 sensors at 32 Hz with 1-s windows.

fn montage8() -> Montage {
    let full = Montage::standard_1020_32();
    full.subset(&full.labels()[..8]).expect("known labels").0
}

fn surrogate_prep(knn: Option<usize>) -> PrepConfig {
    PrepConfig { band: Some(Band::Alpha), window: 32, knn, ..PrepConfig::default() }
}

fn surrogate_spec(class_effect: f64, n_trials: usize) -> SynthSpec {
    SynthSpec { n_channels: 8, fs: 32.0, n_trials, class_effect, trial_secs: 20.0, pretrial_secs: 1.0, ..SynthSpec::default() }
}

fn windows(spec: &SynthSpec, seed: u64, knn: Option<usize>) -> Result<WindowSet, String> {
    let trials = generate_synthetic(spec, seed).map_err(|e| e.to_string())?;
    prepare(&trials, &montage8(), &surrogate_prep(knn)).map_err(|e| e.to_string())
}

fn learning_surrogate() -> Outcome {
    let data = windows(&surrogate_spec(2.0, 40), 1, None)?;
    let hyper = Hyper { epochs: 10, batch: 32, folds: 10, seed: 1, ..Hyper::default() };
    let config = StannConfig::desk(8, 32);
    let real = cross_validate(&config, &data, &hyper).map_err(|e| e.to_string())?;
    let shuffled = data.shuffled_labels(&mut rng(5));
    let control = cross_validate(&config, &shuffled, &hyper).map_err(|e| e.to_string())?;
    let msg = format!(
        "{} windows, 10-fold: accuracy {:.3} (sd {:.3}); shuffled labels {:.3}",
        data.len(),
        real.mean_accuracy,
        real.sd_accuracy,
        control.mean_accuracy
    );
    ensure(real.mean_accuracy >= 0.95 && (control.mean_accuracy - 0.5).abs() <= 0.05, msg.clone())?;
    Ok(msg)
}

fn smoothing_benefit() -> Outcome {
    let config = StannConfig::desk(8, 32);
    let spec = SynthSpec { pattern: Some(vec![1.0; 8]), ..surrogate_spec(0.15, 20) };
    let (mut raw, mut smooth) = (Vec::new(), Vec::new());
    for seed in 0..10 {
        let hyper = Hyper { epochs: 10, batch: 32, folds: 5, seed, ..Hyper::default() };
        for (knn, out) in [(None, &mut raw), (Some(4), &mut smooth)] {
            let data = windows(&spec, 300 + seed, knn)?;
            out.push(cross_validate(&config, &data, &hyper).map_err(|e| e.to_string())?.mean_accuracy);
        }
    }
    let ((mr, sr), (ms, ss)) = (mean_sd(&raw), mean_sd(&smooth));
    let wins = raw.iter().zip(&smooth).filter(|(a, b)| b >= a).count();
    let msg = format!("10 seeds: smoothed {ms:.3} (sd {ss:.3}) vs raw {mr:.3} (sd {sr:.3}); smoothed >= raw in {wins}/10");
    ensure(ms >= mr - sr, msg.clone())?;
    Ok(msg)
}

fn tl_suite() -> Outcome {
    let (p, g, lr) = (0.4375, -1.75, 0.01);
    ensure(scaled_step(p, g, lr, 0.0) == p, "alpha = 0 moved the parameter")?;
    ensure((scaled_step(p, g, lr, 1.0) - (p - lr * g)).abs() <= 1e-12, "alpha = 1 is not a plain step")?;
    let mut r = rng(7);
    for _ in 0..1000 {
        let (p, g, lr, a) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), r.random_range(0.0..0.1), r.random_range(0.0..1.0));
        let d = (scaled_step(p, g, lr, a) - (p - a * lr * g)).abs();
        ensure(d <= 1e-12, format!("effective rate mismatch {d:e}"))?;
    }

    let config = StannConfig::desk(8, 32);
    let source_spec = surrogate_spec(0.5, 20);
    let target_spec =
        SynthSpec { pattern: Some(vec![1.0, 1.0, 0.8, 0.6, 0.4, 0.2, 0.0, 0.0]), subject_id: "s02".into(), ..source_spec.clone() };
    let mut frozen_ok = true;
    let mut acc = [[Vec::new(), Vec::new()], [Vec::new(), Vec::new()]];
    for seed in 0..10u64 {
        let source = windows(&source_spec, 100 + seed, None)?;
        let target = windows(&target_spec, 200 + seed, None)?;
        let mut model = StannModel::build(config.clone(), seed).map_err(|e| e.to_string())?;
        let hyper = Hyper { epochs: 10, batch: 32, seed, ..Hyper::default() };
        let mut state = model.optimizer_state(hyper.optimizer, 1.0);
        let all: Vec<usize> = (0..source.len()).collect();
        train_model(&mut model, &mut state, &source, &all, &hyper, seed).map_err(|e| e.to_string())?;
        for (bi, budget) in [Budget::Pct10, Budget::Pct20].into_iter().enumerate() {
            let split = select_budget(&target, budget, seed).map_err(|e| e.to_string())?;
            let cfg = FinetuneConfig { budget, batch: 32, seed, ..FinetuneConfig::default() };
            let (tuned, tl) =
                finetune(&model, &FreezeScheme::Preset('a'), &target, &split, &cfg).map_err(|e| e.to_string())?;
            for (a, b) in model.store.blocks.iter().zip(&tuned.store.blocks) {
                frozen_ok &= b.trainable || a.tensors == b.tensors;
            }
            let (_, scratch) = train_from_scratch(&config, &target, &split, &cfg).map_err(|e| e.to_string())?;
            acc[bi][0].push(tl.accuracy);
            acc[bi][1].push(scratch.accuracy);
        }
    }
    ensure(frozen_ok, "a frozen block changed during fine-tuning")?;
    let mut parts = Vec::new();
    let mut pass = true;
    for (bi, name) in ["10%", "20%"].iter().enumerate() {
        let ((mt, st), (ms, ss)) = (mean_sd(&acc[bi][0]), mean_sd(&acc[bi][1]));
        pass &= mt >= ms - ss.max(st);
        parts.push(format!("{name}: fine-tuned {mt:.3} (sd {st:.3}) vs scratch {ms:.3} (sd {ss:.3})"));
    }
    let msg = format!("update identities hold; frozen blocks unchanged; 10 seeds, {}", parts.join("; "));
    ensure(pass, msg.clone())?;
    Ok(msg)
}

// 8. Protocol constants

fn protocol_constants() -> Outcome {
    let cfg = RunConfig::default();
    let echo = cfg.echo();
    ensure(echo["prep"]["window"] == 128, "window length is not 128")?;
    ensure(echo["train"]["batch"] == 300 && echo["train"]["epochs"] == 50, "batch/epochs not 300/50")?;
    ensure(echo["finetune"]["alpha"] == 0.1, "alpha is not 0.1")?;
    let sched: Vec<(u64, Option<u64>)> = ["1trial", "10pct", "20pct", "90pct"]
        .iter()
        .map(|b| (echo["finetune_schedule"][b]["epochs"].as_u64().unwrap_or(0), echo["finetune_schedule"][b]["patience"].as_u64()))
        .collect();
    ensure(sched == [(1, None), (20, None), (20, None), (20, Some(10))], format!("fine-tune schedule {sched:?}"))?;
    ensure(default_threshold(9) == 5.0 && default_threshold(5) == 3.0, "rating thresholds")?;

    let spec = SynthSpec { n_channels: 32, fs: 128.0, n_trials: 2, trial_secs: 60.0, ..SynthSpec::default() };
    let mut trials = generate_synthetic(&spec, 8).map_err(|e| e.to_string())?;
    let data = prepare(&trials, &Montage::standard_1020_32(), &cfg.prep).map_err(|e| e.to_string())?;
    ensure(data.len() == 120 && data.window_len() == 128, format!("{} windows of {}", data.len(), data.window_len()))?;
    ensure(data.labels[..60].iter().all(|&y| y == 0) && data.labels[60..].iter().all(|&y| y == 1), "9-point labels")?;
    for (t, rating) in trials.iter_mut().zip([3.0, 3.5]) {
        t.scale_max = 5;
        t.ratings = stann_core::signal::Ratings { valence: rating, arousal: 3.0, dominance: 3.0 };
    }
    let five = prepare(&trials, &Montage::standard_1020_32(), &cfg.prep).map_err(|e| e.to_string())?;
    ensure(five.labels[0] == 0 && five.labels[60] == 1, "5-point threshold is not 3")?;

    let report = cross_validate(
        &StannConfig::tiny(32, 128),
        &data,
        &Hyper { epochs: 1, batch: 300, folds: 2, ..Hyper::default() },
    )
    .map_err(|e| e.to_string())?;
    let summary = report.summary_json(&echo);
    ensure(summary["config"] == echo, "results summary does not echo the configuration")?;
    Ok("window 128, 60 windows/trial, thresholds 5 and 3, batch 300, epochs 50, alpha 0.1, schedule 1/20/20/20+p10; echoed".into())
}

// 9. Persistence

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = SynthSpec { n_channels: 32, n_trials: 4, trial_secs: 3.0, ..SynthSpec::default() };
    let data = Dataset { montage: Montage::standard_1020_32(), trials: generate_synthetic(&spec, 3).map_err(|e| e.to_string())? };
    write_dataset(dir.path().join("data"), &data).map_err(|e| e.to_string())?;
    let back = read_dataset(dir.path().join("data")).map_err(|e| e.to_string())?;
    let bits = |d: &Dataset| -> Vec<u32> {
        d.trials.iter().flat_map(|t| t.pretrial.iter().chain(t.data.iter()).map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
    };
    ensure(back == data && bits(&back) == bits(&data), "dataset round trip differs")?;

    let mut model = StannModel::build(StannConfig::tiny(8, 16), 5).map_err(|e| e.to_string())?;
    let mut state = model.optimizer_state(Optimizer::default(), 1.0);
    let mut r = rng(6);
    let x = Array3::from_shape_vec((6, 8, 16), uniform(&mut r, 6 * 8 * 16, 1.0)).unwrap();
    let labels = [0u8, 1, 0, 1, 1, 0];
    let batch = Batch::from_windows(x.view());
    for _ in 0..3 {
        model.train_step(&batch, &labels, &mut state).map_err(|e| e.to_string())?;
    }
    model.set_trainable("c1_2", false).map_err(|e| e.to_string())?;
    write_checkpoint(dir.path().join("ck"), &model, Some(&state)).map_err(|e| e.to_string())?;
    let mut ck = read_checkpoint(dir.path().join("ck")).map_err(|e| e.to_string())?;
    ensure(ck.model == model && ck.optimizer.as_ref() == Some(&state), "checkpoint round trip differs")?;
    let a = model.forward(&batch).map_err(|e| e.to_string())?;
    let b = ck.model.forward(&batch).map_err(|e| e.to_string())?;
    ensure(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), "eval outputs differ after reload")?;
    model.train_step(&batch, &labels, &mut state).map_err(|e| e.to_string())?;
    let mut st = ck.optimizer.take().expect("saved");
    ck.model.train_step(&batch, &labels, &mut st).map_err(|e| e.to_string())?;
    ensure(ck.model == model && st == state, "resumed step differs from uninterrupted step")?;
    Ok("dataset payloads, checkpoint (flags, rng, optimizer) and resumed step are bit-identical".into())
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 9] = [
        ("parameter table", table_parity),
        ("spectral suite", spectral_suite),
        ("oracle equivalence", oracles),
        ("gradient integrity", gradient_integrity),
        ("learning surrogate", learning_surrogate),
        ("smoothing benefit", smoothing_benefit),
        ("transfer suite", tl_suite),
        ("protocol constants", protocol_constants),
        ("persistence", persistence),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id} {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
