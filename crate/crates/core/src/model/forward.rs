//! Forward and backward passes of the two-branch network over a parameter store.

use ndarray::{concatenate, s, Array1, Array2, Array3, Array4, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::StannConfig;
use super::params::{Grads, Layout, ParamBlock, ParamStore};
use crate::error::{Error, Result};
use crate::nn::lstm::BiLstmTrace;
use crate::nn::norm::BatchStats;
use crate::nn::{
    attention_backward, attention_pool, avgpool2d, avgpool2d_backward, batchnorm, batchnorm_backward,
    bilstm_backward, bilstm_forward, conv2d_same, conv2d_same_backward, dense, dense_backward, dropout, relu,
    relu_backward, softmax_rows, AttentionParams, BatchNormCache, LstmCellParams, Mode,
};
use crate::par;

/// Both input views of a batch of windows: `in1` is `b x n x k x 1` for the
/// convolutional branch, `in2` is `b x k x n` for the recurrent branch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub in1: Array4<f64>,
    pub in2: Array3<f64>,
}

impl Batch {
    /// Builds both views from windows laid out `batch x channels x time`.
    pub fn from_windows(x: ArrayView3<f64>) -> Self {
        let (b, n, k) = x.dim();
        let in1 = x.as_standard_layout().into_owned().into_shape_with_order((b, n, k, 1)).expect("contiguous");
        let in2 = x.permuted_axes([0, 2, 1]).as_standard_layout().into_owned();
        Self { in1, in2 }
    }

    pub fn len(&self) -> usize {
        self.in1.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, config: &StannConfig) -> Result<()> {
        let (b1, n, k, c) = self.in1.dim();
        let (b2, k2, n2) = self.in2.dim();
        if b1 != b2 {
            return Err(Error::arg(format!("input views disagree on batch size: {b1} vs {b2}")));
        }
        if b1 == 0 {
            return Err(Error::arg("empty batch"));
        }
        if (n, k, c) != (config.n_channels, config.timesteps, 1) || (k2, n2) != (config.timesteps, config.n_channels) {
            return Err(Error::arg(format!(
                "inputs {n}x{k}x{c} / {k2}x{n2} do not match the model's {}x{} windows",
                config.n_channels, config.timesteps
            )));
        }
        Ok(())
    }
}

struct StageTrace {
    input: Array4<f64>,
    bn: BatchNormCache,
    act: Array4<f64>,
    mask: Option<Array4<f64>>,
}

struct SampleTrace {
    l1: BiLstmTrace,
    m1: Option<Array2<f64>>,
    l2: BiLstmTrace,
    m2: Option<Array2<f64>>,
    h2: Array2<f64>,
    alpha: Array1<f64>,
}

/// Everything the backward pass needs, plus intermediate outputs used for
/// feature maps and embeddings.
pub struct Trace {
    columns: Vec<Vec<StageTrace>>,
    merged: Array4<f64>,
    ste: Array4<f64>,
    samples: Vec<SampleTrace>,
    fused: Array2<f64>,
    hidden: Array2<f64>,
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
    /// Batch statistics of every normalization run in training mode, by block index.
    pub bn_stats: Vec<(usize, BatchStats)>,
}

impl Trace {
    /// Output of a column's last conv stage (after normalization and ReLU).
    pub fn column_output(&self, column: usize) -> Option<&Array4<f64>> {
        self.columns.get(column).map(|c| &c[2].act)
    }

    /// Concatenated column outputs before the merge convolution.
    pub fn merged(&self) -> &Array4<f64> {
        &self.merged
    }

    /// Flattened encoder map followed by the attention vector, `b x fusion width`.
    pub fn fused(&self) -> &Array2<f64> {
        &self.fused
    }

    /// Encoder map after the merge convolution, `b x n/4 x k/4 x 1`.
    pub fn ste_map(&self) -> &Array4<f64> {
        &self.ste
    }

    /// Hidden dense activations, `b x dense`.
    pub fn embeddings(&self) -> &Array2<f64> {
        &self.hidden
    }

    /// Attention weights of one window.
    pub fn attention_weights(&self, sample: usize) -> &Array1<f64> {
        &self.samples[sample].alpha
    }
}

fn kshape(block: &ParamBlock) -> [usize; 4] {
    let s = &block.tensor("kernel").shape;
    [s[0], s[1], s[2], s[3]]
}

fn sub_rng(step_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
    rng.set_stream(stream);
    rng
}

fn cell<'a>(block: &'a ParamBlock, dir: &str, input: usize, hidden: usize) -> LstmCellParams<'a> {
    LstmCellParams::new(
        input,
        hidden,
        &block.tensor(&format!("{dir}_weights")).data,
        &block.tensor(&format!("{dir}_bias")).data,
    )
    .expect("recurrent block shapes are fixed at construction")
}

fn attention_params(block: &ParamBlock) -> AttentionParams<'_> {
    AttentionParams { weights: &block.tensor("weights").data, bias: block.tensor("bias").data[0] }
}

/// Runs the network. In `Mode::Train`, normalization uses batch statistics for
/// trainable blocks (frozen blocks use their running statistics) and dropout
/// masks are drawn from streams derived from `step_seed`, so a given seed
/// gives a deterministic pass.
pub fn forward(store: &ParamStore, config: &StannConfig, batch: &Batch, mode: Mode, step_seed: u64) -> Result<Trace> {
    batch.check(config)?;
    let layout = Layout { columns: config.columns.len() };
    let b = batch.len();
    let mut bn_stats = Vec::new();

    let mut columns = Vec::with_capacity(config.columns.len());
    let mut outputs = Vec::with_capacity(config.columns.len());
    for c in 0..config.columns.len() {
        let mut x = batch.in1.clone();
        let mut stages = Vec::with_capacity(3);
        for s in 0..3 {
            let bi = layout.conv(s, c);
            let block = &store.blocks[bi];
            let z = conv2d_same(&x, &block.tensor("kernel").data, kshape(block), &block.tensor("bias").data)?;
            let bn_mode = if mode == Mode::Train && block.trainable { Mode::Train } else { Mode::Eval };
            let (y, bn, stats) = batchnorm(
                &z,
                &block.tensor("gamma").data,
                &block.tensor("beta").data,
                &block.tensor("running_mean").data,
                &block.tensor("running_var").data,
                bn_mode,
            );
            if let Some(st) = stats {
                bn_stats.push((bi, st));
            }
            let act = relu(&y);
            if s < 2 {
                let pooled = avgpool2d(&act);
                let mut rng = sub_rng(step_seed, (c * 2 + s) as u64);
                let (next, mask) = dropout(&pooled, config.ste_dropout[s], mode, &mut rng);
                stages.push(StageTrace { input: x, bn, act, mask });
                x = next;
            } else {
                outputs.push(act.clone());
                stages.push(StageTrace { input: x, bn, act, mask: None });
                break;
            }
        }
        columns.push(stages);
    }

    let views: Vec<_> = outputs.iter().map(|o| o.view()).collect();
    let merged = concatenate(Axis(3), &views).expect("columns share spatial dims");
    let c4 = &store.blocks[layout.merge()];
    let ste = conv2d_same(&merged, &c4.tensor("kernel").data, kshape(c4), &c4.tensor("bias").data)?;
    let (_, h4, w4, _) = ste.dim();
    let flat = ste.clone().into_shape_with_order((b, h4 * w4)).expect("contiguous");

    let (n, h) = (config.n_channels, config.hidden);
    let (r1, r2) = (&store.blocks[layout.bilstm(0)], &store.blocks[layout.bilstm(1)]);
    let att = &store.blocks[layout.attention()];
    let samples: Vec<Result<(SampleTrace, Array1<f64>)>> = par::map_indexed(b, |i| {
        let x = batch.in2.index_axis(Axis(0), i);
        let mut rng = sub_rng(step_seed, 64 + i as u64);
        let (h1, l1) = bilstm_forward(x, &cell(r1, "fwd", n, h), &cell(r1, "bwd", n, h))?;
        let (h1, m1) = dropout(&h1, config.ran_dropout[0], mode, &mut rng);
        let (h2, l2) = bilstm_forward(h1.view(), &cell(r2, "fwd", 2 * h, h), &cell(r2, "bwd", 2 * h, h))?;
        let (h2, m2) = dropout(&h2, config.ran_dropout[1], mode, &mut rng);
        let (v, alpha) = attention_pool(h2.view(), &attention_params(att))?;
        Ok((SampleTrace { l1, m1, l2, m2, h2, alpha }, v))
    });
    let mut traces = Vec::with_capacity(b);
    let mut v_all = Array2::zeros((b, 2 * h));
    for (i, r) in samples.into_iter().enumerate() {
        let (t, v) = r?;
        v_all.row_mut(i).assign(&v);
        traces.push(t);
    }

    let fused = concatenate(Axis(1), &[flat.view(), v_all.view()]).expect("same batch");
    let d = &store.blocks[layout.dense()];
    let hidden = relu(&dense(&fused, &d.tensor("weights").data, &d.tensor("bias").data));
    let cls = &store.blocks[layout.classifier()];
    let logits = dense(&hidden, &cls.tensor("weights").data, &cls.tensor("bias").data);
    let probs = softmax_rows(&logits);

    Ok(Trace { columns, merged, ste, samples: traces, fused, hidden, logits, probs, bn_stats })
}

/// Gradients of a scalar loss with respect to every trainable tensor, given
/// the gradient `dlogits` of that loss with respect to the logits.
pub fn backward(store: &ParamStore, config: &StannConfig, trace: &Trace, dlogits: &Array2<f64>) -> Result<Grads> {
    let layout = Layout { columns: config.columns.len() };
    let mut grads = store.zero_grads();
    let b = dlogits.nrows();

    let cls = &store.blocks[layout.classifier()];
    let (dh, dw, db) = dense_backward(&trace.hidden, &cls.tensor("weights").data, dlogits);
    grads[layout.classifier()] = vec![dw, db];
    let dpre = relu_backward(&dh, &trace.hidden);
    let d = &store.blocks[layout.dense()];
    let (dfused, dw, db) = dense_backward(&trace.fused, &d.tensor("weights").data, &dpre);
    grads[layout.dense()] = vec![dw, db];

    let (_, h4, w4, _) = trace.ste.dim();
    let f = h4 * w4;
    let dste = dfused.slice(s![.., ..f]).to_owned().into_shape_with_order((b, h4, w4, 1)).expect("contiguous");
    let c4 = &store.blocks[layout.merge()];
    let g = conv2d_same_backward(&trace.merged, &c4.tensor("kernel").data, kshape(c4), &dste, true)?;
    grads[layout.merge()] = vec![g.kernel, g.bias];
    let dmerged = g.input.expect("requested");

    let mut off = 0;
    for (c, stages) in trace.columns.iter().enumerate() {
        let oc = config.columns[c].out_channels();
        let mut dact = dmerged.slice(s![.., .., .., off..off + oc]).to_owned();
        off += oc;
        for s in (0..3).rev() {
            let st = &stages[s];
            let bi = layout.conv(s, c);
            let block = &store.blocks[bi];
            if s == 0 && !block.trainable {
                break;
            }
            let dy = relu_backward(&dact, &st.act);
            let gamma = &block.tensor("gamma").data;
            let (dz, dgamma, dbeta) = batchnorm_backward(&dy, &st.bn, gamma);
            let g = conv2d_same_backward(&st.input, &block.tensor("kernel").data, kshape(block), &dz, s > 0)?;
            grads[bi] = vec![g.kernel, g.bias, dgamma, dbeta, Vec::new(), Vec::new()];
            if s > 0 {
                let mut dpool = g.input.expect("requested");
                if let Some(mask) = &stages[s - 1].mask {
                    dpool *= mask;
                }
                dact = avgpool2d_backward(&dpool, stages[s - 1].act.dim());
            }
        }
    }

    let (n, h) = (config.n_channels, config.hidden);
    let (r1, r2) = (&store.blocks[layout.bilstm(0)], &store.blocks[layout.bilstm(1)]);
    let att = &store.blocks[layout.attention()];
    let need_first = r1.trainable;
    let dv = dfused.slice(s![.., f..]);
    let per_sample = par::map_indexed(b, |i| {
        let st = &trace.samples[i];
        let ag = attention_backward(st.h2.view(), &st.alpha, &attention_params(att), &dv.row(i).to_owned());
        let mut dh2 = ag.input;
        if let Some(m) = &st.m2 {
            dh2 *= m;
        }
        let (mut dh1, gf2, gb2) =
            bilstm_backward(dh2.view(), &st.l2, &cell(r2, "fwd", 2 * h, h), &cell(r2, "bwd", 2 * h, h));
        let first = need_first.then(|| {
            if let Some(m) = &st.m1 {
                dh1 *= m;
            }
            let (_, gf1, gb1) = bilstm_backward(dh1.view(), &st.l1, &cell(r1, "fwd", n, h), &cell(r1, "bwd", n, h));
            vec![gf1.weights, gf1.bias, gb1.weights, gb1.bias]
        });
        (vec![ag.weights, vec![ag.bias]], vec![gf2.weights, gf2.bias, gb2.weights, gb2.bias], first)
    });
    for (ga, g2, g1) in per_sample {
        add_into(&mut grads[layout.attention()], &ga);
        add_into(&mut grads[layout.bilstm(1)], &g2);
        if let Some(g1) = g1 {
            add_into(&mut grads[layout.bilstm(0)], &g1);
        }
    }
    Ok(grads)
}

fn add_into(acc: &mut [Vec<f64>], parts: &[Vec<f64>]) {
    for (a, p) in acc.iter_mut().zip(parts) {
        a.iter_mut().zip(p).for_each(|(x, y)| *x += y);
    }
}
