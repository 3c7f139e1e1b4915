//! The spatio-temporal attention network: a multi-column convolutional
//! encoder on `n x k` windows, a BiLSTM-attention branch on the transposed
//! `k x n` view, and a dense fusion head.

pub mod config;
pub mod forward;
pub mod params;

use ndarray::{s, Array2, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{ConvStage, StannConfig, SteColumnSpec, CLASSES};
pub use forward::{backward, forward, Batch, Trace};
pub use params::{conv_block_id, flat_grads, Grads, Layout, ParamBlock, ParamStore, ParamTensor, Role};

use crate::error::{Error, Result};
use crate::nn::{softmax_xent, Mode, Optimizer, OptimizerState};

/// Windows per forward call when predicting, to bound memory.
const PREDICT_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StannModel {
    pub config: StannConfig,
    pub store: ParamStore,
    pub seed: u64,
    /// Source of per-step dropout seeds.
    pub rng: ChaCha8Rng,
}

/// One row of the parameter table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TableRow {
    pub name: String,
    pub kind: &'static str,
    pub output_shape: Vec<usize>,
    /// Count including batch-norm running statistics.
    pub parity_count: Option<usize>,
    pub trainable_count: Option<usize>,
}

impl StannModel {
    pub fn build(config: StannConfig, seed: u64) -> Result<Self> {
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        let store = ParamStore::init(&config, &mut init)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Self { config, store, seed, rng })
    }

    pub fn layout(&self) -> Layout {
        Layout { columns: self.config.columns.len() }
    }

    /// Evaluation-mode pass.
    pub fn trace(&self, batch: &Batch) -> Result<Trace> {
        forward(&self.store, &self.config, batch, Mode::Eval, 0)
    }

    /// Class probabilities, `b x 2`, evaluation mode.
    pub fn forward(&self, batch: &Batch) -> Result<Array2<f64>> {
        Ok(self.trace(batch)?.probs)
    }

    /// Probabilities for windows `b x n x k`, processed in chunks.
    pub fn predict_proba(&self, windows: ArrayView3<f64>) -> Result<Array2<f64>> {
        self.map_chunks(windows, CLASSES, |t| t.probs.clone())
    }

    pub fn predict(&self, windows: ArrayView3<f64>) -> Result<Vec<u8>> {
        let p = self.predict_proba(windows)?;
        Ok(p.rows().into_iter().map(|r| u8::from(r[1] > r[0])).collect())
    }

    /// Hidden dense activations for each window.
    pub fn embed(&self, windows: ArrayView3<f64>) -> Result<Array2<f64>> {
        self.map_chunks(windows, self.config.dense, |t| t.embeddings().clone())
    }

    fn map_chunks(&self, windows: ArrayView3<f64>, width: usize, f: impl Fn(&Trace) -> Array2<f64>) -> Result<Array2<f64>> {
        let b = windows.dim().0;
        let mut out = Array2::zeros((b, width));
        let mut start = 0;
        while start < b {
            let end = (start + PREDICT_CHUNK).min(b);
            let batch = Batch::from_windows(windows.slice(s![start..end, .., ..]));
            out.slice_mut(s![start..end, ..]).assign(&f(&self.trace(&batch)?));
            start = end;
        }
        Ok(out)
    }

    /// Fresh optimizer state with moment buffers for every trainable tensor.
    pub fn optimizer_state(&self, optimizer: Optimizer, lr_scale: f64) -> OptimizerState {
        OptimizerState::new(optimizer, lr_scale, &self.store.slot_lens())
    }

    /// One optimization step on a batch; only blocks flagged trainable change.
    pub fn train_step(&mut self, batch: &Batch, labels: &[u8], state: &mut OptimizerState) -> Result<f64> {
        if labels.len() != batch.len() {
            return Err(Error::arg(format!("{} labels for {} windows", labels.len(), batch.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= CLASSES) {
            return Err(Error::arg(format!("label {bad} outside 0..{CLASSES}")));
        }
        let step_seed: u64 = self.rng.random();
        let trace = forward(&self.store, &self.config, batch, Mode::Train, step_seed)?;
        let xent = softmax_xent(&trace.logits, labels);
        if !xent.loss.is_finite() {
            return Err(self.numeric_failure(&trace, xent.loss, state.t + 1));
        }
        let grads = backward(&self.store, &self.config, &trace, &xent.grad)?;
        if grads.iter().flatten().flatten().any(|g| !g.is_finite()) {
            return Err(self.numeric_failure(&trace, xent.loss, state.t + 1));
        }
        state.begin_step();
        for (slot, (bi, ti)) in self.store.slots().into_iter().enumerate() {
            if self.store.blocks[bi].trainable {
                let data = &mut self.store.blocks[bi].tensors[ti].value.data;
                state.update_slot(slot, data, &grads[bi][ti]);
            }
        }
        for (bi, stats) in &trace.bn_stats {
            let block = &mut self.store.blocks[*bi];
            let mut mean = block.tensor("running_mean").data.clone();
            let mut var = block.tensor("running_var").data.clone();
            stats.update_running(&mut mean, &mut var, crate::nn::norm::BN_MOMENTUM);
            block.tensor_mut("running_mean").data = mean.into_iter().map(|v| v as f32 as f64).collect();
            block.tensor_mut("running_var").data = var.into_iter().map(|v| v as f32 as f64).collect();
        }
        Ok(xent.loss)
    }

    fn numeric_failure(&self, trace: &Trace, loss: f64, step: u64) -> Error {
        let peak = trace.logits.iter().fold(0.0f64, |m, v| if v.is_finite() { m.max(v.abs()) } else { f64::INFINITY });
        let bad: Vec<&str> = self
            .store
            .blocks
            .iter()
            .filter(|b| !b.tensors.iter().all(|t| t.value.all_finite()))
            .map(|b| b.id.as_str())
            .collect();
        Error::Numeric(format!(
            "non-finite loss or gradient at step {step}: loss {loss}, max |logit| {peak}, non-finite blocks {bad:?}"
        ))
    }

    pub fn set_trainable(&mut self, id: &str, trainable: bool) -> Result<()> {
        let i = self.store.index_of(id).ok_or_else(|| Error::arg(format!("unknown block id {id:?}")))?;
        self.store.blocks[i].trainable = trainable;
        Ok(())
    }

    /// Rows mirroring the encoder table (input, conv stages, poolings, merge,
    /// merge conv) followed by the recurrent and dense blocks.
    pub fn parameter_table(&self) -> Vec<TableRow> {
        let cfg = &self.config;
        let layout = self.layout();
        let (n, k) = (cfg.n_channels, cfg.timesteps);
        let dims = [(n, k), (n / 2, k / 2), (n / 4, k / 4)];
        let mut rows = vec![TableRow {
            name: "IN1".into(),
            kind: "input",
            output_shape: vec![n, k, 1],
            parity_count: None,
            trainable_count: None,
        }];
        for s in 0..3 {
            for (c, col) in cfg.columns.iter().enumerate() {
                let block = &self.store.blocks[layout.conv(s, c)];
                rows.push(TableRow {
                    name: block.id.to_uppercase(),
                    kind: "conv+bn",
                    output_shape: vec![dims[s].0, dims[s].1, col.stages[s].filters],
                    parity_count: Some(block.count()),
                    trainable_count: Some(block.trainable_count()),
                });
            }
            if s < 2 {
                for (c, col) in cfg.columns.iter().enumerate() {
                    rows.push(TableRow {
                        name: format!("P{}_{}", s + 1, c + 1),
                        kind: "pool",
                        output_shape: vec![dims[s + 1].0, dims[s + 1].1, col.stages[s].filters],
                        parity_count: None,
                        trainable_count: None,
                    });
                }
            }
        }
        let (h4, w4) = cfg.ste_dims();
        rows.push(TableRow {
            name: "CON1".into(),
            kind: "concatenate",
            output_shape: vec![h4, w4, cfg.merged_channels()],
            parity_count: None,
            trainable_count: None,
        });
        let shapes = [
            (layout.merge(), vec![h4, w4, 1], "conv"),
            (layout.bilstm(0), vec![k, 2 * cfg.hidden], "bilstm"),
            (layout.bilstm(1), vec![k, 2 * cfg.hidden], "bilstm"),
            (layout.attention(), vec![2 * cfg.hidden], "attention"),
            (layout.dense(), vec![cfg.dense], "dense"),
            (layout.classifier(), vec![CLASSES], "dense"),
        ];
        for (bi, shape, kind) in shapes {
            let block = &self.store.blocks[bi];
            rows.push(TableRow {
                name: block.id.to_uppercase(),
                kind,
                output_shape: shape,
                parity_count: Some(block.count()),
                trainable_count: Some(block.trainable_count()),
            });
        }
        rows
    }
}
