//! Named parameter blocks. Every tensor belongs to exactly one block, and
//! trainability is a per-block flag.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{StannConfig, CLASSES};
use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Updated by the optimizer.
    Trainable,
    /// Batch-norm running statistics, updated by forward passes in training.
    Running,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub role: Role,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub id: String,
    pub tensors: Vec<ParamTensor>,
    pub trainable: bool,
}

impl ParamBlock {
    pub fn tensor(&self, name: &str) -> &Tensor {
        &self.tensors.iter().find(|t| t.name == name).unwrap_or_else(|| panic!("{}: no tensor {name}", self.id)).value
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut Tensor {
        let id = self.id.clone();
        &mut self.tensors.iter_mut().find(|t| t.name == name).unwrap_or_else(|| panic!("{id}: no tensor {name}")).value
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.role == Role::Trainable).map(|t| t.value.len()).sum()
    }
}

/// Block indices for a given configuration. Order: conv stages (stage-major,
/// then column), the merge conv, both recurrent layers, attention, the hidden
/// dense layer and the classifier.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub columns: usize,
}

impl Layout {
    pub fn conv(&self, stage: usize, column: usize) -> usize {
        stage * self.columns + column
    }
    pub fn merge(&self) -> usize {
        3 * self.columns
    }
    pub fn bilstm(&self, layer: usize) -> usize {
        3 * self.columns + 1 + layer
    }
    pub fn attention(&self) -> usize {
        3 * self.columns + 3
    }
    pub fn dense(&self) -> usize {
        3 * self.columns + 4
    }
    pub fn classifier(&self) -> usize {
        3 * self.columns + 5
    }
    pub fn n_blocks(&self) -> usize {
        3 * self.columns + 6
    }
}

pub fn conv_block_id(stage: usize, column: usize) -> String {
    format!("c{}_{}", stage + 1, column + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub blocks: Vec<ParamBlock>,
}

/// Per-block, per-tensor gradients mirroring a [`ParamStore`]; running
/// statistics get empty vectors.
pub type Grads = Vec<Vec<Vec<f64>>>;

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], limit: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| quantize(rng.random_range(-limit..limit))).collect();
    Tensor { shape: shape.to_vec(), data }
}

fn trainable(name: &str, value: Tensor) -> ParamTensor {
    ParamTensor { name: name.into(), role: Role::Trainable, value }
}

fn running(name: &str, value: Tensor) -> ParamTensor {
    ParamTensor { name: name.into(), role: Role::Running, value }
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl ParamStore {
    /// Initializes every block from `rng`: Glorot-uniform convolution and
    /// dense weights, `U(-1/sqrt(H), 1/sqrt(H))` recurrent weights, zero biases,
    /// unit batch-norm scale. Values are rounded to `f32`.
    pub fn init<R: Rng>(config: &StannConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::new();
        for s in 0..3 {
            for (c, col) in config.columns.iter().enumerate() {
                let st = col.stages[s];
                let cin = if s == 0 { 1 } else { col.stages[s - 1].filters };
                let k = st.kernel;
                let f = st.filters;
                blocks.push(ParamBlock {
                    id: conv_block_id(s, c),
                    tensors: vec![
                        trainable("kernel", uniform(rng, &[k, k, cin, f], glorot(k * k * cin, k * k * f))),
                        trainable("bias", Tensor::zeros(&[f])),
                        trainable("gamma", Tensor::filled(&[f], 1.0)),
                        trainable("beta", Tensor::zeros(&[f])),
                        running("running_mean", Tensor::zeros(&[f])),
                        running("running_var", Tensor::filled(&[f], 1.0)),
                    ],
                    trainable: true,
                });
            }
        }
        let merged = config.merged_channels();
        blocks.push(ParamBlock {
            id: "c4".into(),
            tensors: vec![
                trainable("kernel", uniform(rng, &[1, 1, merged, 1], glorot(merged, 1))),
                trainable("bias", Tensor::zeros(&[1])),
            ],
            trainable: true,
        });
        let h = config.hidden;
        let rec = 1.0 / (h as f64).sqrt();
        for (layer, input) in [(1, config.n_channels), (2, 2 * h)] {
            blocks.push(ParamBlock {
                id: format!("bilstm{layer}"),
                tensors: vec![
                    trainable("fwd_weights", uniform(rng, &[4 * h, h + input], rec)),
                    trainable("fwd_bias", Tensor::zeros(&[4 * h])),
                    trainable("bwd_weights", uniform(rng, &[4 * h, h + input], rec)),
                    trainable("bwd_bias", Tensor::zeros(&[4 * h])),
                ],
                trainable: true,
            });
        }
        blocks.push(ParamBlock {
            id: "attention".into(),
            tensors: vec![
                trainable("weights", uniform(rng, &[2 * h], glorot(2 * h, 1))),
                trainable("bias", Tensor::zeros(&[1])),
            ],
            trainable: true,
        });
        let fw = config.fusion_width();
        blocks.push(ParamBlock {
            id: "dense".into(),
            tensors: vec![
                trainable("weights", uniform(rng, &[fw, config.dense], glorot(fw, config.dense))),
                trainable("bias", Tensor::zeros(&[config.dense])),
            ],
            trainable: true,
        });
        blocks.push(ParamBlock {
            id: "classifier".into(),
            tensors: vec![
                trainable("weights", uniform(rng, &[config.dense, CLASSES], glorot(config.dense, CLASSES))),
                trainable("bias", Tensor::zeros(&[CLASSES])),
            ],
            trainable: true,
        });
        Ok(Self { blocks })
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.id == id)
    }

    pub fn block(&self, id: &str) -> Result<&ParamBlock> {
        self.index_of(id).map(|i| &self.blocks[i]).ok_or_else(|| Error::arg(format!("unknown block id {id:?}")))
    }

    pub fn block_ids(&self) -> Vec<&str> {
        self.blocks.iter().map(|b| b.id.as_str()).collect()
    }

    /// Optimizer slots: `(block, tensor)` for every trainable-role tensor.
    pub fn slots(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            for (t, tensor) in block.tensors.iter().enumerate() {
                if tensor.role == Role::Trainable {
                    out.push((b, t));
                }
            }
        }
        out
    }

    pub fn slot_lens(&self) -> Vec<usize> {
        self.slots().into_iter().map(|(b, t)| self.blocks[b].tensors[t].value.len()).collect()
    }

    pub fn zero_grads(&self) -> Grads {
        self.blocks
            .iter()
            .map(|b| {
                b.tensors
                    .iter()
                    .map(|t| if t.role == Role::Trainable { vec![0.0; t.value.len()] } else { Vec::new() })
                    .collect()
            })
            .collect()
    }

    pub fn total_trainable(&self) -> usize {
        self.blocks.iter().map(ParamBlock::trainable_count).sum()
    }

    /// Trainable-role parameter count over blocks whose flag is set.
    pub fn retrainable(&self) -> usize {
        self.blocks.iter().filter(|b| b.trainable).map(ParamBlock::trainable_count).sum()
    }

    /// Trainable-role values of all blocks, flattened in slot order.
    pub fn flat_trainable(&self) -> Vec<f64> {
        self.slots().into_iter().flat_map(|(b, t)| self.blocks[b].tensors[t].value.data.clone()).collect()
    }

    pub fn set_flat_trainable(&mut self, flat: &[f64]) {
        let mut off = 0;
        for (b, t) in self.slots() {
            let v = &mut self.blocks[b].tensors[t].value.data;
            let n = v.len();
            v.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length");
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.tensors.iter().all(|t| t.value.all_finite()))
    }
}

/// Flattens gradients in slot order.
pub fn flat_grads(store: &ParamStore, grads: &Grads) -> Vec<f64> {
    store.slots().into_iter().flat_map(|(b, t)| grads[b][t].clone()).collect()
}
