//! Fine-tuning a pre-trained model on a small calibration budget from a new
//! target: freeze schemes, budgeted selection and the scaled update.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{StannConfig, StannModel};
use crate::nn::Optimizer;
use crate::prep::WindowSet;
use crate::train::{evaluate_model, train_model, EarlyStopping, Hyper, Metrics};

/// Default learning-rate scale for fine-tuning.
pub const DEFAULT_ALPHA: f64 = 0.1;

/// Which blocks stay frozen during fine-tuning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FreezeScheme {
    /// `a` through `e`: a growing prefix of layers is frozen.
    Preset(char),
    Custom { name: String, frozen: Vec<String> },
}

/// Layers frozen by preset `a`..`e`, in order of addition. A conv "layer" is
/// one stage across all encoder columns.
fn preset_layers(config: &StannConfig, scheme: char) -> Result<Vec<String>> {
    let depth = match scheme {
        'a'..='e' => scheme as usize - 'a' as usize + 1,
        _ => return Err(Error::arg(format!("unknown freeze preset {scheme:?}; expected a-e"))),
    };
    let mut frozen = Vec::new();
    for level in 0..depth {
        if level < 3 {
            frozen.extend((0..config.columns.len()).map(|c| crate::model::conv_block_id(level, c)));
        } else {
            frozen.push(format!("bilstm{}", level - 2));
        }
    }
    Ok(frozen)
}

#[derive(Debug, Deserialize)]
struct CustomFile {
    name: Option<String>,
    frozen: Vec<String>,
}

impl FreezeScheme {
    pub fn name(&self) -> String {
        match self {
            FreezeScheme::Preset(c) => c.to_string(),
            FreezeScheme::Custom { name, .. } => name.clone(),
        }
    }

    /// Parses a custom scheme: `name = "..."` (optional) and `frozen = [block ids]`.
    pub fn from_toml(text: &str) -> Result<Self> {
        let f: CustomFile = toml::from_str(text).map_err(|e| Error::format(format!("freeze scheme: {e}")))?;
        Ok(FreezeScheme::Custom { name: f.name.unwrap_or_else(|| "custom".into()), frozen: f.frozen })
    }

    pub fn all_trainable() -> Self {
        FreezeScheme::Custom { name: "none".into(), frozen: Vec::new() }
    }

    pub fn frozen_blocks(&self, config: &StannConfig) -> Result<Vec<String>> {
        match self {
            FreezeScheme::Preset(c) => preset_layers(config, *c),
            FreezeScheme::Custom { frozen, .. } => Ok(frozen.clone()),
        }
    }
}

impl FromStr for FreezeScheme {
    type Err = Error;

    /// `a`..`e`, or a path to a custom scheme file.
    fn from_str(s: &str) -> Result<Self> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c @ 'a'..='e'), None) => Ok(FreezeScheme::Preset(c)),
            _ => FreezeScheme::from_toml(&std::fs::read_to_string(s)?),
        }
    }
}

/// Sets every block's trainability from `scheme` and returns the number of
/// parameters left trainable.
pub fn apply_scheme(model: &mut StannModel, scheme: &FreezeScheme) -> Result<usize> {
    let frozen = scheme.frozen_blocks(&model.config)?;
    let unknown: Vec<&str> =
        frozen.iter().map(String::as_str).filter(|id| model.store.index_of(id).is_none()).collect();
    if !unknown.is_empty() {
        return Err(Error::arg(format!("unknown block ids in scheme {}: {}", scheme.name(), unknown.join(", "))));
    }
    for block in &mut model.store.blocks {
        block.trainable = !frozen.contains(&block.id);
    }
    Ok(model.store.retrainable())
}

/// Amount of target data available for calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Budget {
    #[serde(rename = "1trial")]
    OneTrialPerClass,
    #[serde(rename = "10pct")]
    Pct10,
    #[serde(rename = "20pct")]
    Pct20,
    #[serde(rename = "90pct")]
    Pct90,
}

impl Budget {
    pub const ALL: [Budget; 4] = [Budget::OneTrialPerClass, Budget::Pct10, Budget::Pct20, Budget::Pct90];

    pub fn name(self) -> &'static str {
        match self {
            Budget::OneTrialPerClass => "1trial",
            Budget::Pct10 => "10pct",
            Budget::Pct20 => "20pct",
            Budget::Pct90 => "90pct",
        }
    }

    /// Fine-tuning epochs for this budget.
    pub fn epochs(self) -> usize {
        match self {
            Budget::OneTrialPerClass => 1,
            _ => 20,
        }
    }

    pub fn patience(self) -> Option<usize> {
        (self == Budget::Pct90).then_some(10)
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Budget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Budget::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown budget {s:?}; expected 1trial, 10pct, 20pct or 90pct")))
    }
}

/// Calibration and held-out test indices into a target window set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub calibration: Vec<usize>,
    pub test: Vec<usize>,
}

/// Holds out a stratified 10% of the windows for testing and draws the
/// calibration budget from the rest.
pub fn select_budget(data: &WindowSet, budget: Budget, seed: u64) -> Result<Split> {
    if data.len() < 10 {
        return Err(Error::data(format!("{} target windows are too few for a 10% test split", data.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &y) in data.labels.iter().enumerate() {
        by_class[y as usize].push(i);
    }
    let mut test = Vec::new();
    let mut rest: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for c in 0..2 {
        by_class[c].shuffle(&mut rng);
        let take = (by_class[c].len() as f64 * 0.1).round() as usize;
        test.extend_from_slice(&by_class[c][..take]);
        rest[c] = by_class[c][take..].to_vec();
    }
    let mut calibration = match budget {
        Budget::Pct90 => rest.concat(),
        Budget::Pct10 | Budget::Pct20 => {
            let frac = if budget == Budget::Pct10 { 0.1 } else { 0.2 };
            let mut out = Vec::new();
            for part in &rest {
                let want = (by_class_len(data, part) as f64 * frac).round() as usize;
                out.extend_from_slice(&part[..want.min(part.len())]);
            }
            out
        }
        Budget::OneTrialPerClass => {
            let mut out = Vec::new();
            for (c, part) in rest.iter().enumerate() {
                let mut trials: Vec<usize> = part.iter().map(|&i| data.groups[i]).collect();
                trials.sort_unstable();
                trials.dedup();
                let &trial = trials.choose(&mut rng).ok_or_else(|| {
                    Error::arg(format!("budget {budget} needs a class-{c} trial outside the test split"))
                })?;
                out.extend(part.iter().copied().filter(|&i| data.groups[i] == trial));
            }
            out
        }
    };
    if calibration.is_empty() {
        return Err(Error::arg(format!("budget {budget} selects no windows from {} available", rest.concat().len())));
    }
    calibration.sort_unstable();
    test.sort_unstable();
    Ok(Split { calibration, test })
}

/// Class share of the whole set, so percentages refer to all target windows.
fn by_class_len(data: &WindowSet, part: &[usize]) -> usize {
    let class = data.labels[part.first().copied().unwrap_or(0)];
    data.labels.iter().filter(|&&y| y == class).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    /// Learning-rate scale in (0, 1].
    pub alpha: f64,
    pub optimizer: Optimizer,
    pub budget: Budget,
    /// Overrides the budget's epoch schedule.
    pub epochs: Option<usize>,
    pub batch: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            optimizer: Optimizer::default(),
            budget: Budget::Pct20,
            epochs: None,
            batch: 300,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn hyper(&self, lr_scale: f64) -> Hyper {
        Hyper {
            epochs: self.epochs.unwrap_or(self.budget.epochs()),
            batch: self.batch,
            optimizer: self.optimizer,
            lr_scale,
            seed: self.seed,
            early_stopping: self.budget.patience().map(|patience| EarlyStopping { patience, val_fraction: 0.1 }),
            ..Hyper::default()
        }
    }
}

/// Copies `pretrained`, applies `scheme`, trains the trainable blocks on the
/// calibration windows with learning rate `alpha * lr`, and scores the result
/// on the test windows.
pub fn finetune(
    pretrained: &StannModel,
    scheme: &FreezeScheme,
    data: &WindowSet,
    split: &Split,
    cfg: &FinetuneConfig,
) -> Result<(StannModel, Metrics)> {
    if !(cfg.alpha >= 0.0 && cfg.alpha <= 1.0) {
        return Err(Error::arg(format!("alpha {} outside [0, 1]", cfg.alpha)));
    }
    check_channels(&pretrained.config, data)?;
    let mut model = pretrained.clone();
    apply_scheme(&mut model, scheme)?;
    let hyper = cfg.hyper(cfg.alpha);
    let mut state = model.optimizer_state(hyper.optimizer, hyper.lr_scale);
    train_model(&mut model, &mut state, data, &split.calibration, &hyper, cfg.seed)?;
    let metrics = evaluate_model(&model, data, &split.test)?;
    Ok((model, metrics))
}

/// Baseline: a fresh model trained only on the calibration windows at the full learning rate.
pub fn train_from_scratch(config: &StannConfig, data: &WindowSet, split: &Split, cfg: &FinetuneConfig) -> Result<(StannModel, Metrics)> {
    check_channels(config, data)?;
    let mut model = StannModel::build(config.clone(), cfg.seed)?;
    let hyper = cfg.hyper(1.0);
    let mut state = model.optimizer_state(hyper.optimizer, 1.0);
    train_model(&mut model, &mut state, data, &split.calibration, &hyper, cfg.seed)?;
    let metrics = evaluate_model(&model, data, &split.test)?;
    Ok((model, metrics))
}

fn check_channels(config: &StannConfig, data: &WindowSet) -> Result<()> {
    if data.n_channels() != config.n_channels || data.window_len() != config.timesteps {
        return Err(Error::data(format!(
            "target windows are {}x{} ({}), model expects {}x{}; select the model's sensors first",
            data.n_channels(),
            data.window_len(),
            data.channels.join(","),
            config.n_channels,
            config.timesteps
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TlRow {
    pub scheme: String,
    pub budget: String,
    pub seed: u64,
    pub accuracy: f64,
    pub f1: f64,
}

pub fn write_tl_report<W: Write>(rows: &[TlRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
