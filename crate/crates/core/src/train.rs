//! Cross-validated training, metrics and result files.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, StannConfig, StannModel};
use crate::nn::{softmax_xent, Optimizer, OptimizerState};
use crate::par;
use crate::prep::WindowSet;
use crate::signal::Label;

/// Disjoint test folds covering every item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvPlan {
    pub folds: Vec<Vec<usize>>,
    pub seed: u64,
}

impl CvPlan {
    pub fn n_items(&self) -> usize {
        self.folds.iter().map(Vec::len).sum()
    }

    /// Complement of fold `f`, ascending.
    pub fn train_indices(&self, f: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = self.folds.iter().enumerate().filter(|&(g, _)| g != f).flat_map(|(_, v)| v.clone()).collect();
        idx.sort_unstable();
        idx
    }
}

/// Shuffles `0..n_items` and deals it into `folds` parts whose sizes differ by at most one.
pub fn kfold_split(n_items: usize, folds: usize, seed: u64) -> Result<CvPlan> {
    if folds < 2 || folds > n_items {
        return Err(Error::arg(format!("cannot split {n_items} items into {folds} folds")));
    }
    let mut idx: Vec<usize> = (0..n_items).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(CvPlan { folds: deal(&idx, folds), seed })
}

/// Like [`kfold_split`], with each class spread over the folds as evenly as
/// its size allows.
pub fn stratified_kfold(labels: &[Label], folds: usize, seed: u64) -> Result<CvPlan> {
    if folds < 2 || folds > labels.len() {
        return Err(Error::arg(format!("cannot split {} items into {folds} folds", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::with_capacity(labels.len());
    for class in [0, 1] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        order.extend(members);
    }
    let mut out = vec![Vec::new(); folds];
    for (j, i) in order.into_iter().enumerate() {
        out[j % folds].push(i);
    }
    out.iter_mut().for_each(|f| f.sort_unstable());
    Ok(CvPlan { folds: out, seed })
}

/// Like [`kfold_split`] but keeps every group (trial) inside a single fold.
pub fn grouped_kfold(groups: &[usize], folds: usize, seed: u64) -> Result<CvPlan> {
    let mut ids: Vec<usize> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if folds < 2 || folds > ids.len() {
        return Err(Error::arg(format!("cannot split {} groups into {folds} folds", ids.len())));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let group_folds = deal(&ids, folds);
    let mut fold_of = std::collections::HashMap::new();
    for (f, gs) in group_folds.iter().enumerate() {
        for &g in gs {
            fold_of.insert(g, f);
        }
    }
    let mut out = vec![Vec::new(); folds];
    for (i, g) in groups.iter().enumerate() {
        out[fold_of[g]].push(i);
    }
    Ok(CvPlan { folds: out, seed })
}

fn deal(items: &[usize], folds: usize) -> Vec<Vec<usize>> {
    let (base, extra) = (items.len() / folds, items.len() % folds);
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let len = base + usize::from(f < extra);
        let mut part = items[start..start + len].to_vec();
        part.sort_unstable();
        out.push(part);
        start += len;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// F1 of the positive ("high") class; 0 when there are no positive labels or predictions.
    pub f1: f64,
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn evaluate_metrics(predictions: &[Label], labels: &[Label]) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(Error::arg(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::arg("no predictions to score"));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p != 0, y != 0) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    let accuracy = (tp + tn) as f64 / labels.len() as f64;
    let denom = 2 * tp + fp + fn_;
    let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
    Ok(Metrics { accuracy, f1, tp, tn, fp, fn_ })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    /// Fraction of the training windows held out to monitor validation loss.
    pub val_fraction: f64,
}

/// Training hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    pub epochs: usize,
    pub batch: usize,
    pub optimizer: Optimizer,
    /// Learning-rate multiplier (1 when training from scratch).
    pub lr_scale: f64,
    pub seed: u64,
    pub folds: usize,
    /// Independent repetitions of the whole cross-validation.
    pub repeats: usize,
    /// Keep each trial's windows inside one fold.
    pub grouped: bool,
    pub early_stopping: Option<EarlyStopping>,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch: 300,
            optimizer: Optimizer::default(),
            lr_scale: 1.0,
            seed: 0,
            folds: 10,
            repeats: 1,
            grouped: false,
            early_stopping: None,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.folds < 2 || self.repeats == 0 {
            return Err(Error::arg("batch, folds and repeats must be positive (folds at least 2)"));
        }
        if !(self.lr_scale >= 0.0 && self.lr_scale <= 1.0) {
            return Err(Error::arg(format!("learning-rate scale {} outside [0, 1]", self.lr_scale)));
        }
        Ok(())
    }
}

fn mean_loss(model: &StannModel, data: &WindowSet, idx: &[usize]) -> Result<f64> {
    let probs = model.predict_proba(data.x.select(ndarray::Axis(0), idx).view())?;
    let labels: Vec<Label> = idx.iter().map(|&i| data.labels[i]).collect();
    Ok(softmax_xent(&probs.mapv(f64::ln), &labels).loss)
}

/// Trains `model` in place on `data[idx]` for `hyper.epochs` shuffled epochs.
/// With early stopping, a stratified slice of `idx` is held out, training
/// stops after `patience` epochs without a lower validation loss, and the
/// best weights are restored. Returns the per-epoch mean training loss.
pub fn train_model(
    model: &mut StannModel,
    state: &mut OptimizerState,
    data: &WindowSet,
    idx: &[usize],
    hyper: &Hyper,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, val) = match hyper.early_stopping {
        Some(es) if idx.len() >= 4 => stratified_split(idx, &data.labels, es.val_fraction, &mut rng),
        _ => (idx.to_vec(), Vec::new()),
    };
    let mut history = Vec::with_capacity(hyper.epochs);
    let mut best: Option<(f64, StannModel, OptimizerState)> = None;
    let mut since_best = 0;
    let mut order = train.clone();
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(hyper.batch) {
            let batch = Batch::from_windows(data.x.select(ndarray::Axis(0), chunk).view());
            let labels: Vec<Label> = chunk.iter().map(|&i| data.labels[i]).collect();
            total += model.train_step(&batch, &labels, state)? * chunk.len() as f64;
        }
        history.push(total / order.len().max(1) as f64);
        if let (Some(es), false) = (hyper.early_stopping, val.is_empty()) {
            let loss = mean_loss(model, data, &val)?;
            if best.as_ref().is_none_or(|(b, _, _)| loss < *b) {
                best = Some((loss, model.clone(), state.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= es.patience {
                    log::info!("early stop after {} epochs", history.len());
                    break;
                }
            }
        }
    }
    if let Some((_, m, s)) = best {
        *model = m;
        *state = s;
    }
    Ok(history)
}

fn stratified_split<R: rand::Rng>(idx: &[usize], labels: &[Label], fraction: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for class in [0, 1] {
        let mut members: Vec<usize> = idx.iter().copied().filter(|&i| labels[i] == class).collect();
        members.shuffle(rng);
        let take = ((members.len() as f64) * fraction).round() as usize;
        let take = take.min(members.len().saturating_sub(1));
        held.extend_from_slice(&members[..take]);
        train.extend_from_slice(&members[take..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}

pub fn evaluate_model(model: &StannModel, data: &WindowSet, idx: &[usize]) -> Result<Metrics> {
    let preds = model.predict(data.x.select(ndarray::Axis(0), idx).view())?;
    let labels: Vec<Label> = idx.iter().map(|&i| data.labels[i]).collect();
    evaluate_metrics(&preds, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub repeat: usize,
    pub fold: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub mean_accuracy: f64,
    pub sd_accuracy: f64,
    pub mean_f1: f64,
    pub sd_f1: f64,
}

/// Mean and sample standard deviation.
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl CvReport {
    pub fn from_folds(folds: Vec<FoldResult>) -> Self {
        let acc: Vec<f64> = folds.iter().map(|f| f.metrics.accuracy).collect();
        let f1: Vec<f64> = folds.iter().map(|f| f.metrics.f1).collect();
        let (mean_accuracy, sd_accuracy) = mean_sd(&acc);
        let (mean_f1, sd_f1) = mean_sd(&f1);
        Self { folds, mean_accuracy, sd_accuracy, mean_f1, sd_f1 }
    }

    /// `fold,accuracy,f1`; with repeats, folds are numbered consecutively.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["fold", "accuracy", "f1"])?;
        let per_repeat = self.folds.iter().filter(|f| f.repeat == 0).count().max(1);
        for f in &self.folds {
            let fold = f.repeat * per_repeat + f.fold;
            w.write_record([fold.to_string(), f.metrics.accuracy.to_string(), f.metrics.f1.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Summary with the run configuration echoed for provenance.
    pub fn summary_json(&self, config: &serde_json::Value) -> serde_json::Value {
        serde_json::json!({
            "mean": { "accuracy": self.mean_accuracy, "f1": self.mean_f1 },
            "sd": { "accuracy": self.sd_accuracy, "f1": self.sd_f1 },
            "folds": self.folds.len(),
            "config": config,
        })
    }
}

/// Trains a fresh model on every fold of `plan` and scores it on the held-out fold.
pub fn fit(config: &StannConfig, data: &WindowSet, hyper: &Hyper, plan: &CvPlan, repeat: usize) -> Result<Vec<FoldResult>> {
    hyper.validate()?;
    if plan.n_items() != data.len() {
        return Err(Error::arg(format!("plan covers {} items, dataset has {}", plan.n_items(), data.len())));
    }
    let results = par::map_indexed(plan.folds.len(), |f| -> Result<FoldResult> {
        let test = &plan.folds[f];
        let train = plan.train_indices(f);
        let mut seen = vec![false; data.len()];
        train.iter().for_each(|&i| seen[i] = true);
        assert!(test.iter().all(|&i| !seen[i]), "fold {f}: train and test indices overlap");
        let mut counts = [0usize; 2];
        train.iter().for_each(|&i| counts[data.labels[i] as usize] += 1);
        if counts.contains(&0) {
            return Err(Error::data(format!(
                "fold {f}: training windows contain only class {}",
                usize::from(counts[0] == 0)
            )));
        }
        let mut model = StannModel::build(config.clone(), hyper.seed)?;
        let mut state = model.optimizer_state(hyper.optimizer, hyper.lr_scale);
        let shuffle_seed = hyper.seed ^ ((repeat as u64) << 32 | f as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        train_model(&mut model, &mut state, data, &train, hyper, shuffle_seed)?;
        let metrics = evaluate_model(&model, data, test)?;
        log::info!("repeat {repeat} fold {f}: accuracy {:.4} f1 {:.4}", metrics.accuracy, metrics.f1);
        Ok(FoldResult { repeat, fold: f, metrics })
    });
    results.into_iter().collect()
}

/// Full protocol: `hyper.repeats` cross-validations with plans seeded from `hyper.seed`.
pub fn cross_validate(config: &StannConfig, data: &WindowSet, hyper: &Hyper) -> Result<CvReport> {
    hyper.validate()?;
    let mut all = Vec::new();
    for r in 0..hyper.repeats {
        let seed = hyper.seed.wrapping_add(r as u64);
        let plan =
            if hyper.grouped { grouped_kfold(&data.groups, hyper.folds, seed)? } else { stratified_kfold(&data.labels, hyper.folds, seed)? };
        all.extend(fit(config, data, hyper, &plan, r)?);
    }
    Ok(CvReport::from_folds(all))
}
