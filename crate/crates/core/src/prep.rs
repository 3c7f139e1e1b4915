//! Trial-to-window pipeline: baseline correction, band-pass filtering, graph
//! smoothing, segmentation and labelling.

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_knn_adjacency, Montage, SensorGraph};
use crate::par;
use crate::signal::{bandpass_filter, baseline_correct, binarize_rating, segment_trial, Band, Dimension, Label, TrialRecording};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// Subtract each channel's pre-trial mean.
    Mean,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepConfig {
    /// `None` keeps the broadband signal.
    pub band: Option<Band>,
    /// Neighbours per sensor for graph smoothing; `None` disables smoothing.
    pub knn: Option<usize>,
    /// Graph frequencies kept by the smoother; `None` means `floor(n / 2)`.
    pub bandwidth: Option<usize>,
    /// Window length in samples.
    pub window: usize,
    /// Rating threshold; `None` derives it from the rating scale.
    pub threshold: Option<f64>,
    pub dimension: Dimension,
    pub baseline: Baseline,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            band: Some(Band::Wide),
            knn: None,
            bandwidth: None,
            window: 128,
            threshold: None,
            dimension: Dimension::Valence,
            baseline: Baseline::Mean,
        }
    }
}

/// Scale midpoint: 5 on a 9-point scale, 3 on a 5-point scale.
pub fn default_threshold(scale_max: u8) -> f64 {
    f64::from(scale_max + 1) / 2.0
}

/// One labelled `channels x k` window.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWindow {
    pub x: Array2<f64>,
    pub label: Label,
    pub dimension: Dimension,
    pub band: Option<Band>,
}

/// Windows of a dataset stacked as `windows x channels x k`, with labels and
/// the trial each window came from.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub x: Array3<f64>,
    pub labels: Vec<Label>,
    /// Index into `trial_keys` for every window.
    pub groups: Vec<usize>,
    pub trial_keys: Vec<String>,
    pub channels: Vec<String>,
    pub dimension: Dimension,
    pub band: Option<Band>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.x.dim().1
    }

    pub fn window_len(&self) -> usize {
        self.x.dim().2
    }

    pub fn window(&self, i: usize) -> LabeledWindow {
        LabeledWindow {
            x: self.x.index_axis(Axis(0), i).to_owned(),
            label: self.labels[i],
            dimension: self.dimension,
            band: self.band,
        }
    }

    /// Windows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> WindowSet {
        WindowSet {
            x: self.x.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            groups: indices.iter().map(|&i| self.groups[i]).collect(),
            trial_keys: self.trial_keys.clone(),
            channels: self.channels.clone(),
            dimension: self.dimension,
            band: self.band,
        }
    }

    /// Keeps the named channels in the given order; the error lists every
    /// requested sensor the set does not have.
    pub fn select_channels<S: AsRef<str>>(&self, labels: &[S]) -> Result<WindowSet> {
        let missing: Vec<&str> =
            labels.iter().map(AsRef::as_ref).filter(|l| !self.channels.iter().any(|c| c == l)).collect();
        if !missing.is_empty() {
            return Err(Error::data(format!("cannot remap channels; missing sensors: {}", missing.join(", "))));
        }
        let idx: Vec<usize> =
            labels.iter().map(|l| self.channels.iter().position(|c| c == l.as_ref()).expect("checked")).collect();
        Ok(WindowSet {
            x: self.x.select(Axis(1), &idx),
            channels: labels.iter().map(|l| l.as_ref().to_string()).collect(),
            ..self.clone()
        })
    }

    /// Returns a copy with labels permuted by `rng` (a chance-level control).
    pub fn shuffled_labels<R: rand::Rng>(&self, rng: &mut R) -> WindowSet {
        use rand::seq::SliceRandom;
        let mut out = self.clone();
        out.labels.shuffle(rng);
        out
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let ones = self.labels.iter().filter(|&&y| y == 1).count();
        [self.len() - ones, ones]
    }
}

/// Per-trial preprocessing to `channels x T` before segmentation.
pub fn preprocess_trial(trial: &TrialRecording, graph: Option<&SensorGraph>, cfg: &PrepConfig) -> Result<Array2<f64>> {
    trial.validate()?;
    let trial = match cfg.baseline {
        Baseline::Mean => baseline_correct(trial)?,
        Baseline::Off => trial.clone(),
    };
    let mut x = trial.data_f64();
    if let Some(band) = cfg.band {
        x = bandpass_filter(x.view(), band, trial.fs)?;
    }
    if let Some(g) = graph {
        let w = cfg.bandwidth.unwrap_or_else(|| g.default_bandwidth());
        x = g.lowpass_smooth(x.view(), w)?;
    }
    Ok(x)
}

/// Runs the pipeline on every trial and stacks the labelled windows.
pub fn prepare(trials: &[TrialRecording], montage: &Montage, cfg: &PrepConfig) -> Result<WindowSet> {
    if trials.is_empty() {
        return Err(Error::data("no trials to prepare"));
    }
    let n = montage.len();
    if let Some(t) = trials.iter().find(|t| t.n_channels() != n) {
        return Err(Error::data(format!(
            "trial {} has {} channels, montage has {n}",
            t.key(),
            t.n_channels()
        )));
    }
    let graph = cfg.knn.map(|k| build_knn_adjacency(montage, k)).transpose()?;
    let k = cfg.window;
    let per_trial: Vec<Result<(Vec<Array2<f64>>, Label)>> = par::map_indexed(trials.len(), |i| {
        let t = &trials[i];
        let x = preprocess_trial(t, graph.as_ref(), cfg)?;
        let threshold = cfg.threshold.unwrap_or_else(|| default_threshold(t.scale_max));
        let label = binarize_rating(t.ratings.get(cfg.dimension), threshold);
        Ok((segment_trial(x.view(), k)?, label))
    });
    let mut windows = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for (i, r) in per_trial.into_iter().enumerate() {
        let (w, label) = r?;
        labels.extend(std::iter::repeat_n(label, w.len()));
        groups.extend(std::iter::repeat_n(i, w.len()));
        windows.extend(w);
    }
    if windows.is_empty() {
        return Err(Error::data(format!("no trial is at least {k} samples long")));
    }
    let mut x = Array3::zeros((windows.len(), n, k));
    for (i, w) in windows.iter().enumerate() {
        x.slice_mut(s![i, .., ..]).assign(w);
    }
    Ok(WindowSet {
        x,
        labels,
        groups,
        trial_keys: trials.iter().map(TrialRecording::key).collect(),
        channels: montage.labels(),
        dimension: cfg.dimension,
        band: cfg.band,
    })
}
