//! Trial recordings, band-pass filtering, baseline correction, segmentation,
//! rating binarization and a synthetic recording generator.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frequency bands analysed by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Theta,
    Alpha,
    Beta,
    Gamma,
    Wide,
}

impl Band {
    pub const ALL: [Band; 5] = [Band::Theta, Band::Alpha, Band::Beta, Band::Gamma, Band::Wide];

    /// Pass band edges in Hz.
    pub fn edges(self) -> (f64, f64) {
        match self {
            Band::Theta => (4.0, 8.0),
            Band::Alpha => (8.0, 12.0),
            Band::Beta => (12.0, 29.0),
            Band::Gamma => (30.0, 45.0),
            Band::Wide => (4.0, 45.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Band::Theta => "theta",
            Band::Alpha => "alpha",
            Band::Beta => "beta",
            Band::Gamma => "gamma",
            Band::Wide => "wide",
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Band {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Band::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown band {s:?}")))
    }
}

/// Rated affect dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Valence,
    Arousal,
    Dominance,
}

impl FromStr for Dimension {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valence" => Ok(Dimension::Valence),
            "arousal" => Ok(Dimension::Arousal),
            "dominance" => Ok(Dimension::Dominance),
            _ => Err(Error::arg(format!("unknown rating dimension {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratings {
    pub valence: f64,
    pub arousal: f64,
    pub dominance: f64,
}

impl Ratings {
    pub fn get(&self, dim: Dimension) -> f64 {
        match dim {
            Dimension::Valence => self.valence,
            Dimension::Arousal => self.arousal,
            Dimension::Dominance => self.dominance,
        }
    }
}

/// One recorded trial: a baseline segment followed by the stimulus segment,
/// both `channels x samples`, stored at the container's 32-bit precision.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecording {
    pub subject_id: String,
    pub trial_id: String,
    pub fs: f64,
    pub pretrial: Array2<f32>,
    pub data: Array2<f32>,
    pub ratings: Ratings,
    pub scale_max: u8,
}

impl TrialRecording {
    pub fn n_channels(&self) -> usize {
        self.data.nrows()
    }

    /// `subject/trial`, unique within a dataset.
    pub fn key(&self) -> String {
        format!("{}/{}", self.subject_id, self.trial_id)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fs > 0.0) {
            return Err(Error::data(format!("trial {}: sampling rate must be positive", self.trial_id)));
        }
        if self.pretrial.ncols() > 0 && self.pretrial.nrows() != self.data.nrows() {
            return Err(Error::data(format!("trial {}: pretrial and data channel counts differ", self.trial_id)));
        }
        let max = f64::from(self.scale_max);
        for r in [self.ratings.valence, self.ratings.arousal, self.ratings.dominance] {
            if !(1.0..=max).contains(&r) {
                return Err(Error::data(format!("trial {}: rating {r} outside [1, {max}]", self.trial_id)));
            }
        }
        Ok(())
    }

    pub fn data_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }
}

/// Binary class label: 0 = low, 1 = high.
pub type Label = u8;

/// `high` iff `rating > threshold`; the threshold itself is low.
pub fn binarize_rating(rating: f64, threshold: f64) -> Label {
    u8::from(rating > threshold)
}

/// Subtracts each channel's pre-trial mean from that channel's pretrial and
/// data segments.
pub fn baseline_correct(trial: &TrialRecording) -> Result<TrialRecording> {
    if trial.pretrial.ncols() == 0 {
        return Err(Error::data(format!("trial {} has no pre-trial segment", trial.trial_id)));
    }
    let mut out = trial.clone();
    for ch in 0..trial.n_channels() {
        let row = trial.pretrial.row(ch);
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / row.len() as f64;
        out.pretrial.row_mut(ch).mapv_inplace(|v| (f64::from(v) - mean) as f32);
        out.data.row_mut(ch).mapv_inplace(|v| (f64::from(v) - mean) as f32);
    }
    Ok(out)
}

/// Cuts `channels x T` into consecutive non-overlapping `channels x k`
/// windows; a trailing remainder shorter than `k` is dropped.
pub fn segment_trial(x: ArrayView2<f64>, k: usize) -> Result<Vec<Array2<f64>>> {
    if k == 0 {
        return Err(Error::arg("window length must be at least one sample"));
    }
    let t = x.ncols();
    if k > t {
        log::warn!("window length {k} exceeds trial length {t}; no windows produced");
        return Ok(Vec::new());
    }
    Ok((0..t / k).map(|w| x.slice(s![.., w * k..(w + 1) * k]).to_owned()).collect())
}

/// One second-order section in direct form II transposed, `a0 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2])
    }

    fn response(&self, z: Complex64) -> Complex64 {
        let zi = z.inv();
        let num = self.b[0] + self.b[1] * zi + self.b[2] * zi * zi;
        let den = self.a[0] + self.a[1] * zi + self.a[2] * zi * zi;
        num / den
    }
}

/// Digital Butterworth band-pass of prototype order `order` (the resulting
/// filter has `2 * order` poles), designed by bilinear transform with
/// pre-warped edges and unit gain at the geometric centre frequency.
pub fn butterworth_bandpass(order: usize, lo: f64, hi: f64, fs: f64) -> Result<Vec<Biquad>> {
    if order == 0 {
        return Err(Error::arg("filter order must be positive"));
    }
    if !(lo > 0.0 && lo < hi && hi < fs / 2.0) {
        return Err(Error::arg(format!("band [{lo}, {hi}] Hz invalid for sampling rate {fs} Hz")));
    }
    let k = 2.0 * fs;
    let wl = k * (PI * lo / fs).tan();
    let wh = k * (PI * hi / fs).tan();
    let w0 = (wl * wh).sqrt();
    let bw = wh - wl;

    let mut poles = Vec::with_capacity(2 * order);
    for i in 0..order {
        let theta = PI * (2 * i + order + 1) as f64 / (2 * order) as f64;
        let p = Complex64::from_polar(1.0, theta);
        let half = p * bw / 2.0;
        let disc = (half * half - w0 * w0).sqrt();
        for s_pole in [half + disc, half - disc] {
            poles.push((k + s_pole) / (k - s_pole));
        }
    }

    let mut upper: Vec<Complex64> = poles.iter().copied().filter(|z| z.im > 1e-12).collect();
    let mut real: Vec<f64> = poles.iter().filter(|z| z.im.abs() <= 1e-12).map(|z| z.re).collect();
    upper.sort_by(|p, q| p.arg().total_cmp(&q.arg()));
    real.sort_by(f64::total_cmp);

    let mut sections: Vec<Biquad> = upper
        .iter()
        .map(|z| Biquad { b: [1.0, 0.0, -1.0], a: [1.0, -2.0 * z.re, z.norm_sqr()] })
        .collect();
    for pair in real.chunks(2) {
        let (p1, p2) = (pair[0], *pair.get(1).unwrap_or(&0.0));
        sections.push(Biquad { b: [1.0, 0.0, -1.0], a: [1.0, -(p1 + p2), p1 * p2] });
    }

    let wc = 2.0 * (w0 / k).atan();
    let zc = Complex64::from_polar(1.0, wc);
    let gain: f64 = sections.iter().map(|s| s.response(zc).norm()).product();
    for b in sections[0].b.iter_mut() {
        *b /= gain;
    }
    Ok(sections)
}

/// Steady-state section states for a unit step input.
fn sos_initial_state(sos: &[Biquad]) -> Vec<[f64; 2]> {
    let mut scale = 1.0;
    sos.iter()
        .map(|s| {
            let g = s.dc_gain();
            let z2 = s.b[2] - s.a[2] * g;
            let z1 = s.b[1] - s.a[1] * g + z2;
            let out = [scale * z1, scale * z2];
            scale *= g;
            out
        })
        .collect()
}

fn sos_filter(sos: &[Biquad], x: &mut [f64], zi: &[[f64; 2]], x0: f64) {
    for (sec, z0) in sos.iter().zip(zi) {
        let (mut z1, mut z2) = (z0[0] * x0, z0[1] * x0);
        for v in x.iter_mut() {
            let input = *v;
            let y = sec.b[0] * input + z1;
            z1 = sec.b[1] * input - sec.a[1] * y + z2;
            z2 = sec.b[2] * input - sec.a[2] * y;
            *v = y;
        }
    }
}

/// Zero-phase forward-backward filtering with odd-extension padding.
pub fn sos_filtfilt(sos: &[Biquad], x: ArrayView1<f64>) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let padlen = (3 * (2 * sos.len() + 1)).min(n - 1);
    let (first, last) = (x[0], x[n - 1]);
    let mut ext = Vec::with_capacity(n + 2 * padlen);
    ext.extend((1..=padlen).rev().map(|i| 2.0 * first - x[i]));
    ext.extend(x.iter().copied());
    ext.extend((1..=padlen).map(|i| 2.0 * last - x[n - 1 - i]));

    let zi = sos_initial_state(sos);
    let x0 = ext[0];
    sos_filter(sos, &mut ext, &zi, x0);
    ext.reverse();
    let y0 = ext[0];
    sos_filter(sos, &mut ext, &zi, y0);
    ext.reverse();
    ext[padlen..padlen + n].to_vec()
}

/// Fourth-order zero-phase Butterworth band-pass applied to every channel.
pub fn bandpass_filter(x: ArrayView2<f64>, band: Band, fs: f64) -> Result<Array2<f64>> {
    let (lo, hi) = band.edges();
    let sos = butterworth_bandpass(4, lo, hi, fs)?;
    let (rows, cols) = x.dim();
    let filtered = crate::par::map_indexed(rows, |r| sos_filtfilt(&sos, x.row(r)));
    let flat: Vec<f64> = filtered.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((rows, cols), flat).expect("row lengths preserved"))
}

/// Parameters of the synthetic two-class recording generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_channels: usize,
    pub fs: f64,
    pub n_trials: usize,
    /// Amplitude of the class-"high" tone relative to unit pattern weight.
    pub class_effect: f64,
    /// Standard deviation of the pink background noise.
    pub noise_sd: f64,
    pub trial_secs: f64,
    pub pretrial_secs: f64,
    pub tone_hz: f64,
    /// Per-channel tone weights; `None` puts unit weight on the first half of the channels.
    pub pattern: Option<Vec<f64>>,
    pub subject_id: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_channels: 32,
            fs: 128.0,
            n_trials: 40,
            class_effect: 2.0,
            noise_sd: 1.0,
            trial_secs: 60.0,
            pretrial_secs: 3.0,
            tone_hz: 10.0,
            pattern: None,
            subject_id: "s01".into(),
        }
    }
}

impl SynthSpec {
    fn weights(&self) -> Result<Vec<f64>> {
        match &self.pattern {
            Some(p) if p.len() != self.n_channels => Err(Error::arg(format!(
                "pattern has {} weights for {} channels",
                p.len(),
                self.n_channels
            ))),
            Some(p) => Ok(p.clone()),
            None => Ok((0..self.n_channels).map(|c| if c < self.n_channels.div_ceil(2) { 1.0 } else { 0.0 }).collect()),
        }
    }
}

/// Three-pole pink (1/f) noise filter driven by white noise.
struct PinkNoise {
    state: [f64; 3],
    scale: f64,
}

impl PinkNoise {
    const POLES: [f64; 3] = [0.99765, 0.96300, 0.57000];
    const GAINS: [f64; 3] = [0.0990460, 0.2965164, 1.0526913];
    const DIRECT: f64 = 0.1848;

    fn new(sd: f64) -> Self {
        // Stationary variance of sum_k g_k / (1 - p_k z^-1) + d for unit white input.
        let (p, g, d) = (Self::POLES, Self::GAINS, Self::DIRECT);
        let mut var = d * d;
        for j in 0..3 {
            var += 2.0 * d * g[j];
            for k in 0..3 {
                var += g[j] * g[k] / (1.0 - p[j] * p[k]);
            }
        }
        Self { state: [0.0; 3], scale: sd / var.sqrt() }
    }

    fn next(&mut self, white: f64) -> f64 {
        let mut out = Self::DIRECT * white;
        for k in 0..3 {
            self.state[k] = Self::POLES[k] * self.state[k] + Self::GAINS[k] * white;
            out += self.state[k];
        }
        out * self.scale
    }
}

/// Generates `n_trials` balanced two-class trials. Odd-indexed trials are
/// class "high": a tone at `tone_hz` with a trial-random phase is added to
/// every channel in proportion to the spatial pattern. Background noise is
/// independent pink noise per channel. Ratings use a 9-point scale.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<Vec<TrialRecording>> {
    if spec.n_channels == 0 || spec.n_trials == 0 || !(spec.fs > 0.0) || !(spec.trial_secs > 0.0) {
        return Err(Error::arg("synthetic spec must have positive sizes"));
    }
    if spec.noise_sd < 0.0 || spec.pretrial_secs < 0.0 {
        return Err(Error::arg("noise_sd and pretrial_secs must be non-negative"));
    }
    let weights = spec.weights()?;
    let t0 = (spec.pretrial_secs * spec.fs).round() as usize;
    let t = (spec.trial_secs * spec.fs).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(spec.n_trials);
    for trial in 0..spec.n_trials {
        let high = trial % 2 == 1;
        let phase = rng.random::<f64>() * 2.0 * PI;
        let valence = if high { rng.random_range(6..=9) } else { rng.random_range(1..=5) } as f64;
        let arousal = rng.random_range(1..=9) as f64;
        let dominance = rng.random_range(1..=9) as f64;
        let mut pretrial = Array2::<f32>::zeros((spec.n_channels, t0));
        let mut data = Array2::<f32>::zeros((spec.n_channels, t));
        for ch in 0..spec.n_channels {
            let mut pink = PinkNoise::new(spec.noise_sd);
            for _ in 0..2000 {
                pink.next(StandardNormal.sample(&mut rng));
            }
            for i in 0..t0 {
                pretrial[[ch, i]] = pink.next(StandardNormal.sample(&mut rng)) as f32;
            }
            for i in 0..t {
                let mut v = pink.next(StandardNormal.sample(&mut rng));
                if high {
                    let time = i as f64 / spec.fs;
                    v += spec.class_effect * weights[ch] * (2.0 * PI * spec.tone_hz * time + phase).sin();
                }
                data[[ch, i]] = v as f32;
            }
        }
        trials.push(TrialRecording {
            subject_id: spec.subject_id.clone(),
            trial_id: format!("t{trial:03}"),
            fs: spec.fs,
            pretrial,
            data,
            ratings: Ratings { valence, arousal, dominance },
            scale_max: 9,
        });
    }
    Ok(trials)
}
