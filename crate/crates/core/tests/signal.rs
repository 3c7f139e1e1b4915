use stann_core::signal::{bandpass_filter, generate_synthetic, Band, Dimension, SynthSpec, TrialRecording};

/// Per-channel alpha-band power of the stimulus segment.
fn band_power(t: &TrialRecording) -> Vec<f64> {
    let x = bandpass_filter(t.data_f64().view(), Band::Alpha, t.fs).unwrap();
    x.rows().into_iter().map(|r| r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64).collect()
}

/// Nearest-centroid probe: fit on even-indexed trials, score on odd-indexed
/// pairs (each pair holds one trial of each class).
fn probe_accuracy(trials: &[TrialRecording]) -> f64 {
    let feats: Vec<Vec<f64>> = trials.iter().map(band_power).collect();
    let labels: Vec<bool> = trials.iter().map(|t| t.ratings.get(Dimension::Valence) > 5.0).collect();
    let (train, test): (Vec<usize>, Vec<usize>) = (0..trials.len()).partition(|i| (i / 2) % 2 == 0);
    let d = feats[0].len();
    let mut centroid = [vec![0.0; d], vec![0.0; d]];
    let mut count = [0.0; 2];
    for &i in &train {
        let c = usize::from(labels[i]);
        count[c] += 1.0;
        centroid[c].iter_mut().zip(&feats[i]).for_each(|(a, b)| *a += b);
    }
    for c in 0..2 {
        centroid[c].iter_mut().for_each(|a| *a /= count[c]);
    }
    let dist = |f: &[f64], c: &[f64]| f.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let correct = test
        .iter()
        .filter(|&&i| (dist(&feats[i], &centroid[1]) < dist(&feats[i], &centroid[0])) == labels[i])
        .count();
    correct as f64 / test.len() as f64
}

fn spec(class_effect: f64, n_trials: usize) -> SynthSpec {
    SynthSpec { n_channels: 8, fs: 32.0, n_trials, class_effect, trial_secs: 4.0, pretrial_secs: 1.0, ..SynthSpec::default() }
}

#[test]
fn no_effect_is_chance() {
    let acc = probe_accuracy(&generate_synthetic(&spec(0.0, 1000), 17).unwrap());
    assert!((acc - 0.5).abs() <= 0.05, "accuracy {acc}");
}

#[test]
fn strong_effect_is_separable() {
    let acc = probe_accuracy(&generate_synthetic(&spec(2.0, 200), 18).unwrap());
    assert!(acc >= 0.9, "accuracy {acc}");
}

#[test]
fn classes_alternate_and_ratings_sit_on_scale() {
    let trials = generate_synthetic(&spec(1.0, 10), 3).unwrap();
    for (i, t) in trials.iter().enumerate() {
        let v = t.ratings.get(Dimension::Valence);
        assert_eq!(v > 5.0, i % 2 == 1, "trial {i} rating {v}");
        assert!((1.0..=9.0).contains(&v));
        assert_eq!(t.data.ncols(), 128);
        assert_eq!(t.pretrial.ncols(), 32);
    }
}
