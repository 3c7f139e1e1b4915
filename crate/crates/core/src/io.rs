//! On-disk formats: the dataset container, model checkpoints, scalp topomaps
//! and embedding exports.
//!
//! All binary payloads are little-endian 32-bit floats. A dataset trial
//! payload is row-major `channels x (T0 + T)`: each channel's pre-trial
//! samples followed by its trial samples.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Montage;
use crate::model::{Batch, ParamStore, Role, StannConfig, StannModel};
use crate::nn::{Optimizer, OptimizerState, Tensor};
use crate::prep::WindowSet;
use crate::signal::{Ratings, TrialRecording};

pub const DATASET_FORMAT: &str = "stann-dataset";
pub const CHECKPOINT_FORMAT: &str = "stann-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.toml";

fn f32_bytes(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

fn bytes_f32(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

fn check_header(format: &str, version: u32, want: &str) -> Result<()> {
    if format != want {
        return Err(Error::format(format!("expected a {want} manifest, found {format:?}")));
    }
    if version != FORMAT_VERSION {
        return Err(Error::format(format!("unsupported {want} version {version}; this build reads {FORMAT_VERSION}")));
    }
    Ok(())
}

fn read_manifest<T: for<'de> Deserialize<'de>>(dir: &Path) -> Result<T> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    toml::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", dir.join(MANIFEST).display())))
}

fn write_manifest<T: Serialize>(dir: &Path, manifest: &T) -> Result<()> {
    let text = toml::to_string(manifest).map_err(|e| Error::format(format!("manifest: {e}")))?;
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    version: u32,
    montage: String,
    n_channels: usize,
    fs: f64,
    scale_max: u8,
    trial: Vec<TrialEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrialEntry {
    subject_id: String,
    trial_id: String,
    valence: f64,
    arousal: f64,
    dominance: f64,
    pretrial_samples: usize,
    samples: usize,
    payload: String,
}

/// Trials with the montage they were recorded on.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub montage: Montage,
    pub trials: Vec<TrialRecording>,
}

fn payload_name(t: &TrialRecording, i: usize) -> String {
    let clean = |s: &str| s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect::<String>();
    format!("{i:04}_{}_{}.f32", clean(&t.subject_id), clean(&t.trial_id))
}

/// Writes `dir/manifest.toml`, `dir/montage.csv` and one payload per trial.
pub fn write_dataset(dir: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    let first = data.trials.first().ok_or_else(|| Error::data("dataset has no trials"))?;
    for t in &data.trials {
        t.validate()?;
        if t.n_channels() != data.montage.len() || t.fs != first.fs || t.scale_max != first.scale_max {
            return Err(Error::data(format!("trial {} disagrees with the dataset's channels, fs or scale", t.key())));
        }
    }
    fs::create_dir_all(dir)?;
    data.montage.write_csv(dir.join("montage.csv"))?;
    let mut entries = Vec::with_capacity(data.trials.len());
    for (i, t) in data.trials.iter().enumerate() {
        let name = payload_name(t, i);
        let rows = t.pretrial.rows().into_iter().zip(t.data.rows());
        let bytes = f32_bytes(rows.flat_map(|(a, b)| a.into_iter().chain(b).copied().collect::<Vec<_>>()));
        fs::write(dir.join(&name), bytes)?;
        entries.push(TrialEntry {
            subject_id: t.subject_id.clone(),
            trial_id: t.trial_id.clone(),
            valence: t.ratings.valence,
            arousal: t.ratings.arousal,
            dominance: t.ratings.dominance,
            pretrial_samples: t.pretrial.ncols(),
            samples: t.data.ncols(),
            payload: name,
        });
    }
    write_manifest(
        dir,
        &DatasetManifest {
            format: DATASET_FORMAT.into(),
            version: FORMAT_VERSION,
            montage: "montage.csv".into(),
            n_channels: data.montage.len(),
            fs: first.fs,
            scale_max: first.scale_max,
            trial: entries,
        },
    )
}

/// Reads a container written by [`write_dataset`]. The channel count is
/// checked against the montage before any payload is opened.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let m: DatasetManifest = read_manifest(dir)?;
    check_header(&m.format, m.version, DATASET_FORMAT)?;
    let montage = Montage::read_csv(dir.join(&m.montage))?;
    if m.n_channels != montage.len() {
        return Err(Error::data(format!(
            "manifest declares {} channels but montage {} has {} sensors",
            m.n_channels,
            m.montage,
            montage.len()
        )));
    }
    let n = m.n_channels;
    let trials = crate::par::map_indexed(m.trial.len(), |i| {
        let e = &m.trial[i];
        let bytes = fs::read(dir.join(&e.payload))?;
        let width = e.pretrial_samples + e.samples;
        let want = n * width * 4;
        if bytes.len() != want {
            return Err(Error::data(format!(
                "trial {} ({}): payload {} is {} bytes, expected {want}",
                e.trial_id,
                e.subject_id,
                e.payload,
                bytes.len()
            )));
        }
        let all = Array2::from_shape_vec((n, width), bytes_f32(&bytes)).expect("size checked");
        let t = TrialRecording {
            subject_id: e.subject_id.clone(),
            trial_id: e.trial_id.clone(),
            fs: m.fs,
            pretrial: all.slice(s![.., ..e.pretrial_samples]).to_owned(),
            data: all.slice(s![.., e.pretrial_samples..]).to_owned(),
            ratings: Ratings { valence: e.valence, arousal: e.arousal, dominance: e.dominance },
            scale_max: m.scale_max,
        };
        t.validate()?;
        Ok(t)
    });
    Ok(Dataset { montage, trials: trials.into_iter().collect::<Result<_>>()? })
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    version: u32,
    /// Decimal string; TOML integers are signed 64-bit.
    seed: String,
    /// Dropout RNG state as JSON.
    rng: String,
    params: String,
    config: StannConfig,
    block: Vec<BlockEntry>,
    optimizer: Option<OptimizerEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockEntry {
    id: String,
    trainable: bool,
    tensor: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: Role,
    shape: Vec<usize>,
    /// Position in the payload, in floats.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerEntry {
    /// Optimizer settings as JSON.
    spec: String,
    lr_scale: f64,
    step: u64,
    slots: Vec<usize>,
    payload: String,
}

/// A model plus, optionally, the optimizer state needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: StannModel,
    pub optimizer: Option<OptimizerState>,
}

fn to_f32_exact(what: &str, values: &[f64], out: &mut Vec<f32>) -> Result<()> {
    for &v in values {
        let f = v as f32;
        if f64::from(f) != v && !(v.is_nan() && f.is_nan()) {
            return Err(Error::format(format!("{what} holds {v}, which is not exactly representable in 32 bits")));
        }
        out.push(f);
    }
    Ok(())
}

/// Writes `dir/manifest.toml`, `dir/params.f32` and, with an optimizer state,
/// `dir/optimizer.f32` (first moments of every slot, then second moments).
pub fn write_checkpoint(dir: impl AsRef<Path>, model: &StannModel, optimizer: Option<&OptimizerState>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut payload = Vec::new();
    let mut blocks = Vec::with_capacity(model.store.blocks.len());
    for b in &model.store.blocks {
        let mut tensors = Vec::with_capacity(b.tensors.len());
        for t in &b.tensors {
            tensors.push(TensorEntry { name: t.name.clone(), role: t.role, shape: t.value.shape.clone(), offset: payload.len() });
            to_f32_exact(&format!("{}.{}", b.id, t.name), &t.value.data, &mut payload)?;
        }
        blocks.push(BlockEntry { id: b.id.clone(), trainable: b.trainable, tensor: tensors });
    }
    fs::write(dir.join("params.f32"), f32_bytes(payload))?;

    let optimizer = match optimizer {
        None => None,
        Some(st) => {
            let mut moments = Vec::new();
            for (i, m) in st.m.iter().chain(&st.v).enumerate() {
                to_f32_exact(&format!("optimizer moment {i}"), m, &mut moments)?;
            }
            fs::write(dir.join("optimizer.f32"), f32_bytes(moments))?;
            Some(OptimizerEntry {
                spec: serde_json::to_string(&st.optimizer).map_err(|e| Error::format(e.to_string()))?,
                lr_scale: st.lr_scale,
                step: st.t,
                slots: st.m.iter().map(Vec::len).collect(),
                payload: "optimizer.f32".into(),
            })
        }
    };
    write_manifest(
        dir,
        &CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            version: FORMAT_VERSION,
            seed: model.seed.to_string(),
            rng: serde_json::to_string(&model.rng).map_err(|e| Error::format(e.to_string()))?,
            params: "params.f32".into(),
            config: model.config.clone(),
            block: blocks,
            optimizer,
        },
    )
}

/// Reads a checkpoint using the configuration stored in it.
pub fn read_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint_impl(dir.as_ref(), None)
}

/// Reads a checkpoint into `config`; every block whose stored shapes differ
/// from the ones `config` implies is listed in the error.
pub fn read_checkpoint_for(dir: impl AsRef<Path>, config: &StannConfig) -> Result<Checkpoint> {
    read_checkpoint_impl(dir.as_ref(), Some(config))
}

fn read_checkpoint_impl(dir: &Path, expected: Option<&StannConfig>) -> Result<Checkpoint> {
    let m: CheckpointManifest = read_manifest(dir)?;
    check_header(&m.format, m.version, CHECKPOINT_FORMAT)?;
    let config = expected.cloned().unwrap_or_else(|| m.config.clone());
    let seed: u64 = m.seed.parse().map_err(|_| Error::format(format!("bad seed {:?}", m.seed)))?;
    let mut model = StannModel::build(config, seed)?;
    check_shapes(&model.store, &m.block)?;

    let payload = bytes_f32(&fs::read(dir.join(&m.params))?);
    for (block, entry) in model.store.blocks.iter_mut().zip(&m.block) {
        block.trainable = entry.trainable;
        for (t, e) in block.tensors.iter_mut().zip(&entry.tensor) {
            let end = e.offset + t.value.len();
            let src = payload.get(e.offset..end).ok_or_else(|| {
                Error::format(format!("{}.{} lies past the end of {}", entry.id, e.name, m.params))
            })?;
            t.value = Tensor { shape: e.shape.clone(), data: src.iter().map(|&v| f64::from(v)).collect() };
        }
    }
    model.rng = serde_json::from_str::<ChaCha8Rng>(&m.rng).map_err(|e| Error::format(format!("rng state: {e}")))?;

    let optimizer = match m.optimizer {
        None => None,
        Some(o) => {
            let spec: Optimizer = serde_json::from_str(&o.spec).map_err(|e| Error::format(format!("optimizer: {e}")))?;
            let mut st = OptimizerState::new(spec, o.lr_scale, &o.slots);
            st.t = o.step;
            if matches!(spec, Optimizer::Adam(_)) {
                if o.slots != model.store.slot_lens() {
                    return Err(Error::format("optimizer slots do not match the model's trainable tensors"));
                }
                let moments = bytes_f32(&fs::read(dir.join(&o.payload))?);
                let total: usize = o.slots.iter().sum();
                if moments.len() != 2 * total {
                    return Err(Error::format(format!("{} holds {} floats, expected {}", o.payload, moments.len(), 2 * total)));
                }
                let mut it = moments.into_iter().map(f64::from);
                for buf in st.m.iter_mut().chain(st.v.iter_mut()) {
                    buf.iter_mut().for_each(|x| *x = it.next().expect("length checked"));
                }
            }
            Some(st)
        }
    };
    Ok(Checkpoint { model, optimizer })
}

fn check_shapes(store: &ParamStore, entries: &[BlockEntry]) -> Result<()> {
    let mut bad = Vec::new();
    for b in &store.blocks {
        match entries.iter().find(|e| e.id == b.id) {
            None => bad.push(format!("{} (missing)", b.id)),
            Some(e) => {
                let want: Vec<(&str, &[usize])> = b.tensors.iter().map(|t| (t.name.as_str(), t.value.shape.as_slice())).collect();
                let got: Vec<(&str, &[usize])> = e.tensor.iter().map(|t| (t.name.as_str(), t.shape.as_slice())).collect();
                if want != got {
                    let describe = |v: &[(&str, &[usize])]| {
                        v.iter().map(|(n, s)| format!("{n}{s:?}")).collect::<Vec<_>>().join(" ")
                    };
                    bad.push(format!("{} (stored {}; expected {})", b.id, describe(&got), describe(&want)));
                }
            }
        }
    }
    bad.extend(entries.iter().filter(|e| store.index_of(&e.id).is_none()).map(|e| format!("{} (unexpected)", e.id)));
    if entries.iter().map(|e| &e.id).ne(store.blocks.iter().map(|b| &b.id)) && bad.is_empty() {
        bad.push("block order differs".into());
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::format(format!("checkpoint shape mismatch in blocks: {}", bad.join(", "))))
    }
}

/// One line per block: id, trainable flag, tensor shapes and counts.
pub fn describe_checkpoint(ck: &Checkpoint) -> String {
    let mut out = String::new();
    let c = &ck.model.config;
    let _ = writeln!(out, "channels {} timesteps {} seed {}", c.n_channels, c.timesteps, ck.model.seed);
    for b in &ck.model.store.blocks {
        let shapes: Vec<String> = b.tensors.iter().map(|t| format!("{}{:?}", t.name, t.value.shape)).collect();
        let _ = writeln!(
            out,
            "{:<10} {:<9} {:>8} {}",
            b.id,
            if b.trainable { "trainable" } else { "frozen" },
            b.count(),
            shapes.join(" ")
        );
    }
    let _ = writeln!(out, "trainable {} of {}", ck.model.store.retrainable(), ck.model.store.total_trainable());
    if let Some(o) = &ck.optimizer {
        let _ = writeln!(out, "optimizer {:?} lr_scale {} step {}", o.optimizer, o.lr_scale, o.t);
    }
    out
}

/// Maps a value in `[0, 1]` to a blue-white-red ramp.
pub fn colour(v: f64) -> (u8, u8, u8) {
    let v = v.clamp(0.0, 1.0);
    let ch = |x: f64| (x * 255.0).round() as u8;
    if v <= 0.5 {
        let t = v / 0.5;
        (ch(t), ch(t), 255)
    } else {
        let t = (1.0 - v) / 0.5;
        (255, ch(t), ch(t))
    }
}

/// Min-max scaling to `[0, 1]`; constant input maps to 0.5.
pub fn normalize_unit(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Azimuthal equidistant projection: the vertex maps to the centre and the
/// angle from the vertex becomes the radius, so the `z = 0` plane lands on
/// the unit circle.
pub fn project(x: f64, y: f64, z: f64) -> (f64, f64) {
    let r = (x * x + y * y + z * z).sqrt();
    if r == 0.0 {
        return (0.0, 0.0);
    }
    let polar = (z / r).clamp(-1.0, 1.0).acos() / std::f64::consts::FRAC_PI_2;
    let az = y.atan2(x);
    if x == 0.0 && y == 0.0 {
        return (0.0, 0.0);
    }
    (polar * az.cos(), polar * az.sin())
}

/// Renders per-sensor values as a scalp map.
pub fn emit_topomap(montage: &Montage, values: &[f64]) -> Result<String> {
    if values.len() != montage.len() {
        return Err(Error::arg(format!("{} values for {} sensors", values.len(), montage.len())));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::arg(format!("value for {} is not finite", montage.sensors()[i].label)));
    }
    let unit = normalize_unit(values);
    let pts: Vec<(f64, f64)> = montage.sensors().iter().map(|s| project(s.x, s.y, s.z)).collect();
    let extent = pts.iter().map(|(a, b)| a.hypot(*b)).fold(1.0, f64::max);
    let (size, head) = (400.0, 150.0 / extent);
    let c = size / 2.0;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#);
    let _ = writeln!(svg, r#"<circle cx="{c}" cy="{c}" r="{:.2}" fill="none" stroke="black" stroke-width="2"/>"#, head);
    let _ = writeln!(
        svg,
        r#"<polygon points="{:.2},{:.2} {c},{:.2} {:.2},{:.2}" fill="none" stroke="black" stroke-width="2"/>"#,
        c - 12.0,
        c - head + 1.0,
        c - head - 16.0,
        c + 12.0,
        c - head + 1.0
    );
    for ((s, &(px, py)), &v) in montage.sensors().iter().zip(&pts).zip(&unit) {
        let (r, g, b) = colour(v);
        let (sx, sy) = (c + px * head, c - py * head);
        let _ = writeln!(
            svg,
            r##"<circle cx="{sx:.2}" cy="{sy:.2}" r="11" fill="#{r:02x}{g:02x}{b:02x}" stroke="black" stroke-width="0.5"><title>{} {v:.4}</title></circle>"##,
            s.label
        );
        let _ = writeln!(
            svg,
            r#"<text x="{sx:.2}" y="{:.2}" font-size="8" text-anchor="middle" font-family="sans-serif">{}</text>"#,
            sy + 3.0,
            s.label
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Time-averaged activation of one last-stage conv kernel in one encoder
/// column, averaged over windows, spread back to the sensors (pooled row `r`
/// covers sensors `4r..4r+4` in montage order) and scaled to `[0, 1]`.
pub fn extract_kernel_map(model: &StannModel, windows: &WindowSet, column: usize, kernel: usize) -> Result<Vec<f64>> {
    let cfg = &model.config;
    let spec = cfg
        .columns
        .get(column)
        .ok_or_else(|| Error::arg(format!("column {column} out of range; model has {}", cfg.columns.len())))?;
    if kernel >= spec.out_channels() {
        return Err(Error::arg(format!("kernel {kernel} out of range; column {column} has {}", spec.out_channels())));
    }
    if windows.is_empty() {
        return Err(Error::data("no windows to average"));
    }
    let rows = cfg.n_channels / 4;
    let mut acc = vec![0.0; rows];
    let b = windows.len();
    let mut start = 0;
    while start < b {
        let end = (start + 256).min(b);
        let batch = Batch::from_windows(windows.x.slice(s![start..end, .., ..]));
        let trace = model.trace(&batch)?;
        let act = trace.column_output(column).expect("column checked");
        let map = act.index_axis(Axis(3), kernel);
        for (r, a) in acc.iter_mut().enumerate() {
            *a += map.slice(s![.., r, ..]).sum();
        }
        start = end;
    }
    let per_row: Vec<f64> = acc.iter().map(|a| a / (b * cfg.timesteps / 4) as f64).collect();
    let sensors: Vec<f64> = (0..cfg.n_channels).map(|i| per_row[(i / 4).min(rows - 1)]).collect();
    Ok(normalize_unit(&sensors))
}

/// Writes `label,e0,...` with one row per window of hidden dense activations.
pub fn export_embeddings<W: Write>(model: &StannModel, windows: &WindowSet, writer: W) -> Result<usize> {
    let emb = model.embed(windows.x.view())?;
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["label".to_string()];
    header.extend((0..emb.ncols()).map(|j| format!("e{j}")));
    w.write_record(&header)?;
    for (row, &label) in emb.rows().into_iter().zip(&windows.labels) {
        let mut rec = vec![label.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(emb.nrows())
}

/// Path helper for CLI outputs: creates the parent directory.
pub fn prepare_output(path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref().to_path_buf();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(path)
}
