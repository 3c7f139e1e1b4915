use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use stann_core::graph::{build_knn_adjacency, Montage, EMOTIV_14};
use stann_core::io::{
    describe_checkpoint, emit_topomap, Checkpoint, export_embeddings, extract_kernel_map, prepare_output, read_checkpoint,
    read_checkpoint_for, read_dataset, write_checkpoint, write_dataset, Dataset,
};
use stann_core::model::StannModel;
use stann_core::prep::{prepare, WindowSet};
use stann_core::protocol::RunConfig;
use stann_core::signal::{generate_synthetic, Band, Dimension, SynthSpec};
use stann_core::train::{cross_validate, evaluate_model, train_model, CvReport, FoldResult};
use stann_core::transfer::{finetune, select_budget, train_from_scratch, write_tl_report, Budget, FreezeScheme, TlRow};
use stann_core::Error;

#[derive(Parser)]
#[command(name = "stann", version, about = "Graph-smoothed affect classification from multi-channel recordings")]
struct Cli {
    /// TOML run configuration; flags given on the command line take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

/// Preprocessing overrides shared by every command that windows a dataset.
#[derive(Args, Clone, Default)]
struct PrepFlags {
    /// theta, alpha, beta, gamma or wide.
    #[arg(long)]
    band: Option<Band>,
    /// Neighbours per sensor for graph smoothing.
    #[arg(long)]
    knn: Option<usize>,
    /// Graph frequencies kept by the smoother.
    #[arg(long)]
    bandwidth: Option<usize>,
    /// Rating threshold for the high class.
    #[arg(long)]
    threshold: Option<f64>,
    /// valence, arousal or dominance.
    #[arg(long)]
    dimension: Option<Dimension>,
    /// Keep only these sensors, in order: a comma list or `emotiv14`.
    #[arg(long)]
    channels: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the K-NN sensor graph of a montage; report eigenvalues and write edges.
    Graph {
        #[arg(long)]
        montage: PathBuf,
        #[arg(long, default_value_t = 4)]
        knn: usize,
        /// Edge CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Graph-smooth every trial of a dataset and write a new container.
    Smooth {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 4)]
        knn: usize,
        #[arg(long)]
        bandwidth: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Preprocess and window a dataset; write one `window,trial,label` row per window.
    Segment {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        prep: PrepFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic two-class dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        channels: usize,
        #[arg(long, default_value_t = 40)]
        trials: usize,
        #[arg(long, default_value_t = 2.0)]
        class_effect: f64,
        #[arg(long, default_value_t = 1.0)]
        noise_sd: f64,
        #[arg(long, default_value_t = 60.0)]
        secs: f64,
        #[arg(long, default_value_t = 128.0)]
        fs: f64,
        #[arg(long, default_value = "s01")]
        subject: String,
    },
    /// Cross-validate on a dataset; optionally save a model trained on all windows.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        prep: PrepFlags,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Directory for results.csv and summary.json.
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint directory for the final model.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Score a checkpoint on every window of a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        prep: PrepFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a checkpoint on a target dataset under a freeze scheme and budget.
    Transfer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        prep: PrepFlags,
        /// a-e, or a TOML file with `frozen = [block ids]`.
        #[arg(long, default_value = "a")]
        scheme: String,
        /// 1trial, 10pct, 20pct or 90pct.
        #[arg(long, default_value = "20pct")]
        budget: Budget,
        /// Consecutive seeds to run, starting at --seed.
        #[arg(long, default_value_t = 1)]
        repeats: u64,
        /// Also train from scratch on the same calibration windows.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint directory for the first fine-tuned model.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Render the time-averaged map of one last-stage conv kernel as SVG.
    Topo {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        prep: PrepFlags,
        #[arg(long, default_value_t = 0)]
        column: usize,
        #[arg(long, default_value_t = 0)]
        kernel: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export hidden dense-layer activations, one row per window.
    Embed {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        prep: PrepFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Checkpoint utilities.
    Checkpoint {
        #[command(subcommand)]
        action: CheckpointAction,
    },
}

#[derive(Subcommand)]
enum CheckpointAction {
    /// Print blocks, shapes and trainability.
    Inspect { path: PathBuf },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Argument(_)) => 2,
        Some(Error::Numeric(_)) => 4,
        Some(_) => 3,
        None => 3,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.finetune.seed = seed;
    }
    Ok(cfg)
}

fn apply_prep(cfg: &mut RunConfig, flags: &PrepFlags) {
    if let Some(b) = flags.band {
        cfg.prep.band = Some(b);
    }
    if flags.knn.is_some() {
        cfg.prep.knn = flags.knn;
    }
    if flags.bandwidth.is_some() {
        cfg.prep.bandwidth = flags.bandwidth;
    }
    if flags.threshold.is_some() {
        cfg.prep.threshold = flags.threshold;
    }
    if let Some(d) = flags.dimension {
        cfg.prep.dimension = d;
    }
}

fn channel_list(spec: &str) -> Vec<String> {
    if spec.eq_ignore_ascii_case("emotiv14") {
        EMOTIV_14.iter().map(|s| s.to_string()).collect()
    } else {
        spec.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
    }
}

fn load_windows(path: &Path, cfg: &RunConfig, flags: &PrepFlags) -> Result<WindowSet> {
    let data = read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))?;
    let windows = prepare(&data.trials, &data.montage, &cfg.prep)?;
    Ok(match &flags.channels {
        Some(spec) => windows.select_channels(&channel_list(spec))?,
        None => windows,
    })
}

/// Reads a checkpoint, rejecting it unless its input shape matches the windows.
fn load_checkpoint(dir: &Path, windows: &WindowSet) -> Result<Checkpoint> {
    let mut expected = read_checkpoint(dir)?.model.config;
    expected.n_channels = windows.n_channels();
    expected.timesteps = windows.window_len();
    Ok(read_checkpoint_for(dir, &expected)?)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(prepare_output(path)?, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Graph { montage, knn, out } => {
            let m = Montage::read_csv(&montage)?;
            let g = build_knn_adjacency(&m, knn)?;
            println!("sensors {} knn {} edges {}", g.n(), knn, g.edges().len());
            let eig: Vec<String> = g.eigvals.iter().map(|v| format!("{v:.6}")).collect();
            println!("eigenvalues {}", eig.join(" "));
            match out {
                Some(p) => g.write_edges_csv(fs::File::create(prepare_output(&p)?)?)?,
                None => g.write_edges_csv(std::io::stdout().lock())?,
            }
        }
        Command::Smooth { data, knn, bandwidth, out } => {
            let mut d = read_dataset(&data)?;
            let g = build_knn_adjacency(&d.montage, knn)?;
            let w = bandwidth.unwrap_or_else(|| g.default_bandwidth());
            for t in &mut d.trials {
                t.pretrial = g.lowpass_smooth(t.pretrial.mapv(f64::from).view(), w)?.mapv(|v| v as f32);
                t.data = g.lowpass_smooth(t.data.mapv(f64::from).view(), w)?.mapv(|v| v as f32);
            }
            write_dataset(&out, &d)?;
            println!("smoothed {} trials with bandwidth {w} of {}", d.trials.len(), g.n());
        }
        Command::Segment { data, prep, out } => {
            apply_prep(&mut cfg, &prep);
            let w = load_windows(&data, &cfg, &prep)?;
            let [lo, hi] = w.class_counts();
            println!("windows {} ({} x {}), low {lo}, high {hi}", w.len(), w.n_channels(), w.window_len());
            if let Some(p) = out {
                let mut wtr = csv::Writer::from_path(prepare_output(&p)?)?;
                wtr.write_record(["window", "trial", "label"])?;
                for i in 0..w.len() {
                    wtr.write_record([i.to_string(), w.trial_keys[w.groups[i]].clone(), w.labels[i].to_string()])?;
                }
                wtr.flush()?;
                write_json(&sidecar(&p), &serde_json::json!({ "windows": w.len(), "config": cfg.echo() }))?;
            }
        }
        Command::Synth { out, channels, trials, class_effect, noise_sd, secs, fs: rate, subject } => {
            let montage = match channels {
                32 => Montage::standard_1020_32(),
                14 => Montage::standard_1020_32().subset(&EMOTIV_14)?.0,
                n if n <= 32 => {
                    let full = Montage::standard_1020_32();
                    full.subset(&full.labels()[..n])?.0
                }
                n => return Err(Error::Argument(format!("no built-in montage with {n} sensors")).into()),
            };
            let spec = SynthSpec {
                n_channels: channels,
                fs: rate,
                n_trials: trials,
                class_effect,
                noise_sd,
                trial_secs: secs,
                subject_id: subject,
                ..SynthSpec::default()
            };
            let seed = cli.seed.unwrap_or(0);
            let d = Dataset { montage, trials: generate_synthetic(&spec, seed)? };
            write_dataset(&out, &d)?;
            println!("wrote {} trials of {} channels to {}", d.trials.len(), channels, out.display());
        }
        Command::Train { data, prep, folds, epochs, out, save } => {
            apply_prep(&mut cfg, &prep);
            if let Some(f) = folds {
                cfg.train.folds = f;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.train.validate()?;
            let w = load_windows(&data, &cfg, &prep)?;
            let model_cfg = cfg.model.config(w.n_channels(), w.window_len());
            let report = cross_validate(&model_cfg, &w, &cfg.train)?;
            fs::create_dir_all(&out)?;
            report.write_csv(fs::File::create(out.join("results.csv"))?)?;
            write_json(&out.join("summary.json"), &report.summary_json(&cfg.echo()))?;
            println!("accuracy {:.4} +- {:.4}, f1 {:.4} +- {:.4}", report.mean_accuracy, report.sd_accuracy, report.mean_f1, report.sd_f1);
            if let Some(dir) = save {
                let mut model = StannModel::build(model_cfg, cfg.train.seed)?;
                let mut state = model.optimizer_state(cfg.train.optimizer, 1.0);
                let all: Vec<usize> = (0..w.len()).collect();
                train_model(&mut model, &mut state, &w, &all, &cfg.train, cfg.train.seed)?;
                write_checkpoint(&dir, &model, Some(&state))?;
                println!("saved model to {}", dir.display());
            }
        }
        Command::Eval { data, checkpoint, prep, out } => {
            apply_prep(&mut cfg, &prep);
            let w = load_windows(&data, &cfg, &prep)?;
            let ck = load_checkpoint(&checkpoint, &w)?;
            let all: Vec<usize> = (0..w.len()).collect();
            let metrics = evaluate_model(&ck.model, &w, &all)?;
            let report = CvReport::from_folds(vec![FoldResult { repeat: 0, fold: 0, metrics }]);
            report.write_csv(fs::File::create(prepare_output(&out)?)?)?;
            write_json(&sidecar(&out), &report.summary_json(&cfg.echo()))?;
            println!("accuracy {:.4} f1 {:.4} on {} windows", metrics.accuracy, metrics.f1, w.len());
        }
        Command::Transfer { data, checkpoint, prep, scheme, budget, repeats, baseline, out, save } => {
            apply_prep(&mut cfg, &prep);
            cfg.finetune.budget = budget;
            let scheme: FreezeScheme = scheme.parse()?;
            let w = load_windows(&data, &cfg, &prep)?;
            let pre = load_checkpoint(&checkpoint, &w)?;
            let mut rows = Vec::new();
            let base_seed = cfg.finetune.seed;
            for r in 0..repeats.max(1) {
                let seed = base_seed + r;
                let ft = stann_core::transfer::FinetuneConfig { seed, ..cfg.finetune.clone() };
                let split = select_budget(&w, budget, seed)?;
                let (model, m) = finetune(&pre.model, &scheme, &w, &split, &ft)?;
                rows.push(TlRow { scheme: scheme.name(), budget: budget.to_string(), seed, accuracy: m.accuracy, f1: m.f1 });
                if baseline {
                    let (_, s) = train_from_scratch(&pre.model.config, &w, &split, &ft)?;
                    rows.push(TlRow { scheme: "scratch".into(), budget: budget.to_string(), seed, accuracy: s.accuracy, f1: s.f1 });
                }
                if let (0, Some(dir)) = (r, &save) {
                    write_checkpoint(dir, &model, None)?;
                }
            }
            write_tl_report(&rows, fs::File::create(prepare_output(&out)?)?)?;
            write_json(&sidecar(&out), &serde_json::json!({ "rows": rows.len(), "config": cfg.echo() }))?;
            for r in &rows {
                println!("{} {} seed {}: accuracy {:.4} f1 {:.4}", r.scheme, r.budget, r.seed, r.accuracy, r.f1);
            }
        }
        Command::Topo { data, checkpoint, prep, column, kernel, out } => {
            apply_prep(&mut cfg, &prep);
            let w = load_windows(&data, &cfg, &prep)?;
            let ck = load_checkpoint(&checkpoint, &w)?;
            let montage = read_dataset(&data)?.montage;
            let montage = match &prep.channels {
                Some(spec) => montage.subset(&channel_list(spec))?.0,
                None => montage,
            };
            let values = extract_kernel_map(&ck.model, &w, column, kernel)?;
            fs::write(prepare_output(&out)?, emit_topomap(&montage, &values)?)?;
            let labelled: serde_json::Map<String, serde_json::Value> =
                montage.labels().into_iter().zip(&values).map(|(l, v)| (l, serde_json::json!(v))).collect();
            write_json(&sidecar(&out), &serde_json::json!({ "column": column, "kernel": kernel, "values": labelled, "config": cfg.echo() }))?;
            println!("wrote {}", out.display());
        }
        Command::Embed { data, checkpoint, prep, out } => {
            apply_prep(&mut cfg, &prep);
            let w = load_windows(&data, &cfg, &prep)?;
            let ck = load_checkpoint(&checkpoint, &w)?;
            let n = export_embeddings(&ck.model, &w, fs::File::create(prepare_output(&out)?)?)?;
            write_json(&sidecar(&out), &serde_json::json!({ "windows": n, "config": cfg.echo() }))?;
            println!("wrote {n} embeddings to {}", out.display());
        }
        Command::Checkpoint { action: CheckpointAction::Inspect { path } } => {
            print!("{}", describe_checkpoint(&read_checkpoint(&path)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    msg = if msg.is_empty() { cause } else { format!("{msg}: {cause}") };
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
