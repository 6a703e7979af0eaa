//! The `versapants` command line.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::evaluation::{
    ablation_run, bench_latency, infer_session, run_protocol, write_reports_csv, write_summary_json, EvalConfig,
    FoldOutcome, MetricsReport, Protocol,
};
use crate::models::{build, ArchitectureKind, ModelConfig};
use crate::rotations::matrix_to_axis_angle;
use crate::signal::{compute_minmax, load_dataset, prepare_session, read_session, NormalizationStats, CHANNEL_NAMES};
use crate::simulator::{gen_dataset, ArtifactConfig, IMPLEMENTED_MOVEMENTS};
use crate::training::{build_samples, train_model, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "versapants",
    version,
    about = "Capacitive-garment lower-body pose estimation toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset, one session per subject.
    Simulate(SimulateArgs),
    /// Train a model on every session of a dataset.
    Train(TrainArgs),
    /// Cross-validate (LOPO or LOEO) and write per-joint reports.
    Eval(EvalArgs),
    /// LOPO with each channel pair zeroed in turn.
    Ablate(AblateArgs),
    /// Print parameter count, FLOPs and weight size of a model config.
    Count(CountArgs),
    /// Time single-window inference.
    Bench(BenchArgs),
    /// Predict a per-frame pose CSV for one session.
    Infer(InferArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Lopo,
    Loeo,
}

impl From<Mode> for Protocol {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Lopo => Protocol::Lopo,
            Mode::Loeo => Protocol::Loeo,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Versapants,
    CnnHybrid,
    Bilstm,
}

impl From<Kind> for ArchitectureKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Versapants => ArchitectureKind::Versapants,
            Kind::CnnHybrid => ArchitectureKind::CnnHybrid,
            Kind::Bilstm => ArchitectureKind::Bilstm,
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 11, value_parser = clap::value_parser!(u64).range(1..))]
    pub subjects: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated movement ids; defaults to every implemented movement.
    #[arg(long, value_delimiter = ',')]
    pub movements: Vec<u32>,
    /// `default`, `none`, or a JSON file of artifact settings.
    #[arg(long, default_value = "default")]
    pub artifacts: String,
}

/// Model and training settings shared by train, eval and ablate.
#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model config JSON; defaults to the standard VersaPants model.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the architecture named in the config.
    #[arg(long, value_enum)]
    pub kind: Option<Kind>,
    /// Training config JSON; defaults to desk scale.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Weight file to write; a `.json` sidecar with config and scaling goes next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Lopo)]
    pub mode: Mode,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 1)]
    pub test_stride: usize,
    /// Scale with min/max over the whole dataset instead of each fold's training side.
    #[arg(long)]
    pub global_minmax: bool,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Report CSV; the JSON summary is written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Channel pairs to remove; defaults to all six.
    #[arg(long, value_delimiter = ',')]
    pub pairs: Vec<String>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 1)]
    pub test_stride: usize,
    /// Scale with min/max over the whole dataset instead of each fold's training side.
    #[arg(long)]
    pub global_minmax: bool,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub kind: Option<Kind>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub kind: Option<Kind>,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub iters: u64,
    /// Trained weights; random initialization otherwise.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Session directory (meta.json + sensor.csv).
    #[arg(long)]
    pub session: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Written next to trained weights so `infer` can rebuild the graph and scaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsSidecar {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub stats: NormalizationStats,
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

fn model_config(path: Option<&Path>, kind: Option<Kind>) -> anyhow::Result<ModelConfig> {
    let mut cfg = match path {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::default(),
    };
    if let Some(k) = kind {
        let defaults = ModelConfig::with_kind(k.into());
        if path.is_none() {
            cfg = defaults;
        } else {
            cfg.kind = k.into();
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(a: &ModelArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &a.train_config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    cfg.seed = a.seed;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn artifacts(spec: &str) -> anyhow::Result<ArtifactConfig> {
    let a = match spec {
        "default" => ArtifactConfig::default(),
        "none" => ArtifactConfig::none(),
        path => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading artifact settings {path}"))?;
            serde_json::from_str(&text).with_context(|| format!("parsing artifact settings {path}"))?
        }
    };
    a.validate()?;
    Ok(a)
}

fn cmd_simulate(a: &SimulateArgs) -> anyhow::Result<()> {
    let movements = if a.movements.is_empty() {
        IMPLEMENTED_MOVEMENTS.to_vec()
    } else {
        a.movements.clone()
    };
    let dirs = gen_dataset(
        &a.out,
        a.subjects as usize,
        &movements,
        &artifacts(&a.artifacts)?,
        a.seed,
    )?;
    println!("wrote {} sessions to {}", dirs.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    let model = model_config(a.model.config.as_deref(), a.model.kind)?;
    let train = train_config(&a.model)?;
    let raw = load_dataset(&a.data)?;
    let stats = compute_minmax(raw.iter().map(|l| &l.sensor))?;
    let sessions = raw
        .iter()
        .map(|l| prepare_session(&l.sensor, l.gt.as_ref(), &stats))
        .collect::<crate::Result<Vec<_>>>()?;
    let samples = build_samples(&sessions, model.window_len, train.stride, model.alignment)?;
    let (g, report) = train_model(&model, &samples, &train)?;
    g.save(&a.out)?;
    let sidecar = WeightsSidecar {
        seed: train.seed,
        model,
        train: train.clone(),
        stats,
    };
    let side = sidecar_path(&a.out);
    std::fs::write(&side, serde_json::to_string_pretty(&sidecar)? + "\n")
        .with_context(|| format!("writing {}", side.display()))?;
    if let Some(h) = &a.history {
        report.write_history_csv(h)?;
    }
    let last = report.history.last().expect("history has the initial row");
    println!(
        "trained on {} windows ({} validation), {} epochs; final train loss {:.4}{}",
        report.train_indices.len(),
        report.val_indices.len(),
        train.epochs,
        last.train_loss,
        last.val_loss.map(|v| format!(", val loss {v:.4}")).unwrap_or_default()
    );
    Ok(())
}

fn eval_config(m: &ModelArgs, test_stride: usize, global_minmax: bool) -> anyhow::Result<EvalConfig> {
    if test_stride == 0 {
        bail!("--test-stride must be positive");
    }
    Ok(EvalConfig {
        model: model_config(m.config.as_deref(), m.kind)?,
        train: train_config(m)?,
        test_stride,
        global_minmax,
    })
}

fn fold_line(o: &FoldOutcome) -> String {
    format!(
        "fold {:>2} [{}] {}: MPJAE {:.2} deg (baseline {:.2}), MPJPE {:.2} cm (baseline {:.2}), {} test windows",
        o.model.fold_id,
        o.model.ablation_mask,
        o.model.held_out,
        o.model.mpjae_deg.mean,
        o.baseline.mpjae_deg.mean,
        o.model.mpjpe_cm.mean,
        o.baseline.mpjpe_cm.mean,
        o.model.n_windows
    )
}

fn write_outputs(out: &Path, outcomes: &[&FoldOutcome], seed: u64) -> anyhow::Result<()> {
    let models: Vec<MetricsReport> = outcomes.iter().map(|o| o.model.clone()).collect();
    write_reports_csv(out, &models)?;
    let all: Vec<MetricsReport> = outcomes
        .iter()
        .flat_map(|o| [o.model.clone(), o.baseline.clone()])
        .collect();
    write_summary_json(&out.with_extension("json"), &all, seed)?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let cfg = eval_config(&a.model, a.test_stride, a.global_minmax)?;
    let raw = load_dataset(&a.data)?;
    let outcomes = run_protocol(&raw, a.mode.into(), &cfg, None, a.jobs)?;
    for o in &outcomes {
        println!("{}", fold_line(o));
    }
    write_outputs(&a.out, &outcomes.iter().collect::<Vec<_>>(), cfg.train.seed)
}

fn cmd_ablate(a: &AblateArgs) -> anyhow::Result<()> {
    let cfg = eval_config(&a.model, a.test_stride, a.global_minmax)?;
    let raw = load_dataset(&a.data)?;
    let pairs: Vec<&str> = if a.pairs.is_empty() {
        CHANNEL_NAMES.to_vec()
    } else {
        a.pairs.iter().map(String::as_str).collect()
    };
    let arms = ablation_run(&raw, &pairs, &cfg, a.jobs)?;
    let mean_ae = |f: &[FoldOutcome]| f.iter().map(|o| o.model.mpjae_deg.mean).sum::<f64>() / f.len() as f64;
    let reference = mean_ae(&arms[0].1);
    for (name, folds) in &arms {
        let ae = mean_ae(folds);
        println!("{name:<9} MPJAE {ae:.2} deg ({:+.2} vs none)", ae - reference);
    }
    let flat: Vec<&FoldOutcome> = arms.iter().flat_map(|(_, f)| f).collect();
    write_outputs(&a.out, &flat, cfg.train.seed)
}

fn cmd_count(a: &CountArgs) -> anyhow::Result<()> {
    let cfg = model_config(a.config.as_deref(), a.kind)?;
    let g = build(&cfg, 0)?;
    let params = g.count_params();
    let flops = g.count_flops();
    let bytes = 4 * params;
    println!("model   {:?}", cfg.kind);
    println!("params  {params} ({:.1} K)", params as f64 / 1e3);
    println!("flops   {flops} ({:.2} M)", flops as f64 / 1e6);
    println!("weights {bytes} bytes ({:.2} MB)", bytes as f64 / 1e6);
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> anyhow::Result<()> {
    let cfg = model_config(a.config.as_deref(), a.kind)?;
    let mut g = build(&cfg, a.seed)?;
    if let Some(w) = &a.weights {
        g.load(w)?;
    }
    let s = bench_latency(&g, a.iters as usize)?;
    println!(
        "{:?}: {:.3} ± {:.3} ms over {} iterations ({:.1} windows/s)",
        cfg.kind, s.mean_ms, s.std_ms, s.iterations, s.windows_per_s
    );
    Ok(())
}

fn cmd_infer(a: &InferArgs) -> anyhow::Result<()> {
    let side = sidecar_path(&a.weights);
    let text = std::fs::read_to_string(&side).with_context(|| format!("reading {}", side.display()))?;
    let meta: WeightsSidecar = serde_json::from_str(&text).with_context(|| format!("parsing {}", side.display()))?;
    let mut g = build(&meta.model, meta.seed)?;
    g.load(&a.weights)?;
    let session = read_session(&a.session)?;
    let preds = infer_session(&g, &session, &meta.stats, a.stride, meta.model.alignment)?;

    let mut csv = String::from("timestamp_us");
    for j in ["left_hip", "right_hip", "left_knee", "right_knee"] {
        write!(csv, ",{j}_rx,{j}_ry,{j}_rz").unwrap();
    }
    for j in ["left_knee", "right_knee", "left_ankle", "right_ankle"] {
        write!(csv, ",{j}_x,{j}_y,{j}_z").unwrap();
    }
    csv.push('\n');
    for p in &preds {
        write!(csv, "{}", p.frame_timestamp).unwrap();
        for r in p.rotations.to_array() {
            let v = matrix_to_axis_angle(&r)?.0;
            write!(csv, ",{:.6},{:.6},{:.6}", v.x, v.y, v.z).unwrap();
        }
        for v in p.positions.to_array() {
            write!(csv, ",{:.6},{:.6},{:.6}", v.x, v.y, v.z).unwrap();
        }
        csv.push('\n');
    }
    std::fs::write(&a.out, csv).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} poses to {}", preds.len(), a.out.display());
    Ok(())
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Count(a) => cmd_count(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Infer(a) => cmd_infer(a),
    }
}

/// Parses `args`, runs the command and maps failures to exit codes:
/// 2 for usage errors, 1 for everything else.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already embed their source in the message.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
