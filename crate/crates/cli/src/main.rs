//! `finder`: split, train, evaluate, synthesize and compare.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 data
//! integrity or format error, 4 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use finder_core::data::{load_views, stratified_kfold, Dataset, Part, SplitAssignment};
use finder_core::error::{Error, Result};
use finder_core::losses::RdNormalization;
use finder_core::metrics::{evaluate, export_embeddings, read_predictions, write_predictions, EvalReport};
use finder_core::nn::{checkpoint, ModelConfig};
use finder_core::synth::{generate, SynthSplit, SynthSpec};
use finder_core::training::{comparison_rows, resolve_views, run_experiment, score, to_csv, to_markdown, EarlyStopMetric, RunReport, TrainConfig};

#[derive(Parser)]
#[command(name = "finder", version, about = "Source attribution over pre-extracted speech representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write stratified fold assignments for a manifest.
    Split(SplitArgs),
    /// Train and evaluate every fold of a manifest's split policy.
    Train(TrainArgs),
    /// Score a checkpoint on one split part, or score a prediction CSV.
    Eval(EvalArgs),
    /// Generate a synthetic multi-view dataset.
    Synth(SynthArgs),
    /// Merge run reports into a comparison table.
    Report(ReportArgs),
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Number of folds; defaults to the manifest's split policy.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, requires = "k")]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Directory receiving one `<fold>.json` per split.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Model configuration JSON.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Training configuration JSON; flags below override its fields.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Model kind (fcn, cnn, finder, concat_fusion).
    #[arg(long)]
    kind: Option<String>,
    /// Comma-separated representation names.
    #[arg(long, value_delimiter = ',')]
    views: Option<Vec<String>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long, value_enum)]
    early_stop_metric: Option<StopMetricArg>,
    #[arg(long)]
    no_early_stopping: bool,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, value_enum)]
    normalization: Option<NormalizationArg>,
    /// Enable the learnable branch gates of the fusion models.
    #[arg(long)]
    gate: bool,
    #[arg(long)]
    no_shuffle: bool,
    /// Run folds concurrently and record wall-clock time in the report.
    #[arg(long)]
    no_strict: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum StopMetricArg {
    ValLoss,
    ValAccuracy,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormalizationArg {
    ReluEps,
    Softmax,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Prediction CSV (sample_id, label, one probability column per class).
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    manifest: Option<PathBuf>,
    /// Split assignment JSON as written by `finder split`.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Split name from the manifest's own policy (defaults to the first).
    #[arg(long, conflicts_with = "split")]
    fold: Option<String>,
    #[arg(long, default_value = "test")]
    part: String,
    #[arg(long, value_delimiter = ',')]
    views: Option<Vec<String>>,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    /// EvalReport JSON destination; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    predictions_out: Option<PathBuf>,
    /// Penultimate-layer features as CSV.
    #[arg(long)]
    embeddings_out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// SynthSpec JSON; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_classes: Option<usize>,
    #[arg(long)]
    n_per_class: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    /// Write a single stratified holdout with this test fraction instead of k folds.
    #[arg(long, conflicts_with = "k")]
    holdout_test_fraction: Option<f64>,
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// RunReport JSON files.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "markdown")]
    format: TableFormat,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TableFormat {
    Csv,
    Markdown,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn pretty<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes") + "\n"
}

fn split(args: SplitArgs) -> Result<()> {
    let dataset = Dataset::load(&args.manifest)?;
    let splits = match args.k {
        Some(k) => stratified_kfold(
            dataset.sample_ids(),
            dataset.labels(),
            dataset.class_names(),
            k,
            args.seed.unwrap_or(0),
            args.val_fraction,
        )?,
        None => dataset.splits()?,
    };
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    for s in &splits {
        s.write(args.out.join(format!("{}.json", s.name)))?;
    }
    println!("wrote {} split(s) to {}", splits.len(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let dataset = Dataset::load(&args.manifest)?;
    let mut cfg: TrainConfig = match &args.train_config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    cfg.seed = args.seed;
    if let Some(v) = args.views {
        cfg.views = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.patience {
        cfg.early_stop_patience = v;
    }
    if let Some(m) = args.early_stop_metric {
        cfg.early_stop_metric = match m {
            StopMetricArg::ValLoss => EarlyStopMetric::ValLoss,
            StopMetricArg::ValAccuracy => EarlyStopMetric::ValAccuracy,
        };
    }
    if args.no_early_stopping {
        cfg.early_stopping = false;
    }
    if let Some(v) = args.lambda {
        cfg.renyi.lambda = v;
    }
    if let Some(v) = args.alpha {
        cfg.renyi.alpha = v;
    }
    if let Some(v) = args.epsilon {
        cfg.renyi.epsilon = v;
    }
    if args.no_shuffle {
        cfg.shuffle = false;
    }
    if args.no_strict {
        cfg.strict = false;
    }
    let mut model_cfg = match (&args.model_config, &args.kind) {
        (Some(p), _) => read_json::<ModelConfig>(p)?,
        (None, Some(kind)) => ModelConfig::new(kind, Vec::new(), dataset.n_classes()),
        (None, None) => return Err(Error::Config("give --model-config or --kind".into())),
    };
    if let Some(kind) = args.kind {
        model_cfg.kind = kind;
    }
    if let Some(n) = args.normalization {
        model_cfg.rd_normalization = match n {
            NormalizationArg::ReluEps => RdNormalization::ReluEps,
            NormalizationArg::Softmax => RdNormalization::Softmax,
        };
    }
    if args.gate {
        model_cfg.gate_enabled = true;
    }
    let report = run_experiment(&dataset, &model_cfg, &cfg, Some(&args.out))?;
    if let Some(avg) = &report.averages {
        println!(
            "{} on {}: {} fold(s), accuracy {:.4}, mean EER {:.4}, {} parameters",
            report.model_kind,
            report.views.join("+"),
            report.folds.len(),
            avg.accuracy,
            avg.mean_eer,
            report.parameter_count
        );
    }
    println!("report: {}", args.out.join("report.json").display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let report: EvalReport = if let Some(pred) = &args.predictions {
        let (_, scores) = read_predictions(pred)?;
        evaluate(&scores)?
    } else {
        let ckpt = args.checkpoint.as_ref().expect("clap enforces checkpoint or predictions");
        let manifest = args
            .manifest
            .as_ref()
            .ok_or_else(|| Error::Config("--manifest is required with --checkpoint".into()))?;
        let dataset = Dataset::load(manifest)?;
        let mut model = checkpoint::load::<f32>(ckpt)?;
        let selection = TrainConfig {
            views: args.views.clone().unwrap_or_default(),
            ..TrainConfig::default()
        };
        let (indices, _) = resolve_views(&dataset, model.config(), &selection)?;
        let split: SplitAssignment = match (&args.split, &args.fold) {
            (Some(p), _) => SplitAssignment::read(p)?,
            (None, name) => {
                let splits = dataset.splits()?;
                match name {
                    Some(n) => splits
                        .into_iter()
                        .find(|s| &s.name == n)
                        .ok_or_else(|| Error::Config(format!("no split named {n:?}")))?,
                    None => splits.into_iter().next().expect("at least one split"),
                }
            }
        };
        let part: Part = args.part.parse()?;
        let data = load_views(&dataset, &indices, split.ids(part))?;
        let scores = score(&mut model, &data, args.batch_size, dataset.class_names())?;
        if let Some(p) = &args.predictions_out {
            write_predictions(p, &data.sample_ids, &scores)?;
        }
        if let Some(p) = &args.embeddings_out {
            export_embeddings(&mut model, &data, p)?;
        }
        evaluate(&scores)?
    };
    for w in &report.warnings {
        log::warn!("{w}");
    }
    match &args.out {
        Some(p) => {
            write_text(p, &pretty(&report))?;
            println!("accuracy {:.4}, mean EER {:.4}", report.accuracy, report.mean_eer);
        }
        None => print!("{}", pretty(&report)),
    }
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut spec: SynthSpec = match &args.spec {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    if let Some(v) = args.n_classes {
        spec.n_classes = v;
    }
    if let Some(v) = args.n_per_class {
        spec.n_per_class = v;
    }
    if let Some(v) = args.dims {
        spec.view_dims = v;
    }
    if let Some(v) = args.sigma {
        spec.sigma = v;
    }
    if let Some(v) = args.rho {
        spec.rho = v;
    }
    if let Some(v) = args.separation {
        spec.separation = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.name {
        spec.dataset_name = v;
    }
    if let Some(k) = args.k {
        let val_fraction = match spec.split {
            SynthSplit::Kfold { val_fraction, .. } | SynthSplit::Official { val_fraction, .. } => val_fraction,
        };
        spec.split = SynthSplit::Kfold { k, val_fraction };
    }
    if let Some(test_fraction) = args.holdout_test_fraction {
        spec.split = SynthSplit::Official {
            val_fraction: 0.1,
            test_fraction,
        };
    }
    let data = generate(&spec)?;
    data.write(&args.out)?;
    println!("wrote {} samples x {} view(s) to {}", data.banks[0].len(), data.banks.len(), args.out.display());
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let reports = args
        .reports
        .iter()
        .map(|p| {
            let label = p
                .parent()
                .and_then(|d| d.file_name())
                .filter(|_| p.file_name().is_some_and(|f| f == "report.json"))
                .or_else(|| p.file_stem())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string());
            Ok((label, RunReport::read(p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = comparison_rows(&reports);
    let table = match args.format {
        TableFormat::Csv => to_csv(&rows)?,
        TableFormat::Markdown => to_markdown(&rows),
    };
    match &args.out {
        Some(p) => write_text(p, &table),
        None => {
            print!("{table}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
