use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use cholseq::data::{
    generate_synthetic, load_csv, split_folds, write_csv, Cohort, IcvMode, LoadOptions, Normalization, Sequence,
    SynthConfig, CLASS_NAMES, FEATURE_NAMES,
};
use cholseq::metrics::EvalReport;
use cholseq::model::cv::{self, RunSpec};
use cholseq::model::{
    evaluate, forecast, impute, load_checkpoint, save_checkpoint, train, Checkpoint, EpochStats, ModelConfig,
    ModelParams, TrainConfig,
};

const RESOLVED: &str = "config.resolved.json";

#[derive(Parser)]
#[command(name = "cholseq", version, about = "Geometric sequence models for longitudinal data with missing values")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort CSV.
    Synth(SynthArgs),
    /// Train a model, optionally with k-fold cross-validation.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a cohort.
    Eval(EvalArgs),
    /// Fill missing feature values.
    Impute(ImputeArgs),
    /// Roll trajectories forward past each subject's last visit.
    Forecast(ForecastArgs),
}

#[derive(Args, Serialize)]
struct SynthArgs {
    /// JSON generator settings; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite an existing output file.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON training settings; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Also run k-fold cross-validation.
    #[arg(long)]
    folds: Option<usize>,
    /// Resample visits on load; same as `load.regularize_yearly` in the config.
    #[arg(long, value_enum)]
    regularize: Option<Regularize>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Regularize {
    /// Keep one visit per 12-month mark.
    Yearly,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    regularize: Option<Regularize>,
}

#[derive(Args, Serialize)]
struct ImputeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ForecastArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Months past the last visit; defaults the grid to 6-month steps.
    #[arg(long)]
    horizon: Option<f64>,
    /// Comma-separated months past the last visit.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

/// Settings file accepted by `train`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainSettings {
    model: ModelConfig,
    train: TrainConfig,
    icv_mode: IcvMode,
    load: LoadOptions,
}

/// What `config.resolved.json` records: the command line plus every
/// effective setting after defaults and overrides.
#[derive(Serialize)]
struct Resolved<'a, A: Serialize, S: Serialize> {
    command: &'a str,
    version: &'a str,
    args: &'a A,
    settings: S,
}

fn write_resolved<A: Serialize, S: Serialize>(dir: &Path, command: &str, args: &A, settings: S) -> Result<()> {
    let r = Resolved {
        command,
        version: env!("CARGO_PKG_VERSION"),
        args,
        settings,
    };
    let path = dir.join(RESOLVED);
    fs::write(&path, serde_json::to_string_pretty(&r)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

/// Directory a file output lives in, created if needed.
fn parent_dir(file: &Path) -> Result<PathBuf> {
    let dir = match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load(path: &Path, opts: &LoadOptions) -> Result<Cohort> {
    let cohort = load_csv(path, opts).with_context(|| format!("loading {}", path.display()))?;
    ensure!(!cohort.is_empty(), "{}: no subjects with at least {} visits", path.display(), opts.min_visits);
    Ok(cohort)
}

/// Inference keeps every subject, including single-visit ones.
fn inference_load_options() -> LoadOptions {
    LoadOptions {
        min_visits: 1,
        ..LoadOptions::default()
    }
}

fn open_checkpoint(path: &Path, cohort: &Cohort) -> Result<(ModelParams, Normalization)> {
    let Checkpoint { params, normalization } =
        load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let cfg = &params.config;
    ensure!(
        cfg.n_features == cohort.feature_names.len(),
        "checkpoint expects {} features but the data has {}",
        cfg.n_features,
        cohort.feature_names.len()
    );
    ensure!(
        cfg.n_classes == cohort.class_names.len(),
        "checkpoint expects {} classes but the data has {}",
        cfg.n_classes,
        cohort.class_names.len()
    );
    let norm = normalization.context("checkpoint carries no normalization statistics")?;
    ensure!(
        norm.scales.len() == cfg.n_features,
        "checkpoint normalization covers {} features, model has {}",
        norm.scales.len(),
        cfg.n_features
    );
    if norm.icv_mode != IcvMode::None && !cohort.has_icv() {
        bail!("checkpoint normalizes volumes by ICV ({:?}) but the data has no ICV column", norm.icv_mode);
    }
    Ok((params, norm))
}

fn normalize_all(cohort: &Cohort, norm: &Normalization) -> Result<Vec<Sequence>> {
    let mut clipped = 0;
    let out = cohort
        .sequences
        .iter()
        .map(|s| {
            let (s, n) = norm.apply(s)?;
            clipped += n;
            Ok(s)
        })
        .collect::<cholseq::Result<Vec<_>>>()?;
    if clipped > 0 {
        log::info!("clipped {clipped} normalized value(s) into [0, 1]");
    }
    Ok(out)
}

/// Shortest representation that parses back to the same bits.
fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = read_json(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.out.exists() && !args.force {
        bail!("{} exists; pass --force to overwrite", args.out.display());
    }
    let cohort = generate_synthetic(&cfg)?;
    let dir = parent_dir(&args.out)?;
    write_csv(&args.out, &cohort).with_context(|| format!("writing {}", args.out.display()))?;
    write_resolved(&dir, "synth", args, &cfg)?;
    log::info!("wrote {} subjects to {}", cohort.len(), args.out.display());
    Ok(())
}

fn write_loss_log(path: &Path, epochs: &[EpochStats]) -> Result<()> {
    let mut s = String::from("epoch,L_estim,L_pred,penalty,total\n");
    for e in epochs {
        writeln!(s, "{},{},{},{},{}", e.epoch, e.estim, e.pred, e.penalty, e.total)?;
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::write(dir.join("report.json"), report.to_json()? + "\n")?;
    fs::write(dir.join("report.txt"), report.to_table())?;
    Ok(())
}

#[derive(Serialize)]
struct CvSummary {
    folds: usize,
    mauc_mean: f64,
    mauc_std: f64,
    recall_mean: f64,
    recall_std: f64,
    precision_mean: f64,
    precision_std: f64,
    per_fold: Vec<EvalReport>,
}

fn summarize(reports: Vec<EvalReport>) -> CvSummary {
    let stat = |f: fn(&EvalReport) -> f64| cv::mean_std(&reports.iter().map(f).collect::<Vec<_>>());
    let (mauc_mean, mauc_std) = stat(|r| r.mauc);
    let (recall_mean, recall_std) = stat(|r| r.recall);
    let (precision_mean, precision_std) = stat(|r| r.precision);
    CvSummary {
        folds: reports.len(),
        mauc_mean,
        mauc_std,
        recall_mean,
        recall_std,
        precision_mean,
        precision_std,
        per_fold: reports,
    }
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut settings: TrainSettings = read_json(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        settings.train.seed = seed;
    }
    if args.regularize.is_some() {
        settings.load.regularize_yearly = true;
    }
    let raw = load(&args.data, &settings.load)?;
    settings.model.n_features = raw.feature_names.len();
    settings.model.n_classes = raw.class_names.len();
    if settings.icv_mode != IcvMode::None && !raw.has_icv() {
        log::warn!("data has no ICV column; volumes are used without ICV division");
        settings.icv_mode = IcvMode::None;
    }
    settings.model.validate()?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_resolved(&args.out, "train", args, &settings)?;
    let seed = settings.train.seed;

    if let Some(k) = args.folds {
        let folds = split_folds(&raw, k, seed)?;
        let spec = RunSpec {
            model: settings.model.clone(),
            train: settings.train.clone(),
            icv_mode: settings.icv_mode,
            seed,
        };
        let threads = cv::thread_limit()?;
        log::info!("{k}-fold cross-validation on {} subjects, {threads} thread(s)", raw.len());
        let outcomes = cv::run_folds(&raw, &folds, &spec, threads)?;
        for o in &outcomes {
            let dir = args.out.join(format!("fold_{}", o.fold));
            fs::create_dir_all(&dir)?;
            write_loss_log(&dir.join("loss_log.csv"), &o.train_report.epochs)?;
            save_checkpoint(dir.join("checkpoint.bin"), &o.params, Some(&o.normalization))?;
            write_report(&dir, &o.val_report)?;
        }
        let summary = summarize(outcomes.into_iter().map(|o| o.val_report).collect());
        log::info!("cross-validated mAUC {:.4} ± {:.4}", summary.mauc_mean, summary.mauc_std);
        fs::write(args.out.join("cv_summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    }

    let all: Vec<usize> = (0..raw.len()).collect();
    let norm = Normalization::fit(&raw, &all, settings.icv_mode)?;
    let seqs = normalize_all(&raw, &norm)?;
    let mut params = ModelParams::init(settings.model.clone(), seed)?;
    let report = train(&mut params, &seqs, &settings.train, |s| {
        log::info!("epoch {}: total {:.6} (estim {:.6}, pred {:.6})", s.epoch, s.total, s.estim, s.pred)
    })?;
    write_loss_log(&args.out.join("loss_log.csv"), &report.epochs)?;
    save_checkpoint(args.out.join("checkpoint.bin"), &params, Some(&norm))?;
    log::info!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let opts = LoadOptions {
        regularize_yearly: args.regularize.is_some(),
        ..inference_load_options()
    };
    let raw = load(&args.data, &opts)?;
    let (params, norm) = open_checkpoint(&args.checkpoint, &raw)?;
    let seqs = normalize_all(&raw, &norm)?;
    let report = evaluate(&params, &seqs, Some(&norm))?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_report(&args.out, &report)?;
    write_resolved(&args.out, "eval", args, (&params.config, &norm, &opts))?;
    log::info!("mAUC {:.4}, recall {:.4}, precision {:.4}", report.mauc, report.recall, report.precision);
    Ok(())
}

fn cmd_impute(args: &ImputeArgs) -> Result<()> {
    let opts = inference_load_options();
    let raw = load(&args.data, &opts)?;
    let (params, norm) = open_checkpoint(&args.checkpoint, &raw)?;
    let mut filled = raw.clone();
    for seq in &mut filled.sequences {
        let (scaled, _) = norm.apply(seq)?;
        let imputed = impute(&params, &scaled)?;
        for i in 0..seq.len() {
            let icv = norm.icv_for(seq, i);
            for f in 0..seq.n_features() {
                // Observed cells keep their raw bits.
                if seq.mask.get(i, f) == 0.0 {
                    seq.features.set(i, f, norm.invert(f, imputed.get(i, f), icv));
                }
            }
        }
    }
    let dir = parent_dir(&args.out)?;
    write_csv(&args.out, &filled).with_context(|| format!("writing {}", args.out.display()))?;
    write_resolved(&dir, "impute", args, (&params.config, &norm, &opts))?;
    Ok(())
}

/// Months past the last visit at which to forecast.
fn forecast_grid(horizon: Option<f64>, grid: Option<&[f64]>) -> Result<Vec<f64>> {
    if let Some(h) = horizon {
        ensure!(h.is_finite() && h >= 0.0, "--horizon must be a non-negative number of months");
    }
    match (grid, horizon) {
        (Some(g), h) => {
            if let Some(h) = h {
                ensure!(g.iter().all(|&m| m <= h), "--grid has points beyond --horizon {h}");
            }
            Ok(g.to_vec())
        }
        (None, Some(h)) => Ok((1..).map(|k| 6.0 * k as f64).take_while(|&m| m <= h).collect()),
        (None, None) => bail!("forecast needs --horizon or --grid"),
    }
}

fn cmd_forecast(args: &ForecastArgs) -> Result<()> {
    let grid = forecast_grid(args.horizon, args.grid.as_deref())?;
    let opts = inference_load_options();
    let raw = load(&args.data, &opts)?;
    let (params, norm) = open_checkpoint(&args.checkpoint, &raw)?;
    let mut out = String::from("subject_id,months");
    for name in FEATURE_NAMES {
        write!(out, ",{name}")?;
    }
    for name in CLASS_NAMES {
        write!(out, ",p_{name}")?;
    }
    out.push('\n');
    for seq in &raw.sequences {
        let (scaled, _) = norm.apply(seq)?;
        let points = forecast(&params, &scaled, &grid)?;
        let icv = norm.icv_for(seq, seq.len());
        for p in points {
            write!(out, "{},{}", seq.subject_id, num(p.months))?;
            for (f, &v) in p.features.iter().enumerate() {
                write!(out, ",{}", num(norm.invert(f, v, icv)))?;
            }
            for &q in &p.probs {
                write!(out, ",{}", num(q))?;
            }
            out.push('\n');
        }
    }
    let dir = parent_dir(&args.out)?;
    let mut file = fs::File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    file.write_all(out.as_bytes())?;
    write_resolved(&dir, "forecast", args, (&params.config, &norm, &opts, &grid))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Impute(a) => cmd_impute(a),
        Command::Forecast(a) => cmd_forecast(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
