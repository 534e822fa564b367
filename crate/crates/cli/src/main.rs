//! `fae`: train, score and inspect Fisher autoencoders on CMAPSS-format data.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fae_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use fae_core::cmapss::{
    apply_normalizer, label_rows, prepare, read_cmapss, synth_generate, to_cmapss_string, LabelingConvention,
    Provenance,
};
use fae_core::densities::{fisher_divergence_quadrature, hyvarinen_identity_check, Grid, ScoredDensity1D};
use fae_core::detector::{calibrate_threshold, detect, latent_embed, reconstruction_errors};
use fae_core::fisher_loss::{FaeConfig, LossKind};
use fae_core::model::InitOptions;
use fae_core::trainer::train;

#[derive(Parser, Debug, Serialize)]
#[command(name = "fae", version, about = "Fisher autoencoder anomaly detection for run-to-failure sensor data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Fit a model on the healthy part of a run-to-failure file.
    Train(TrainArgs),
    /// Score a file against a checkpoint and report flagged rows.
    Detect(DetectArgs),
    /// Write per-row posterior-mean coordinates.
    ExportLatent(ExportArgs),
    /// Check the divergence quadrature against closed forms.
    Verify,
    /// Write a synthetic run-to-failure fixture.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Serialize, Clone, Copy)]
struct Labeling {
    /// Leading share of each unit's life treated as healthy.
    #[arg(long, default_value_t = 0.5)]
    normal_fraction: f64,
    /// Rows within this many cycles of failure are labeled anomalous.
    #[arg(long, default_value_t = 30)]
    window: u32,
}

impl From<Labeling> for LabelingConvention {
    fn from(l: Labeling) -> Self {
        Self {
            normal_fraction: l.normal_fraction,
            anomaly_window: l.window,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum LossArg {
    Fae,
    Vae,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Fae => LossKind::Fae,
            LossArg::Vae => LossKind::Vae,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// CMAPSS-format training file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = LossArg::Fae)]
    loss: LossArg,
    #[arg(long, default_value_t = 2)]
    latent: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 3)]
    components: usize,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Monte-Carlo draws per sample.
    #[arg(long, default_value_t = 1)]
    mc_samples: usize,
    #[arg(long, default_value_t = 1.0)]
    k_stability: f64,
    /// Overridden by the FAE_SEED environment variable.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Times the healthy pool is repeated for training.
    #[arg(long, default_value_t = 2)]
    augment: usize,
    #[arg(long)]
    early_stop: bool,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[command(flatten)]
    labeling: Labeling,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum CalibrateOn {
    /// Reconstruction errors of the model's healthy training pool.
    Training,
    /// Errors of the rows being scored.
    Scored,
}

#[derive(Args, Debug, Serialize)]
struct DetectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 90.0)]
    percentile: f64,
    #[arg(long, value_enum, default_value_t = CalibrateOn::Training)]
    calibrate_on: CalibrateOn,
    /// The file is not run-to-failure (e.g. truncated test trajectories):
    /// emit no labels or metrics.
    #[arg(long)]
    unlabeled: bool,
    #[command(flatten)]
    labeling: Labeling,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    unlabeled: bool,
    #[command(flatten)]
    labeling: Labeling,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    units: u32,
    #[arg(long, default_value_t = 120)]
    lifetime: u32,
    /// Final sensor mean shift in noise standard deviations.
    #[arg(long, default_value_t = 5.0)]
    drift: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Usage errors detected after argument parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn read_records(path: &Path) -> Result<Vec<fae_core::cmapss::EngineRecord>> {
    if !path.exists() {
        bail!("no such file: {}", path.display());
    }
    read_cmapss(path).with_context(|| format!("reading {}", path.display()))
}

fn subset_name(path: &Path) -> String {
    path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

fn run_train(args: &TrainArgs, cli: &Cli) -> Result<()> {
    let cfg = FaeConfig {
        latent_dim: args.latent,
        hidden: args.hidden,
        components: args.components,
        mc_samples: args.mc_samples,
        k_stability: args.k_stability,
        batch_size: args.batch,
        epochs: args.epochs,
        learning_rate: args.lr,
        seed: args.seed,
        init: InitOptions::default(),
        early_stop: args.early_stop,
        grad_clip: args.grad_clip,
        ..FaeConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let convention = LabelingConvention::from(args.labeling);
    convention.validate().map_err(|e| usage(e.to_string()))?;
    if args.augment == 0 {
        return Err(usage("--augment must be at least 1"));
    }

    let records = read_records(&args.data)?;
    let prepared = prepare(&records, &subset_name(&args.data), convention, args.augment)?;
    for w in &prepared.warnings {
        eprintln!("warning: {w}");
    }
    let heldout = healthy_rows(&prepared.eval);
    let kind = LossKind::from(args.loss);
    let (model, history) = train(&prepared.train.features, heldout.as_ref(), &cfg, kind)?;

    let calibration = reconstruction_errors(&model, &prepared.normal.features)?;
    let mut ckpt = Checkpoint::new(model, cfg, kind);
    ckpt.norm = Some(prepared.normal.stats.clone());
    ckpt.calibration_errors = Some(calibration);
    ckpt.meta.labeling = Some(convention);

    create_out(&args.out)?;
    save_checkpoint(&ckpt, &args.out.join("model.fae"))?;
    fs::write(args.out.join("history.csv"), history.to_csv())?;
    write_json(&args.out.join("provenance.json"), &prepared.train.provenance)?;
    write_json(&args.out.join("config.json"), cli)?;
    println!(
        "trained {} epochs ({} steps); final train loss {:.6}; wrote {}",
        history.epochs.len(),
        history.steps,
        history.final_train_total().unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

/// Evaluation rows labeled healthy, used for the held-out loss curve.
fn healthy_rows(eval: &fae_core::cmapss::EngineDataset) -> Option<fae_core::Array> {
    let labels = eval.labels.as_ref()?;
    let rows: Vec<usize> = (0..eval.len()).filter(|&i| !labels[i]).collect();
    (!rows.is_empty()).then(|| eval.gather(&rows))
}

fn scored_dataset(
    ckpt: &Checkpoint,
    data: &Path,
    unlabeled: bool,
    labeling: Labeling,
) -> Result<fae_core::cmapss::EngineDataset> {
    let records = read_records(data)?;
    let stats = ckpt
        .norm
        .as_ref()
        .context("checkpoint has no normalization statistics")?;
    let convention = LabelingConvention::from(labeling);
    convention.validate().map_err(|e| usage(e.to_string()))?;
    let labels = (!unlabeled).then(|| label_rows(&records, &convention));
    let provenance = Provenance {
        subset: subset_name(data),
        labeling: (!unlabeled).then_some(convention),
        augmentation_factor: 1,
        ..Provenance::default()
    };
    Ok(apply_normalizer(&records, stats, labels, provenance)?)
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    threshold: f64,
    percentile: f64,
    calibrated_on: CalibrateOn,
    calibration_rows: usize,
    flagged: usize,
    rows: usize,
    labeling: Option<LabelingConvention>,
    metrics: Option<fae_core::detector::Metrics>,
    model: &'a Path,
    data: &'a Path,
}

fn run_detect(args: &DetectArgs, cli: &Cli) -> Result<()> {
    if !(args.percentile > 0.0 && args.percentile <= 100.0) {
        return Err(usage(format!("--percentile must lie in (0, 100], got {}", args.percentile)));
    }
    if !args.model.exists() {
        bail!("no such file: {}", args.model.display());
    }
    let ckpt = load_checkpoint(&args.model).with_context(|| format!("loading {}", args.model.display()))?;
    let dataset = scored_dataset(&ckpt, &args.data, args.unlabeled, args.labeling)?;
    let scored_errors;
    let calibration: &[f64] = match args.calibrate_on {
        CalibrateOn::Training => ckpt
            .calibration_errors
            .as_deref()
            .context("checkpoint has no training-set errors; use --calibrate-on scored")?,
        CalibrateOn::Scored => {
            scored_errors = reconstruction_errors(&ckpt.model, &dataset.features)?;
            &scored_errors
        }
    };
    let threshold = calibrate_threshold(calibration, args.percentile)?;
    let report = detect(&ckpt.model, &dataset, threshold)?;

    create_out(&args.out)?;
    fs::write(args.out.join("report.csv"), report.to_csv())?;
    write_json(
        &args.out.join("metrics.json"),
        &MetricsFile {
            threshold,
            percentile: args.percentile,
            calibrated_on: args.calibrate_on,
            calibration_rows: calibration.len(),
            flagged: report.flagged(),
            rows: report.errors.len(),
            labeling: dataset.provenance.labeling,
            metrics: report.metrics,
            model: &args.model,
            data: &args.data,
        },
    )?;
    write_json(&args.out.join("config.json"), cli)?;
    print!("threshold {threshold:.6} ({} percentile); flagged {} of {} rows", args.percentile, report.flagged(), report.errors.len());
    if let Some(m) = report.metrics {
        print!("; precision {:.4} recall {:.4} f1 {:.4} fpr {:.4}", m.precision, m.recall, m.f1, m.fpr);
    }
    println!();
    Ok(())
}

fn run_export(args: &ExportArgs, cli: &Cli) -> Result<()> {
    if !args.model.exists() {
        bail!("no such file: {}", args.model.display());
    }
    let ckpt = load_checkpoint(&args.model).with_context(|| format!("loading {}", args.model.display()))?;
    let dataset = scored_dataset(&ckpt, &args.data, args.unlabeled, args.labeling)?;
    let z = latent_embed(&ckpt.model, &dataset.features)?;
    let mut out = String::from("row_index,unit,cycle");
    for k in 1..=z.cols() {
        write!(out, ",z{k}")?;
    }
    if dataset.labels.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    for i in 0..z.rows() {
        write!(out, "{i},{},{}", dataset.units[i], dataset.cycles[i])?;
        for v in z.row(i) {
            write!(out, ",{v}")?;
        }
        if let Some(l) = &dataset.labels {
            write!(out, ",{}", l[i] as u8)?;
        }
        out.push('\n');
    }
    create_out(&args.out)?;
    fs::write(args.out.join("latent.csv"), out)?;
    write_json(&args.out.join("config.json"), cli)?;
    println!("wrote {} rows x {} latent columns to {}", z.rows(), z.cols(), args.out.display());
    Ok(())
}

/// Closed-form Fisher divergence between 1-D Gaussians.
fn gaussian_fisher(mp: f64, vp: f64, mq: f64, vq: f64) -> f64 {
    let a = 1.0 / vq - 1.0 / vp;
    let b = mp / vp - mq / vq;
    0.5 * (a * a * (vp + mp * mp) + 2.0 * a * b * mp + b * b)
}

fn run_verify() -> Result<bool> {
    let mut rows: Vec<(String, f64, f64, bool)> = Vec::new();
    let grid = Grid::new(-12.0, 12.0, 4001);
    for (mq, vq, tol) in [(2.0, 1.0, 1e-6), (0.0, 4.0, 1e-6), (0.0, 1.0, 1e-10)] {
        let p = ScoredDensity1D::gaussian(0.0, 1.0);
        let q = ScoredDensity1D::gaussian(mq, vq);
        let got = fisher_divergence_quadrature(&p, &q, grid)?;
        let err = (got - gaussian_fisher(0.0, 1.0, mq, vq)).abs();
        rows.push((format!("D(N(0,1) || N({mq},{vq}))"), got, err, err < tol));
    }
    let pairs = [
        (ScoredDensity1D::gaussian(0.0, 1.0), ScoredDensity1D::gaussian(2.0, 1.0), "N(0,1) vs N(2,1)", 0.0, 1.0),
        (ScoredDensity1D::gaussian(1.5, 0.5), ScoredDensity1D::gaussian(-1.0, 2.0), "N(1.5,0.5) vs N(-1,2)", 1.5, 0.5),
        (
            ScoredDensity1D::gaussian(0.0, 2.0),
            ScoredDensity1D::mixture(&[0.5, 0.5], &[-1.0, 1.0], &[1.0, 1.0]),
            "N(0,2) vs mixture",
            0.0,
            2.0,
        ),
    ];
    for (p, q, name, mean, var) in &pairs {
        let sd = f64::sqrt(*var);
        let check = hyvarinen_identity_check(p, q, Grid::new(mean - 8.0 * sd, mean + 8.0 * sd, 4001))?;
        rows.push((format!("identity {name}"), check.lhs, check.gap(), check.gap() < 1e-6));
    }
    println!("{:<34} {:>14} {:>10}  result", "check", "value", "error");
    for (name, value, err, ok) in &rows {
        println!("{name:<34} {value:>14.9} {err:>10.2e}  {}", if *ok { "pass" } else { "FAIL" });
    }
    Ok(rows.iter().all(|r| r.3))
}

fn run_synth(args: &SynthArgs, cli: &Cli) -> Result<()> {
    if args.units == 0 || args.lifetime == 0 {
        return Err(usage("--units and --lifetime must be at least 1"));
    }
    let records = synth_generate(args.units, args.lifetime, args.drift, args.seed);
    create_out(&args.out)?;
    fs::write(args.out.join("synth.txt"), to_cmapss_string(&records))?;
    write_json(&args.out.join("config.json"), cli)?;
    println!("wrote {} rows to {}", records.len(), args.out.join("synth.txt").display());
    Ok(())
}

fn apply_seed_override(cli: &mut Cli) -> Result<()> {
    let Ok(raw) = std::env::var("FAE_SEED") else {
        return Ok(());
    };
    let seed: u64 = raw
        .parse()
        .map_err(|_| usage(format!("FAE_SEED must be an unsigned integer, got `{raw}`")))?;
    match &mut cli.command {
        Command::Train(a) => a.seed = seed,
        Command::Synth(a) => a.seed = seed,
        _ => {}
    }
    Ok(())
}

fn run(mut cli: Cli) -> Result<bool> {
    apply_seed_override(&mut cli)?;
    match &cli.command {
        Command::Train(a) => run_train(a, &cli)?,
        Command::Detect(a) => run_detect(a, &cli)?,
        Command::ExportLatent(a) => run_export(a, &cli)?,
        Command::Verify => return run_verify(),
        Command::Synth(a) => run_synth(a, &cli)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            eprintln!("run `fae --help` for usage");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
