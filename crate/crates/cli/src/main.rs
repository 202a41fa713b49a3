use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use camera_core::alert::{self, AlertMode};
use camera_core::eval::{self, ablation, MttaMode};
use camera_core::gradcheck;
use camera_core::model::{Model, ModelDims, TemporalMode, Variant};
use camera_core::sim::{self, SimConfig};
use camera_core::train::{self, checkpoint, loss::KlDirection, TrainConfig};

mod config;

use config::Resolver;

/// A problem with the request itself: flags, settings or input files.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

#[derive(Parser, Debug)]
#[command(name = "camera", version, about = "Multi-modal accident anticipation on synthetic driving scenarios")]
struct Cli {
    /// key=value settings file; flags override it
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Worker threads for evaluation (training always uses one)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a scenario file
    Gen(GenArgs),
    /// Train a model and write a checkpoint and per-epoch log
    Train(TrainArgs),
    /// Evaluate a checkpoint: report JSON, sweep CSV and per-sequence traces
    Eval(EvalArgs),
    /// Data-fraction, frame-drop and module-knockout experiments
    Ablate(AblateArgs),
    /// Replay alerts for one sequence as JSON lines
    Alert(AlertArgs),
    /// Finite-difference check of the end-to-end gradient
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
    /// Fraction of positive sequences
    #[arg(long)]
    positive: Option<f64>,
    #[arg(long)]
    frames: Option<usize>,
    /// Two-regime stress set (benign / hazard) instead of the reference mix
    #[arg(long)]
    stress: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// full, no-refiner, no-fusion or no-recurrence
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    refine_channels: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Label window before the accident, seconds
    #[arg(long)]
    window: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Keep λ1 = λ2 = 0 (constant threshold 0.5)
    #[arg(long)]
    freeze_lambdas: bool,
    /// Use D(risk ‖ attention) for the alignment term
    #[arg(long)]
    kl_reverse: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint path; the log and manifest are written beside it
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Report path; sweep CSV, traces and manifest are written beside it
    #[arg(long)]
    out: Option<PathBuf>,
    /// Forward-only temporal model
    #[arg(long)]
    causal: bool,
    #[arg(long)]
    window: Option<f64>,
    /// mTTA at this fixed threshold instead of the sweep mean
    #[arg(long)]
    mtta_threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Report JSON path; the CSV and manifest are written beside it
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Args, Debug)]
struct AlertArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sequence index within the data file
    #[arg(long)]
    index: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Compass words for this ego heading (degrees from north)
    #[arg(long)]
    compass: Option<f64>,
    /// Describe every frame, not only triggered ones
    #[arg(long)]
    all: bool,
    #[arg(long)]
    causal: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    variant: Option<String>,
    /// Optional JSON report path
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<Variant> {
    Ok(match s {
        "full" => Variant::Full,
        "no-refiner" | "-MFE" => Variant::NoRefiner,
        "no-fusion" | "-AHF" => Variant::NoFusion,
        "no-recurrence" | "-BiGRU" => Variant::NoRecurrence,
        _ => bail!(Invalid(format!("unknown variant {s:?}"))),
    })
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Full => "full",
        Variant::NoRefiner => "no-refiner",
        Variant::NoFusion => "no-fusion",
        Variant::NoRecurrence => "no-recurrence",
    }
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_data(path: &Path) -> Result<Vec<sim::Sequence>> {
    sim::load(path).with_context(|| format!("loading {}", path.display()))
}

fn load_ckpt(path: &Path) -> Result<Model> {
    checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn model_settings(r: &mut Resolver, a: &ModelArgs) -> Result<(ModelDims, Variant)> {
    let d = ModelDims::default();
    let variant = parse_variant(&r.get("variant", a.variant.clone(), "full".to_string())?)?;
    let dims = ModelDims {
        channels: r.get("channels", a.channels, d.channels)?,
        refine_channels: r.get("refine_channels", a.refine_channels, d.refine_channels)?,
        hidden: r.get("hidden", a.hidden, d.hidden)?,
        ..d
    };
    dims.validate()?;
    Ok((dims, variant))
}

fn fit_settings(r: &mut Resolver, a: &FitArgs) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let reverse = r.flag("kl_reverse", a.kl_reverse)?;
    let cfg = TrainConfig {
        seed: r.seed(a.seed, d.seed)?,
        epochs: r.get("epochs", a.epochs, d.epochs)?,
        batch_size: r.get("batch", a.batch, d.batch_size)?,
        lr: r.get("lr", a.lr, d.lr)?,
        warmup_epochs: r.get("warmup", a.warmup, d.warmup_epochs)?,
        patience: r.get("patience", a.patience, d.patience)?,
        window_s: r.get("window", a.window, d.window_s)?,
        val_fraction: r.get("val_fraction", a.val_fraction, d.val_fraction)?,
        freeze_lambdas: r.flag("freeze_lambdas", a.freeze_lambdas)?,
        kl_direction: if reverse {
            KlDirection::RiskToAttention
        } else {
            KlDirection::AttentionToRisk
        },
        ..d
    };
    cfg.validate()?;
    Ok(cfg)
}

fn gen(cli: &Cli, a: &GenArgs) -> Result<()> {
    let mut r = Resolver::new("gen", cli.config.as_deref())?;
    let d = SimConfig::default();
    let seed = r.seed(a.seed, 42)?;
    let count = r.get("count", a.count, sim::REFERENCE_TRAIN)?;
    let positive = r.get("positive", a.positive, sim::REFERENCE_POSITIVE_FRACTION)?;
    let frames = r.get("frames", a.frames, d.frames)?;
    let stress = r.flag("stress", a.stress)?;
    let out: PathBuf = r.require("out", a.out.clone().map(|p| p.display().to_string()))?.into();
    let mut m = r.finish()?;

    let cfg = SimConfig { frames, ..d };
    let seqs = if stress {
        sim::generate_stress(seed, count, &cfg)?
    } else {
        sim::generate(seed, count, positive, &cfg)?
    };
    let mut bytes = Vec::new();
    sim::save_to(&mut bytes, &seqs)?;
    write(&out, &bytes)?;
    m.artifact("data", &bytes);
    m.write(&sibling(&out, ".manifest"))?;
    let pos = seqs.iter().filter(|s| s.label).count();
    println!("wrote {} sequences ({pos} positive) to {}", seqs.len(), out.display());
    Ok(())
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut r = Resolver::new("train", cli.config.as_deref())?;
    let data: PathBuf = r.require("data", a.data.clone().map(|p| p.display().to_string()))?.into();
    let out: PathBuf = r.require("out", a.out.clone().map(|p| p.display().to_string()))?.into();
    let (dims, variant) = model_settings(&mut r, &a.model)?;
    let cfg = fit_settings(&mut r, &a.fit)?;
    let mut m = r.finish()?;

    let seqs = load_data(&data)?;
    let t0 = Instant::now();
    let outcome = train::train_with(&seqs, dims, variant, &cfg, |log, _| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  val AP {}  lr {:.2e}  [{:.0?}]",
            log.epoch,
            log.loss.total,
            log.val_ap.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            log.lr,
            t0.elapsed()
        );
        Ok(())
    })?;
    let ckpt = checkpoint::to_bytes(&outcome.model);
    let log: String = outcome.log.iter().map(|l| l.to_json_line() + "\n").collect();
    write(&out, &ckpt)?;
    write(&sibling(&out, ".log.jsonl"), log.as_bytes())?;
    m.artifact("checkpoint", &ckpt);
    m.artifact("log", log.as_bytes());
    m.write(&sibling(&out, ".manifest"))?;
    println!(
        "kept epoch {} of {}{}; checkpoint {}",
        outcome.best_epoch,
        outcome.log.len(),
        if outcome.stopped_early { " (stopped early)" } else { "" },
        out.display()
    );
    Ok(())
}

fn eval_cmd(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let mut r = Resolver::new("eval", cli.config.as_deref())?;
    let ckpt: PathBuf = r.require("ckpt", a.ckpt.clone().map(|p| p.display().to_string()))?.into();
    let data: PathBuf = r.require("data", a.data.clone().map(|p| p.display().to_string()))?.into();
    let out: PathBuf = r.require("out", a.out.clone().map(|p| p.display().to_string()))?.into();
    let causal = r.flag("causal", a.causal)?;
    let window = r.get("window", a.window, TrainConfig::default().window_s)?;
    let fixed = r.get("mtta_threshold", a.mtta_threshold.map(|v| v.to_string()), "sweep".to_string())?;
    let threads = r.get("threads", cli.threads, 1)?;
    let mut m = r.finish()?;
    let mode = match fixed.as_str() {
        "sweep" => MttaMode::SweepMean,
        v => MttaMode::Fixed(v.parse().map_err(|_| Invalid(format!("bad mtta_threshold {v}")))?),
    };

    let mut model = load_ckpt(&ckpt)?;
    if causal {
        model.mode = TemporalMode::Causal;
    }
    let seqs = load_data(&data)?;
    let traces = eval::traces_threaded(&model, &seqs, threads)?;
    let report = eval::evaluate(&traces, window, mode)?;
    let json = report.to_json();
    let sweep = report.sweep_csv();
    write(&out, json.as_bytes())?;
    write(&sibling(&out, ".sweep.csv"), sweep.as_bytes())?;
    m.artifact("report", json.as_bytes());
    m.artifact("sweep", sweep.as_bytes());
    let dir = sibling(&out, ".traces");
    for (i, t) in traces.iter().enumerate() {
        write(&dir.join(format!("trace_{i:04}.csv")), eval::trace_csv(t).as_bytes())?;
    }
    m.write(&sibling(&out, ".manifest"))?;
    println!(
        "AP {:.4}  AUC {:.4}  mTTA {:.3}s  TTA@R50 {}  false alarms {:.3}",
        report.ap,
        report.auc,
        report.mtta_s,
        report
            .tta_at_r50_s
            .map(|v| format!("{v:.3}s"))
            .unwrap_or_else(|| "undefined".into()),
        report.false_alarm_rate
    );
    Ok(())
}

fn ablate_cmd(cli: &Cli, a: &AblateArgs) -> Result<()> {
    let mut r = Resolver::new("ablate", cli.config.as_deref())?;
    let train_path: PathBuf = r.require("train", a.train.clone().map(|p| p.display().to_string()))?.into();
    let test_path: PathBuf = r.require("test", a.test.clone().map(|p| p.display().to_string()))?.into();
    let out: PathBuf = r.require("out", a.out.clone().map(|p| p.display().to_string()))?.into();
    let (dims, variant) = model_settings(&mut r, &a.model)?;
    if variant != Variant::Full {
        bail!(Invalid("ablations start from the full model; drop --variant".into()));
    }
    let cfg = fit_settings(&mut r, &a.fit)?;
    let mut m = r.finish()?;

    let train_set = load_data(&train_path)?;
    let test_set = load_data(&test_path)?;
    let t0 = Instant::now();
    let rep = ablation::run(&train_set, &test_set, dims, &cfg, None, |note| {
        eprintln!("{note} [{:.0?}]", t0.elapsed());
    })?;
    let json = rep.to_json();
    let csv = rep.to_csv();
    write(&out, json.as_bytes())?;
    write(&sibling(&out, ".csv"), csv.as_bytes())?;
    m.artifact("report", json.as_bytes());
    m.artifact("table", csv.as_bytes());
    m.write(&sibling(&out, ".manifest"))?;
    for row in &rep.rows {
        println!(
            "{:?} {:>7} frac {:.2} drop {:.1}  AP {:.4}  mTTA {:.3}s",
            row.table,
            row.variant.label(),
            row.train_fraction,
            row.drop_rate,
            row.ap,
            row.mtta_s
        );
    }
    Ok(())
}

fn alert_cmd(cli: &Cli, a: &AlertArgs) -> Result<()> {
    let mut r = Resolver::new("alert", cli.config.as_deref())?;
    let ckpt: PathBuf = r.require("ckpt", a.ckpt.clone().map(|p| p.display().to_string()))?.into();
    let data: PathBuf = r.require("data", a.data.clone().map(|p| p.display().to_string()))?.into();
    let out: PathBuf = r.require("out", a.out.clone().map(|p| p.display().to_string()))?.into();
    let index = r.get("index", a.index, 0)?;
    let heading = r.get("compass", a.compass.map(|v| v.to_string()), "off".to_string())?;
    let all = r.flag("all", a.all)?;
    let causal = r.flag("causal", a.causal)?;
    let mut m = r.finish()?;
    let mode = match heading.as_str() {
        "off" => AlertMode::EgoRelative,
        v => AlertMode::Compass {
            heading_deg: v.parse().map_err(|_| Invalid(format!("bad compass heading {v}")))?,
        },
    };

    let mut model = load_ckpt(&ckpt)?;
    if causal {
        model.mode = TemporalMode::Causal;
    }
    let seqs = load_data(&data)?;
    let seq = seqs
        .get(index)
        .ok_or_else(|| Invalid(format!("index {index} out of range ({} sequences)", seqs.len())))?;
    let tr = eval::trace(&model, seq)?;
    let alerts = alert::alerts(seq, &tr, model.dims.feat, mode, all)?;
    let jsonl = alert::to_jsonl(&alerts);
    write(&out, jsonl.as_bytes())?;
    m.artifact("alerts", jsonl.as_bytes());
    m.write(&sibling(&out, ".manifest"))?;
    for a in alerts.iter().take(5) {
        println!("frame {:>3}: {}", a.frame, a.text);
    }
    if alerts.len() > 5 {
        println!("... {} alerts in total", alerts.len());
    }
    Ok(())
}

fn gradcheck_cmd(cli: &Cli, a: &GradcheckArgs) -> Result<()> {
    let mut r = Resolver::new("gradcheck", cli.config.as_deref())?;
    let seed = r.seed(a.seed, 42)?;
    let frames = r.get("frames", a.frames, 8)?;
    let variant = parse_variant(&r.get("variant", a.variant.clone(), "full".to_string())?)?;
    let out = r.get("out", a.out.clone().map(|p| p.display().to_string()), String::new())?;
    let mut m = r.finish()?;
    if frames < 2 {
        bail!(Invalid("gradcheck needs at least 2 frames".into()));
    }

    let t0 = Instant::now();
    let report = gradcheck::miniature_check(variant, frames, seed)?;
    for p in &report.params {
        println!("{:<28} max rel err {:.3e}", p.name, p.max_rel_err);
    }
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    println!(
        "{verdict}: {} over {} parameter groups, max rel err {:.3e} (tolerance {:.0e}) in {:.1?}",
        variant_name(variant),
        report.params.len(),
        report.max_rel_err(),
        report.tol,
        t0.elapsed()
    );
    if !out.is_empty() {
        let out = PathBuf::from(out);
        let json = serde_json::to_string_pretty(&report)?;
        write(&out, json.as_bytes())?;
        m.artifact("report", json.as_bytes());
        m.write(&sibling(&out, ".manifest"))?;
    }
    if !report.passed() {
        let w = report.worst().expect("nonempty report");
        bail!("gradient check failed at {}: analytic {} vs numeric {}", w.name, w.analytic, w.numeric);
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if cli.threads == Some(0) {
        bail!(Invalid("--threads must be at least 1".into()));
    }
    match &cli.cmd {
        Command::Gen(a) => gen(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Eval(a) => eval_cmd(cli, a),
        Command::Ablate(a) => ablate_cmd(cli, a),
        Command::Alert(a) => alert_cmd(cli, a),
        Command::Gradcheck(a) => gradcheck_cmd(cli, a),
    }
}

/// 1 for problems with the request or its inputs, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    use camera_core::Error as E;
    for cause in err.chain() {
        if cause.is::<Invalid>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Dimension(_) | E::Input(_) | E::Config(_) | E::Parse { .. } | E::Version { .. } => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
