use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use maskgan::artifacts::{self, write_atomic};
use maskgan::mask::{extract_coarse_mask_with, Connectivity, ExtractionParams};
use maskgan::phantom::{self, iou, DatasetParams};
use maskgan::study::{self, Method};
use maskgan::train::{self, RunOptions, TrainingData};
use maskgan::{Error, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "maskgan", version, about = "Unpaired MR to CT synthesis with mask-guided attention generators")]
struct Cli {
    /// Seed for data generation and training (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Compute device; only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    /// Suppress progress lines on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom MR/CT dataset.
    MakePhantoms(MakePhantoms),
    /// Extract coarse masks from every slice of a dataset.
    ExtractMasks(ExtractMasks),
    /// Train a generator pair.
    Train(Train),
    /// Evaluate a checkpoint on the paired test split.
    Evaluate(Evaluate),
    /// Train on elastically deformed masks across a range of deformation strengths.
    DeformStudy(DeformStudy),
    /// Write per-slice figure panels for a checkpoint.
    Figures(Figures),
}

#[derive(Args, Debug)]
struct MakePhantoms {
    #[arg(long)]
    out: PathBuf,
    /// Total number of slices (one tenth, at least one, go to the test split).
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = phantom::DEFAULT_SIZE)]
    size: usize,
    /// Standard deviation of the MR/CT misalignment in pixels.
    #[arg(long, default_value_t = 2.0)]
    misalign: f64,
}

#[derive(Args, Debug)]
struct ExtractMasks {
    #[arg(long)]
    data: PathBuf,
    /// Output directory (default: `<data>/coarse_masks`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = maskgan::mask::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = maskgan::mask::DEFAULT_RADIUS)]
    radius: usize,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// `key = value` config file; unset keys take the desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    /// Drop the shape-consistency term.
    #[arg(long)]
    ablate_shape: bool,
    /// Drop the mask term.
    #[arg(long)]
    ablate_mask: bool,
    /// Continue from the newest checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct Evaluate {
    /// Checkpoint directory, its manifest.txt, or a run directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Per-slice CSV; a `<stem>_summary.csv` is written next to it.
    #[arg(long, default_value = "report.csv")]
    report: PathBuf,
    /// Directory for color error maps.
    #[arg(long)]
    maps: Option<PathBuf>,
    /// Second checkpoint for a paired t-test on MR to CT MAE.
    #[arg(long)]
    compare: Option<PathBuf>,
    /// Method label of the summary row.
    #[arg(long, default_value = "model")]
    label: String,
}

#[derive(Args, Debug)]
struct DeformStudy {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "deform_study")]
    out: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,2")]
    sigmas: Vec<f64>,
    /// Number of seeds, counted up from `--seed`.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long, value_delimiter = ',', default_value = "maskgan,maskgan_wo_shape")]
    methods: Vec<String>,
}

#[derive(Args, Debug)]
struct Figures {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn log(quiet: bool, msg: impl AsRef<str>) {
    if !quiet {
        eprintln!("{}", msg.as_ref());
    }
}

/// Writes `key = value` lines describing the resolved invocation.
fn write_resolved(path: &Path, pairs: &[(&str, String)]) -> anyhow::Result<()> {
    let mut s = String::new();
    for (k, v) in pairs {
        writeln!(s, "{k} = {v}")?;
    }
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

fn resolve_config(cli: &Cli, run: &RunArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &run.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let mut cfg = RunConfig::desk();
            for line in text.lines() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let Some((k, v)) = line.split_once('=') else {
                    return Err(Error::Config(format!("{}: expected key = value, got {line:?}", p.display())).into());
                };
                cfg.set(k.trim(), v.trim())?;
            }
            cfg
        }
        None => RunConfig::desk(),
    };
    for o in &run.overrides {
        let Some((k, v)) = o.split_once('=') else {
            return Err(Error::Config(format!("--set expects KEY=VALUE, got {o:?}")).into());
        };
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(e) = run.epochs {
        cfg.epochs = e;
        cfg.decay_start_epoch = cfg.decay_start_epoch.min(e).max(1);
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn make_phantoms(cli: &Cli, a: &MakePhantoms) -> anyhow::Result<()> {
    let seed = cli.seed.unwrap_or(0);
    std::fs::create_dir_all(&a.out)?;
    write_resolved(
        &a.out.join("resolved_config.txt"),
        &[
            ("command", "make-phantoms".into()),
            ("n", a.n.to_string()),
            ("size", a.size.to_string()),
            ("misalign", a.misalign.to_string()),
            ("seed", seed.to_string()),
        ],
    )?;
    let p = DatasetParams {
        n: a.n,
        size: a.size,
        misalign_sigma: a.misalign,
        seed,
    };
    let (train, test) = phantom::make_dataset_with(&p)?;
    phantom::save_dataset(
        &a.out,
        &train,
        &test,
        &[("seed", seed.to_string()), ("misalign_sigma", a.misalign.to_string())],
    )?;
    log(cli.quiet, format!("wrote {} train and {} test slices to {}", train.len(), test.len(), a.out.display()));
    println!("{}", a.out.display());
    Ok(())
}

fn extract_masks(cli: &Cli, a: &ExtractMasks) -> anyhow::Result<()> {
    let out = a.out.clone().unwrap_or_else(|| a.data.join("coarse_masks"));
    std::fs::create_dir_all(&out)?;
    write_resolved(
        &out.join("resolved_config.txt"),
        &[
            ("command", "extract-masks".into()),
            ("data", a.data.display().to_string()),
            ("threshold", a.threshold.to_string()),
            ("radius", a.radius.to_string()),
        ],
    )?;
    let params = ExtractionParams {
        threshold: a.threshold,
        radius: a.radius,
        connectivity: Connectivity::Eight,
    };
    let (train, test) = phantom::load_dataset(&a.data)?;
    let mut ious = Vec::new();
    let mut empty = 0usize;
    for (split, set) in [("train", &train), ("test", &test)] {
        for (sub, slices) in [("mr", &set.mr), ("ct", &set.ct)] {
            for (i, s) in slices.iter().enumerate() {
                let path = out.join(split).join(sub).join(format!("{i:04}.png"));
                match extract_coarse_mask_with(&maskgan::normalize(s)?, &params) {
                    Ok(m) => {
                        if let (Some(truth), "mr") = (&set.masks, sub) {
                            ious.push(iou(&m.pixels, &truth[i].pixels));
                        }
                        artifacts::save_mask_png(&path, &m.pixels)?;
                    }
                    Err(Error::EmptyForeground) => empty += 1,
                    Err(e) => return Err(e.into()),
                }
            }
        }
    }
    if !ious.is_empty() {
        let mean = ious.iter().sum::<f64>() / ious.len() as f64;
        println!("mean MR mask IoU vs reference support: {mean:.4}");
    }
    if empty > 0 {
        log(cli.quiet, format!("{empty} slices had no foreground and were skipped"));
    }
    println!("{}", out.display());
    Ok(())
}

fn run_train(cli: &Cli, a: &Train) -> anyhow::Result<()> {
    let mut cfg = resolve_config(cli, &a.run)?;
    if a.ablate_shape {
        cfg.loss_weights.lambda_shape = 0.0;
    }
    if a.ablate_mask {
        cfg.loss_weights.lambda_mask = 0.0;
    }
    std::fs::create_dir_all(&a.out)?;
    cfg.save(&a.out.join("config.txt"))?;
    let (train_set, _) = phantom::load_dataset(&a.data)?;
    let data = TrainingData::from_dataset(&train_set)?;
    log(
        cli.quiet,
        format!("training on {} MR / {} CT slices, config hash {}", data.mr.len(), data.ct.len(), cfg.hash()),
    );
    let opts = RunOptions {
        resume: a.resume,
        progress: !cli.quiet,
        ..Default::default()
    };
    let summary = train::train_run(&cfg, &data, &a.out, &opts)?;
    println!("{}", summary.checkpoint.display());
    Ok(())
}

fn run_evaluate(cli: &Cli, a: &Evaluate) -> anyhow::Result<()> {
    let ckpt = train::resolve_checkpoint(&a.checkpoint)?;
    let stem = a.report.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    write_resolved(
        &a.report.with_file_name(format!("{stem}_config.txt")),
        &[
            ("command", "evaluate".into()),
            ("checkpoint", ckpt.display().to_string()),
            ("data", a.data.display().to_string()),
            ("label", a.label.clone()),
        ],
    )?;
    let (_, test) = phantom::load_dataset(&a.data)?;
    let mut report = maskgan::eval::evaluate_checkpoint(&ckpt, &test)?;
    if let Some(other) = &a.compare {
        let other_report = maskgan::eval::evaluate_checkpoint(other, &test)?;
        report.compare_with(&other.display().to_string(), &other_report)?;
    }
    let (slices, summary) = report.write(&a.report, &a.label)?;
    if let Some(maps) = &a.maps {
        let (g_ct, _, _) = train::load_generators(&ckpt)?;
        let paths = maskgan::eval::write_error_maps(&g_ct, &test, maps)?;
        log(cli.quiet, format!("wrote {} error maps to {}", paths.len(), maps.display()));
    }
    println!("{}", report.summary_line());
    if let Some((label, t)) = &report.t_test {
        println!("paired t-test vs {label}: t = {:.4}, p = {:.4e}", t.t, t.p);
    }
    log(cli.quiet, format!("wrote {} and {}", slices.display(), summary.display()));
    Ok(())
}

fn run_deform_study(cli: &Cli, a: &DeformStudy) -> anyhow::Result<()> {
    let cfg = resolve_config(cli, &a.run)?;
    let methods = a.methods.iter().map(|m| Method::parse(m)).collect::<maskgan::Result<Vec<_>>>()?;
    if a.seeds == 0 {
        bail!(Error::Config("--seeds must be >= 1".into()));
    }
    let seeds: Vec<u64> = (0..a.seeds).map(|k| cfg.seed + k).collect();
    std::fs::create_dir_all(&a.out)?;
    cfg.save(&a.out.join("config.txt"))?;
    write_resolved(
        &a.out.join("resolved_config.txt"),
        &[
            ("command", "deform-study".into()),
            ("data", a.data.display().to_string()),
            ("sigmas", a.sigmas.iter().map(f64::to_string).collect::<Vec<_>>().join(",")),
            ("seeds", seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")),
            ("methods", a.methods.join(",")),
        ],
    )?;
    let (train_set, test) = phantom::load_dataset(&a.data)?;
    let data = TrainingData::from_dataset(&train_set)?;
    let rows = study::deform_study(&cfg, &data, &test, &a.sigmas, &seeds, &methods, &a.out, !cli.quiet)?;
    print!("{}", study::deform_csv(&rows));
    Ok(())
}

fn run_figures(cli: &Cli, a: &Figures) -> anyhow::Result<()> {
    let ckpt = train::resolve_checkpoint(&a.checkpoint)?;
    let (_, test) = phantom::load_dataset(&a.data)?;
    let slices = study::emit_figure_bundle(&ckpt, &test, &a.out)?;
    write_resolved(
        &a.out.join("resolved_config.txt"),
        &[
            ("command", "figures".into()),
            ("checkpoint", ckpt.display().to_string()),
            ("data", a.data.display().to_string()),
        ],
    )?;
    log(cli.quiet, format!("wrote panels for {} slices", slices.len()));
    println!("{}", a.out.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    if cli.device != "cpu" {
        bail!(Error::Config(format!("unsupported device {:?}; only cpu is available", cli.device)));
    }
    match &cli.command {
        Command::MakePhantoms(a) => make_phantoms(cli, a),
        Command::ExtractMasks(a) => extract_masks(cli, a),
        Command::Train(a) => run_train(cli, a),
        Command::Evaluate(a) => run_evaluate(cli, a),
        Command::DeformStudy(a) => run_deform_study(cli, a),
        Command::Figures(a) => run_figures(cli, a),
    }
}

/// Errors caused by the invocation or its inputs rather than by the program.
fn is_user_error(err: &anyhow::Error) -> bool {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
                Error::Config(_)
                | Error::MissingCheckpoint(_)
                | Error::ResumeMismatch { .. }
                | Error::UnpairedDataset
                | Error::UnreadableVolume { .. }
                | Error::UnsupportedModality(_)
                | Error::InvalidSigma(_)
                | Error::InvalidThreshold(_)
                | Error::InvalidTarget(..) => true,
                _ => false,
            };
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            return e.kind() == std::io::ErrorKind::NotFound;
        }
    }
    false
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_user_error(&e) { 1 } else { 2 })
        }
    }
}
