//! Command-line pipeline: generate data, pre-train federated, fine-tune,
//! calibrate, evaluate, predict, sweep.
//!
//! Every subcommand reads the run config (``--config``, the
//! ``QAFDON_CONFIG`` environment variable, or ``qafdon.toml`` when present),
//! applies flag overrides, resolves it, and persists the resolved config
//! next to its outputs so any run can be reproduced from files alone.
//!
//! Exit codes: 0 success, 2 usage/config, 3 data, 4 training, 5 calibration.

use clap::{Args, Parser, Subcommand};
use qafdon::conformal::CalibrationMode;
use qafdon::error::QafError;
use qafdon::eval::{self, Stage};
use qafdon::pipeline::{self, RunConfig};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "qafdon", version, about = "Coverage-guaranteed post-fault voltage interval prediction")]
struct Cli {
    /// Run configuration file (default: $QAFDON_CONFIG, then ./qafdon.toml,
    /// then built-in defaults).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker-thread cap; 1 (the default) guarantees bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Miscoverage level α override.
    #[arg(long, global = true)]
    alpha: Option<f64>,

    /// Observable post-fault duration Δt_obs override, in seconds.
    #[arg(long = "dt-obs", global = true)]
    dt_obs: Option<f64>,

    /// Overwrite existing output artifacts instead of refusing.
    #[arg(long = "force-overwrite", global = true)]
    force_overwrite: bool,

    #[command(subcommand)]
    command: Command,
}

/// Refuses to clobber an existing artifact unless --force-overwrite is set.
fn guard_overwrite(paths: &[PathBuf], force: bool) -> qafdon::Result<()> {
    if force {
        return Ok(());
    }
    for p in paths {
        if p.exists() {
            return Err(QafError::Config(format!(
                "output {} already exists; pass --force-overwrite to replace it",
                p.display()
            )));
        }
    }
    Ok(())
}

#[derive(Subcommand)]
enum Command {
    /// Generate per-bus trajectory and triplet dataset files.
    GenData(GenDataArgs),
    /// Federated pre-training over neighbor-bus datasets.
    Pretrain(PretrainArgs),
    /// Fine-tune a checkpoint on the target bus.
    Finetune(FinetuneArgs),
    /// Split conformal calibration of a checkpoint.
    Calibrate(CalibrateArgs),
    /// Evaluate intervals over held-out trajectories.
    Evaluate(EvaluateArgs),
    /// Predict the interval curve for one observed trajectory.
    Predict(PredictArgs),
    /// Collect evaluated cells into a PICP/PINAW grid CSV.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Comma-separated bus ids.
    #[arg(long, value_delimiter = ',', required = true)]
    buses: Vec<u32>,
    /// Trajectories per bus.
    #[arg(long = "n-per-bus")]
    n_per_bus: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// Directory holding bus_<id>.ds files.
    #[arg(long = "data-dir")]
    data_dir: PathBuf,
    /// Comma-separated neighbor bus ids to train on.
    #[arg(long, value_delimiter = ',', required = true)]
    buses: Vec<u32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Pre-trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Target-bus triplet dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Calibration triplet dataset (unseen in training).
    #[arg(long)]
    data: PathBuf,
    /// Exchangeability unit: triplet or trajectory.
    #[arg(long, default_value = "triplet")]
    mode: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Apply a conformal offset; requires --calibration.
    #[arg(long, requires = "calibration")]
    calibrated: bool,
    /// Calibration artifact matching the checkpoint.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Trajectory file with held-out test curves.
    #[arg(long)]
    trajectories: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write plot-data CSVs for the first N trajectories.
    #[arg(long = "plot-samples", default_value_t = 0)]
    plot_samples: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Optional calibration artifact.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Trajectory file holding the observed curve.
    #[arg(long)]
    trajectory: PathBuf,
    /// Index of the trajectory within the file.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Output CSV for the interval curve.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Directory of evaluated cells named dt<ms>-n<size>-<stage>/report.csv.
    #[arg(long = "artifacts-dir")]
    artifacts_dir: PathBuf,
    /// Comma-separated Δt_obs values in seconds.
    #[arg(long = "dt-obs-list", value_delimiter = ',', required = true)]
    dt_obs_list: Vec<f64>,
    /// Comma-separated dataset sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
    /// Comma-separated stages (pretrained, finetuned, conformal).
    #[arg(long, value_delimiter = ',', required = true)]
    stages: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code_for(err: &QafError) -> u8 {
    match err {
        QafError::Config(_) => 2,
        QafError::Data(_)
        | QafError::Io(_)
        | QafError::Scenario(_)
        | QafError::Segmentation(_)
        | QafError::DegenerateRange(_)
        | QafError::Domain(_) => 3,
        QafError::Training(_)
        | QafError::Federation(_)
        | QafError::Shape(_)
        | QafError::Contract(_) => 4,
        QafError::Calibration(_) | QafError::ArtifactMismatch(_) => 5,
    }
}

fn load_config(cli: &Cli) -> qafdon::Result<RunConfig> {
    let mut cfg = if let Some(path) = &cli.config {
        RunConfig::load(path)?
    } else if let Ok(path) = std::env::var("QAFDON_CONFIG") {
        RunConfig::load(Path::new(&path))?
    } else if Path::new("qafdon.toml").exists() {
        RunConfig::load(Path::new("qafdon.toml"))?
    } else {
        RunConfig::default()
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.run.threads = threads;
    }
    if let Some(alpha) = cli.alpha {
        cfg.run.alpha = alpha;
    }
    if let Some(dt_obs) = cli.dt_obs {
        cfg.run.dt_obs = dt_obs;
    }
    cfg.resolve()?;
    Ok(cfg)
}

/// Reads the aggregate row of an evaluated cell's report.csv.
fn read_cell(dir: &Path) -> Option<(f64, f64)> {
    let text = std::fs::read_to_string(dir.join("report.csv")).ok()?;
    let row = text.lines().find(|l| l.starts_with("aggregate,"))?;
    let fields: Vec<&str> = row.split(',').collect();
    Some((fields.get(1)?.parse().ok()?, fields.get(2)?.parse().ok()?))
}

fn cell_dir_name(dt_obs: f64, size: usize, stage: Stage) -> String {
    format!(
        "dt{}-n{}-{}",
        (dt_obs * 1000.0).round() as u64,
        size,
        stage.as_str()
    )
}

fn run(cli: Cli) -> qafdon::Result<()> {
    let mut cfg = load_config(&cli)?;
    if let Command::Pretrain(args) = &cli.command {
        cfg.fed.n_clients = args.buses.len();
    }
    let force = cli.force_overwrite;
    let threads = cfg.run.threads;
    match cli.command {
        Command::GenData(args) => pipeline::with_threads(threads, || -> qafdon::Result<()> {
            let outputs: Vec<PathBuf> = args
                .buses
                .iter()
                .flat_map(|id| {
                    [
                        args.out.join(format!("bus_{id}.ds")),
                        args.out.join(format!("bus_{id}.traj")),
                    ]
                })
                .collect();
            guard_overwrite(&outputs, force)?;
            let files = pipeline::stage_gen_data(&cfg, &args.buses, args.n_per_bus, &args.out)?;
            cfg.persist_resolved(&args.out, "gen-data")?;
            for f in files {
                println!(
                    "bus {}: {} ({} trajectories)",
                    f.bus_id,
                    f.dataset.display(),
                    args.n_per_bus
                );
            }
            Ok(())
        })??,
        Command::Pretrain(args) => pipeline::with_threads(threads, || -> qafdon::Result<()> {
            let datasets: Vec<PathBuf> = args
                .buses
                .iter()
                .map(|id| args.data_dir.join(format!("bus_{id}.ds")))
                .collect();
            for ds in &datasets {
                if !ds.exists() {
                    return Err(QafError::Data(format!("missing dataset {}", ds.display())));
                }
            }
            guard_overwrite(&[args.out.join("pretrained.ckpt")], force)?;
            let ckpt = pipeline::stage_pretrain(&cfg, &datasets, &args.out)?;
            cfg.persist_resolved(&args.out, "pretrain")?;
            println!("pre-trained checkpoint: {}", ckpt.display());
            Ok(())
        })??,
        Command::Finetune(args) => pipeline::with_threads(threads, || -> qafdon::Result<()> {
            guard_overwrite(&[args.out.join("finetuned.ckpt")], force)?;
            let ckpt = pipeline::stage_finetune(&cfg, &args.checkpoint, &args.data, &args.out)?;
            cfg.persist_resolved(&args.out, "finetune")?;
            println!("fine-tuned checkpoint: {}", ckpt.display());
            Ok(())
        })??,
        Command::Calibrate(args) => pipeline::with_threads(threads, || -> qafdon::Result<()> {
            let mode: CalibrationMode = args.mode.parse()?;
            guard_overwrite(&[args.out.join("calibration.cal")], force)?;
            let artifact =
                pipeline::stage_calibrate(&cfg, &args.checkpoint, &args.data, mode, &args.out)?;
            cfg.persist_resolved(&args.out, "calibrate")?;
            println!("calibration artifact: {}", artifact.display());
            Ok(())
        })??,
        Command::Evaluate(args) => pipeline::with_threads(threads, || -> qafdon::Result<()> {
            let calibration = if args.calibrated {
                args.calibration.as_deref()
            } else {
                None
            };
            guard_overwrite(&[args.out.join("report.csv")], force)?;
            let report = pipeline::stage_evaluate(
                &cfg,
                &args.checkpoint,
                calibration,
                &args.trajectories,
                &args.out,
                args.plot_samples,
            )?;
            cfg.persist_resolved(&args.out, "evaluate")?;
            println!("report: {}", report.display());
            Ok(())
        })??,
        Command::Predict(args) => pipeline::with_threads(threads, || -> qafdon::Result<()> {
            guard_overwrite(std::slice::from_ref(&args.out), force)?;
            pipeline::stage_predict(
                &cfg,
                &args.checkpoint,
                args.calibration.as_deref(),
                &args.trajectory,
                args.index,
                &args.out,
            )?;
            let dir = args.out.parent().map(Path::to_path_buf).unwrap_or_default();
            if !dir.as_os_str().is_empty() {
                cfg.persist_resolved(&dir, "predict")?;
            }
            println!("interval curve: {}", args.out.display());
            Ok(())
        })??,
        Command::Sweep(args) => {
            let stages = args
                .stages
                .iter()
                .map(|s| s.parse())
                .collect::<qafdon::Result<Vec<Stage>>>()?;
            let cells = eval::sweep(&args.dt_obs_list, &args.sizes, &stages, |key| {
                read_cell(&args.artifacts_dir.join(cell_dir_name(
                    key.dt_obs,
                    key.dataset_size,
                    key.stage,
                )))
            });
            guard_overwrite(std::slice::from_ref(&args.out), force)?;
            let absent = cells.iter().filter(|c| c.mean_picp.is_none()).count();
            if let Some(parent) = args.out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(&args.out, eval::render_sweep(&cells))?;
            let dir = args.out.parent().map(Path::to_path_buf).unwrap_or_default();
            if !dir.as_os_str().is_empty() {
                cfg.persist_resolved(&dir, "sweep")?;
            }
            println!(
                "sweep: {} cells ({absent} absent) -> {}",
                cells.len(),
                args.out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
