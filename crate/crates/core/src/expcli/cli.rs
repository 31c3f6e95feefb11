//! Command-line surface. `run` parses `argv`, executes one command and
//! returns the process exit code.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::Config;
use super::dataset::{gen_dataset, Dataset, DatasetConfig, Pair};
use super::eval::{
    capture_radius, capture_radius_study, dice, dice_csv, evaluate_dice, landscape_csv, mean, LandscapeRow,
};
use super::model::{Model, ModelConfig};
use super::plot::line_plot;
use super::train::{loss_csv, train, TrainSchedule};
use crate::attention_reg::XiF;
use crate::combinators::{CentroidTranslation, Identity, RegistrationAlgorithm};
use crate::equiv::{measure_equivariance, EquivMode, EquivSpec, TransformClass};
use crate::error::{Error, Result};
use crate::losses::{instance_optimize, training_objective, LossConfig};
use crate::ndgrad::{GradGrid, Tape};
use crate::transform::{read_grid, warp, write_grid, Extrapolation, Image, Transform};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

/// Exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Divergence(_) => EXIT_DIVERGENCE,
        Error::Shape(_) | Error::Precondition(_) | Error::Contract(_) | Error::Format { .. } | Error::Io(_) => {
            EXIT_DATA
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "equireg", version, about = "Equivariant deformable registration experiments")]
struct Cli {
    /// Seed for data generation, initialisation and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (output file for `register`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Configuration override `key=value`; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        /// baseline, shift or scaleshift.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Train a model and write the loss log and a checkpoint.
    Train(DataArgs),
    /// Register two grid files and write the displacement field.
    Register {
        moving: PathBuf,
        fixed: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Dice of a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Equivariance sweep of an algorithm on one dataset pair.
    EquivCheck {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        alg: AlgArgs,
        /// translation, axis-translation, rotation or scale.
        #[arg(long)]
        class: Option<String>,
        /// wu or uu.
        #[arg(long)]
        mode: Option<String>,
        /// Comma-separated magnitudes in domain units (radians for rotation).
        #[arg(long)]
        magnitudes: Option<String>,
        /// Index of the test pair.
        #[arg(long, default_value_t = 0)]
        pair: usize,
    },
    /// Loss landscape of a fixed translation with and without a second step.
    Landscape {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Per-pair instance optimisation of a checkpoint on the test split.
    IoRefine {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset directory; generated from the configuration when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AlgArgs {
    /// Checkpoint directory.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Built-in algorithm when no checkpoint is given: identity, centroid or xi-f.
    #[arg(long)]
    alg: Option<String>,
}

/// Parses `argv` (including the program name), runs the command and
/// returns the exit code. Diagnostics go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn build_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for kv in &cli.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim());
    }
    if let Some(s) = cli.seed {
        cfg.set("seed", s);
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn dataset(args: &DataArgs, cfg: &Config) -> Result<Dataset> {
    match &args.data {
        Some(dir) => Dataset::load(dir),
        None => gen_dataset(&DatasetConfig::from_config(cfg)?),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn algorithm(args: &AlgArgs, channels: usize) -> Result<Box<dyn RegistrationAlgorithm>> {
    if let Some(dir) = &args.ckpt {
        return Ok(load_checkpoint(dir)?.assemble());
    }
    match args.alg.as_deref().unwrap_or("identity") {
        "identity" => Ok(Box::new(Identity)),
        "centroid" => Ok(Box::new(CentroidTranslation)),
        "xi-f" => Ok(Box::new(XiF::new(channels))),
        other => Err(Error::Config(format!("unknown algorithm {other:?}"))),
    }
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli)?;
    match &cli.command {
        Command::GenData { variant } => {
            let mut cfg = cfg.clone();
            if let Some(v) = variant {
                cfg.set("data.variant", v);
            }
            let data = gen_dataset(&DatasetConfig::from_config(&cfg)?)?;
            data.save(out_dir(&cli)?)
        }
        Command::Train(args) => {
            let data = dataset(args, &cfg)?;
            let schedule = TrainSchedule::from_config(&cfg)?;
            let mut model = Model::new(ModelConfig::from_config(&cfg)?);
            let dir = out_dir(&cli)?;
            let log = train(&mut model, &data.train, &schedule, |_| {})?;
            write(&dir.join("loss.csv"), &loss_csv(&log))?;
            let series = |name: &'static str, f: fn(&super::train::LogRow) -> f32| {
                (name, log.iter().map(|r| (r.step as f64, f(r) as f64)).collect::<Vec<_>>())
            };
            let svg = line_plot(
                "training objective",
                "step",
                &[series("sim_fwd", |r| r.sim_fwd), series("reg", |r| r.reg), series("total", |r| r.total)],
            );
            write(&dir.join("loss.svg"), &svg)?;
            save_checkpoint(&model, dir.join("checkpoint"))
        }
        Command::Register { moving, fixed, ckpt } => {
            let out = cli.out.clone().ok_or_else(|| Error::Config("register needs --out <file>".into()))?;
            let moving = Image::new(read_grid(moving)?)?;
            let fixed = Image::new(read_grid(fixed)?)?;
            let field = register_to_field(&load_checkpoint(ckpt)?, &moving, &fixed)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            write_grid(out, &field)
        }
        Command::Eval { data, ckpt, split } => {
            let ds = dataset(data, &cfg)?;
            let alg = load_checkpoint(ckpt)?.assemble();
            let threshold = cfg.get("eval.threshold", 0.5f32)?;
            let scores = evaluate_dice(alg.as_ref(), ds.split(split)?, threshold)?;
            write(&out_dir(&cli)?.join("dice.csv"), &dice_csv(&scores))?;
            println!("mean dice {:.4} over {} pairs", mean(&scores), scores.len());
            Ok(())
        }
        Command::EquivCheck { data, alg, class, mode, magnitudes, pair } => {
            let ds = dataset(data, &cfg)?;
            let p = ds
                .test
                .get(*pair)
                .ok_or_else(|| Error::Precondition(format!("test split has no pair {pair}")))?;
            let alg = algorithm(alg, p.moving.grid.channels())?;
            let s = cfg.section("equiv");
            let class = TransformClass::parse(class.as_deref().unwrap_or(s.raw("class").unwrap_or("translation")))?;
            let mode = EquivMode::parse(mode.as_deref().unwrap_or(s.raw("mode").unwrap_or("wu")))?;
            let mags = match magnitudes {
                Some(m) => Config::parse(&format!("m = {m}"))?.get_list("m", vec![])?,
                None => s.get_list("magnitudes", vec![0.0, 0.0625, 0.125])?,
            };
            let mut spec = EquivSpec::new(class, mode, mags);
            spec.seed = cfg.get("seed", 0)?;
            spec.identity_u = s.get("identity_u", false)?;
            if s.contains("foreground") {
                spec.foreground = Some(s.get("foreground", 0.0f32)?);
            }
            let report = measure_equivariance(alg.as_ref(), &p.moving, &p.fixed, &spec)?;
            write(&out_dir(&cli)?.join("equiv.csv"), &report.to_csv())
        }
        Command::Landscape { data, ckpt } => {
            let ds = dataset(data, &cfg)?;
            let alg = load_checkpoint(ckpt)?.assemble();
            let s = cfg.section("landscape");
            let half: i64 = s.get("half_width", 24)?;
            let count: usize = s.get("pairs", 16)?;
            let window: usize = s.get("window", 5)?;
            let n = ds.config.resolution as f64;
            let t0 = ds.config.shift();
            let ts: Vec<f64> = (-half..half).map(|k| t0 + (k as f64 + 0.5) / n).collect();
            let pairs = &ds.test[..count.min(ds.test.len())];
            let rows = capture_radius_study(alg.as_ref(), pairs, &ts, window)?;
            let dir = out_dir(&cli)?;
            write(&dir.join("landscape.csv"), &landscape_csv(&rows))?;
            let series = |f: fn(&LandscapeRow) -> f64| rows.iter().map(|r| (r.t, f(r))).collect::<Vec<_>>();
            let svg = line_plot("loss landscape", "t", &[("tau", series(|r| r.loss_tau)), ("two-step", series(|r| r.loss_two))]);
            write(&dir.join("landscape.svg"), &svg)?;
            println!(
                "capture radius (voxels): tau {} two-step {}",
                capture_radius(&rows, t0, |r| r.grad_tau) * n,
                capture_radius(&rows, t0, |r| r.grad_two) * n
            );
            Ok(())
        }
        Command::IoRefine { data, ckpt, steps } => {
            let ds = dataset(data, &cfg)?;
            let alg = load_checkpoint(ckpt)?.assemble();
            let s = cfg.section("io");
            let steps = match steps {
                Some(v) => *v,
                None => s.get("steps", 50)?,
            };
            let lr: f32 = s.get("lr", 1e-3)?;
            let loss_cfg = LossConfig { lambda: cfg.get("train.lambda", 1.5)?, ..LossConfig::default() };
            let mut csv = String::from("pair_id,initial,final,dice_before,dice_after\n");
            for (i, p) in ds.test.iter().enumerate() {
                let r = refine_pair(alg.as_ref(), p, steps, lr, &loss_cfg)?;
                csv.push_str(&format!("{i},{},{},{},{}\n", r.0, r.1, r.2, r.3));
            }
            write(&out_dir(&cli)?.join("io.csv"), &csv)
        }
    }
}

/// Registers two images with a trained model and samples the result as a
/// displacement field on the fixed grid.
pub fn register_to_field(model: &Model, moving: &Image, fixed: &Image) -> Result<GradGrid> {
    let tape = Tape::new();
    let t = model.assemble().register(&tape, moving, fixed)?;
    match t.to_displacement_field(&tape, fixed.extents(), Extrapolation::ClipReflect)? {
        Transform::DisplacementField { disp, .. } => Ok(disp.detach()),
        _ => unreachable!("to_displacement_field returns a field"),
    }
}

/// Objective before and after refinement and Dice before and after.
fn refine_pair(alg: &dyn RegistrationAlgorithm, p: &Pair, steps: usize, lr: f32, cfg: &LossConfig) -> Result<(f32, f32, f64, f64)> {
    let tape = Tape::new();
    let before = training_objective(&tape, alg, &p.moving, &p.fixed, cfg)?.total.item();
    let t = alg.register(&tape, &p.moving, &p.fixed)?;
    let dice_before = dice(&warp(&tape, &p.moving, &t)?, &p.fixed, 0.5)?;
    let r = instance_optimize(alg, &p.moving, &p.fixed, steps, lr, cfg)?;
    let after = r.losses.iter().copied().fold(f32::INFINITY, f32::min);
    let tape = Tape::new();
    let dice_after = dice(&warp(&tape, &p.moving, &r.transform)?, &p.fixed, 0.5)?;
    Ok((before, after, dice_before, dice_after))
}
