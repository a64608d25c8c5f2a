//! `maskdiff`: train, run and evaluate manipulation-localization models.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand};
use maskdiff::checkpoint::Checkpoint;
use maskdiff::codec::BinaryMask;
use maskdiff::conditioner::{ImageRole, InputImage, TaskMode};
use maskdiff::config::{ExperimentConfig, TrainMode, CONFIG_DIR_ENV};
use maskdiff::datasets::{load_manifest, procedural_bases, synth_forgery, ForgerySample, Split};
use maskdiff::sampler::{evaluate, image_seed, uncertainty_map, Sampler, Variant};
use maskdiff::seed::stream;
use maskdiff::trainer::{train_loop, RunDir, TrainState};

/// Name of the config file looked up in the config directory when
/// `--config` is not given.
const DEFAULT_CONFIG_NAME: &str = "maskdiff.toml";

#[derive(Parser, Debug)]
#[command(name = "maskdiff", version, about = "Conditional diffusion for manipulation localization")]
struct Cli {
    /// Experiment config (TOML). Relative paths are also searched in $MASKDIFF_CONFIG_DIR.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes checkpoints and a line-delimited loss log.
    Train(TrainArgs),
    /// Predict a mask for one image (IML) or one forged/original pair (CIML).
    Infer(InferArgs),
    /// Score a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Write every trajectory step, the uncertainty map and an overlay.
    Visualize(InferArgs),
    /// Generate a synthetic splice dataset.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Continue from this checkpoint; the step counter carries on.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Run directory (defaults to `data.output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct SamplingArgs {
    /// DDIM steps (defaults to `sampler.steps`).
    #[arg(long)]
    steps: Option<usize>,
    /// Noise seed (defaults to `sampler.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Single denoiser call on a zero state instead of sampling from noise.
    #[arg(long)]
    zero_noise: bool,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Forged image.
    #[arg(long)]
    image: PathBuf,
    /// Pristine original; required in CIML mode.
    #[arg(long)]
    original: Option<PathBuf>,
    /// `iml` or `ciml`; defaults to `ciml` when an original is given.
    #[arg(long)]
    mode: Option<TaskMode>,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Also write the uncertainty heat map.
    #[arg(long)]
    uncertainty: bool,
    /// Also write the mask of every trajectory step.
    #[arg(long)]
    trajectory: bool,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest to score (defaults to `data.test_manifest`).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Task to evaluate; defaults to the training mode of the checkpoint.
    #[arg(long)]
    mode: Option<TaskMode>,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    /// Number of procedural base images to splice between.
    #[arg(long, default_value_t = 40)]
    bases: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
}

#[derive(clap::ValueEnum, Debug, Clone, Copy)]
enum SplitArg {
    Train,
    Test,
}

/// Errors that map to exit code 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e.downcast_ref::<UsageError>().is_some()
                || matches!(
                    e.downcast_ref::<maskdiff::Error>(),
                    Some(maskdiff::Error::Config { .. } | maskdiff::Error::ModeMismatch(_))
                );
            ExitCode::from(if config_error { 1 } else { 2 })
        }
    }
}

/// Explicit `--config`, else `$MASKDIFF_CONFIG_DIR/maskdiff.toml`, else defaults.
fn base_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => match std::env::var_os(CONFIG_DIR_ENV).map(|d| Path::new(&d).join(DEFAULT_CONFIG_NAME)) {
            Some(p) if p.is_file() => ExperimentConfig::load(&p)?,
            _ => ExperimentConfig::default(),
        },
    };
    Ok(cfg.with_overrides(&cli.overrides)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(&cli, a).map(|p| println!("{}", p.display())),
        Command::Infer(a) => cmd_infer(&cli, a, false),
        Command::Visualize(a) => cmd_infer(&cli, a, true),
        Command::Eval(a) => cmd_eval(&cli, a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn load_samples(path: &Path, size: usize) -> anyhow::Result<(Vec<ForgerySample>, String)> {
    let manifest = load_manifest(path)?;
    if manifest.is_empty() {
        bail!("manifest {} holds no records", path.display());
    }
    let name = path
        .parent()
        .and_then(|p| p.file_name())
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Ok((manifest.load_all(size)?, name))
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> anyhow::Result<PathBuf> {
    let cfg = base_config(cli)?;
    let manifest = cfg
        .data
        .train_manifest
        .clone()
        .ok_or_else(|| usage("data.train_manifest is not set"))?;
    let out = args.out.clone().unwrap_or_else(|| cfg.data.output_dir.clone());
    let (data, _) = load_samples(&manifest, cfg.model.image_size)?;
    let mut state = match &args.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            TrainState::from_checkpoint(&ckpt, &cfg, DType::F32, &Device::Cpu)?
        }
        None => TrainState::new(&cfg, DType::F32, &Device::Cpu)?,
    };
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml_string())
        .with_context(|| format!("writing {}", out.join("config.toml").display()))?;
    let total = state.total_steps(data.len());
    log::info!(
        "training {} parameters on {} samples, steps {}..{}",
        state.model.parameter_count(),
        data.len(),
        state.step,
        total
    );
    let run_dir = RunDir::new(&out);
    train_loop(&mut state, &data, Some(&run_dir), |r| {
        log::info!("step {} epoch {} loss {:.5} mode {}", r.step, r.epoch, r.loss, r.mode);
    })?;
    Ok(run_dir.final_checkpoint())
}

/// Checkpoint config with sampler overrides from the command line applied.
fn inference_setup(cli: &Cli, checkpoint: &Path) -> anyhow::Result<(Checkpoint, ExperimentConfig)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = match &cli.config {
        Some(_) => base_config(cli)?,
        None => ckpt.meta.config.with_overrides(&cli.overrides)?,
    };
    Ok((ckpt, cfg))
}

fn read_image(path: &Path, role: ImageRole) -> anyhow::Result<InputImage> {
    let img = image::open(path)
        .with_context(|| format!("reading {}", path.display()))?
        .to_rgb8();
    Ok(InputImage::from_rgb(&img, role))
}

fn save_mask(mask: &BinaryMask, path: &Path) -> anyhow::Result<()> {
    mask.to_gray()
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
}

fn cmd_infer(cli: &Cli, args: &InferArgs, visualize: bool) -> anyhow::Result<()> {
    let mode = match (args.mode, &args.original) {
        (Some(TaskMode::Ciml), None) => return Err(usage("ciml mode needs --original")),
        (Some(TaskMode::Iml), Some(_)) => return Err(usage("iml mode takes no --original")),
        (Some(m), _) => m,
        (None, Some(_)) => TaskMode::Ciml,
        (None, None) => TaskMode::Iml,
    };
    if visualize && args.sampling.zero_noise {
        return Err(usage("visualize needs a sampling trajectory; drop --zero-noise"));
    }
    let (ckpt, cfg) = inference_setup(cli, &args.checkpoint)?;
    let model = ckpt.inference_model(&cfg, DType::F32, &Device::Cpu)?;
    let schedule = cfg.schedule.build()?;
    let size = cfg.model.image_size;

    let forged_full = read_image(&args.image, ImageRole::Forged)?;
    let (h, w) = (forged_full.height(), forged_full.width());
    let forged = forged_full.resized(size, size);
    let original = match &args.original {
        Some(p) => Some(read_image(p, ImageRole::Original)?.resized(size, size)),
        None => None,
    };
    let originals: Option<Vec<&InputImage>> = original.as_ref().map(|o| vec![o]);
    let conds = model.conditions(mode, &[&forged], originals.as_deref())?;
    let sampler = Sampler::new(&model, &schedule)?
        .with_threshold(cfg.sampler.threshold)?
        .with_output_size(h, w);
    let stem = args
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    if args.sampling.zero_noise {
        let pred = sampler.zero_noise(&conds)?.remove(0);
        let path = args.out.join(format!("{stem}_mask.png"));
        save_mask(&pred.mask, &path)?;
        println!("{}", path.display());
        return Ok(());
    }
    let steps = args.sampling.steps.unwrap_or(cfg.sampler.steps);
    let seed = image_seed(args.sampling.seed.unwrap_or(cfg.sampler.seed), &stem);
    let traj = sampler.sample_seeded(&conds, steps, &[seed])?.remove(0);
    let path = args.out.join(format!("{stem}_mask.png"));
    save_mask(&traj.final_mask, &path)?;
    println!("{}", path.display());
    if args.uncertainty || visualize {
        let p = args.out.join(format!("{stem}_uncertainty.png"));
        uncertainty_map(&traj)
            .to_gray()
            .save(&p)
            .with_context(|| format!("writing {}", p.display()))?;
        println!("{}", p.display());
    }
    if args.trajectory || visualize {
        for (i, s) in traj.steps.iter().enumerate() {
            let p = args.out.join(format!("{stem}_step{:02}_t{:04}.png", i + 1, s.timestep));
            save_mask(&s.mask, &p)?;
            println!("{}", p.display());
        }
    }
    if visualize {
        let mut overlay = forged_full.to_rgb();
        for (x, y, px) in overlay.enumerate_pixels_mut() {
            if traj.final_mask.get(y as usize, x as usize) == 1 {
                px.0 = [
                    ((px.0[0] as u16 + 255) / 2) as u8,
                    px.0[1] / 2,
                    px.0[2] / 2,
                ];
            }
        }
        let p = args.out.join(format!("{stem}_overlay.png"));
        overlay.save(&p).with_context(|| format!("writing {}", p.display()))?;
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> anyhow::Result<()> {
    let (ckpt, mut cfg) = inference_setup(cli, &args.checkpoint)?;
    if let Some(s) = args.sampling.steps {
        cfg.sampler.steps = s;
    }
    if let Some(s) = args.sampling.seed {
        cfg.sampler.seed = s;
    }
    cfg.validate()?;
    let mode = match (args.mode, ckpt.meta.config.train.mode) {
        (Some(m), _) => m,
        (None, TrainMode::Iml) => TaskMode::Iml,
        (None, TrainMode::Ciml) => TaskMode::Ciml,
        (None, TrainMode::Mixed) => return Err(usage("checkpoint was trained on both tasks; pass --mode")),
    };
    let manifest = args
        .manifest
        .clone()
        .or_else(|| cfg.data.test_manifest.clone())
        .ok_or_else(|| usage("no --manifest and data.test_manifest is not set"))?;
    let model = ckpt.inference_model(&cfg, DType::F32, &Device::Cpu)?;
    let schedule = cfg.schedule.build()?;
    let (samples, name) = load_samples(&manifest, cfg.model.image_size)?;
    let variant = if args.sampling.zero_noise {
        Variant::ZeroNoise
    } else {
        Variant::Steps(cfg.sampler.steps)
    };
    let report = evaluate(&model, &schedule, &samples, mode, variant, &cfg.sampler, &name)?;
    report.write(&args.out)?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> anyhow::Result<()> {
    if args.size == 0 {
        return Err(usage("--size must be positive"));
    }
    let mut rng = stream(args.seed, &[]);
    let bases = procedural_bases(args.bases, args.size, &mut rng);
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let manifest = synth_forgery(&bases, &mut rng, args.count, &args.out, split)?;
    println!("{}", args.out.join("manifest.jsonl").display());
    log::info!("wrote {} samples", manifest.len());
    Ok(())
}
