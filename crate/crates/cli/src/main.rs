use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use num_format::{Locale, ToFormattedString};
use serde::Deserialize;

use tgm_core::checkpoint::{load_checkpoint, save_checkpoint};
use tgm_core::data::{gen_synthetic, load_dataset, save_dataset, SynthSpec};
use tgm_core::kernel::write_kernel_csv;
use tgm_core::model::{Model, ModelConfig};
use tgm_core::train::{evaluate, fit, run_gradcheck, FitOptions, GradCheckSpec, TrainPlan};
use tgm_core::TgmError;

#[derive(Parser)]
#[command(name = "tgm", version, about = "Temporal Gaussian mixture layers: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the planted-offset synthetic dataset.
    GenSynth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoints plus an NDJSON log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Threads for validation inference.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Print per-frame mAP of a checkpoint as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Finite-difference check of analytic gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Perturb the analytic gradients; every case should then fail.
        #[arg(long)]
        inject_bug: bool,
    },
    /// Learnable parameter counts per layer.
    Params {
        #[command(flatten)]
        common: Common,
        /// Override the kernel length of every layer.
        #[arg(long = "L", value_name = "L")]
        kernel_len: Option<usize>,
    },
    /// Write every mixed kernel of a checkpoint as CSV.
    ExportKernels {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Contents of a `--config` file. Every section is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    model: Option<ModelConfig>,
    train: Option<TrainPlan>,
    synth: Option<SynthSpec>,
    gradcheck: Option<GradCheckSpec>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] TgmError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(TgmError::Io(_)) | CliError::Io { .. } => 3,
            CliError::Core(TgmError::Numerical(_)) | CliError::Failed(_) => 4,
            CliError::Core(_) | CliError::Invalid(_) => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

fn require_model(cfg: &mut RunConfig) -> Result<ModelConfig> {
    cfg.model
        .take()
        .ok_or_else(|| CliError::Invalid("config has no \"model\" section".into()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenSynth { common, out } => gen_synth(common, &out),
        Command::Train {
            common,
            manifest,
            out,
            epochs,
            lr,
            threads,
            resume,
        } => train(common, &manifest, &out, epochs, lr, threads, resume.as_deref()),
        Command::Eval {
            checkpoint,
            manifest,
            threads,
        } => eval(&checkpoint, &manifest, threads),
        Command::Gradcheck { common, inject_bug } => gradcheck(common, inject_bug),
        Command::Params { common, kernel_len } => params(common, kernel_len),
        Command::ExportKernels { checkpoint, out } => export_kernels(&checkpoint, &out),
    }
}

fn gen_synth(common: Common, out: &Path) -> Result<()> {
    let cfg = read_config(common.config.as_deref())?;
    let mut spec = cfg.synth.unwrap_or_default();
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    let data = gen_synthetic::<f64>(&spec)?;
    fs::create_dir_all(out).map_err(io_at(out))?;
    let manifest = save_dataset(out, &data.samples)?;
    let frames: usize = data.samples.iter().map(|s| s.labels.t()).sum();
    println!("videos {}", data.samples.len());
    println!("frames {frames}");
    for class in 0..spec.num_classes {
        let positives: usize = data.samples.iter().map(|s| s.labels.positives(class)).sum();
        println!("class {class} delay {} positives {positives}", spec.delays[class]);
    }
    println!("manifest {}", manifest.display());
    Ok(())
}

fn train(
    common: Common,
    manifest: &Path,
    out: &Path,
    epochs: Option<usize>,
    lr: Option<f64>,
    threads: usize,
    resume: Option<&Path>,
) -> Result<()> {
    let mut cfg = read_config(common.config.as_deref())?;
    let mut plan = cfg.train.take().unwrap_or_default();
    if let Some(seed) = common.seed {
        plan.seed = seed;
    }
    if let Some(epochs) = epochs {
        plan.epochs = epochs;
    }
    if let Some(lr) = lr {
        plan.base_lr = lr;
    }
    plan.validate()?;
    let dataset = load_dataset::<f64>(manifest)?;
    if dataset.is_empty() {
        return Err(CliError::Invalid(format!("{}: manifest lists no videos", manifest.display())));
    }
    let (mut model, state) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint::<f64>(path)?;
            if let Some(cfg_model) = cfg.model.as_ref() {
                if cfg_model != ckpt.model.config() {
                    return Err(CliError::Invalid("config model differs from the resumed checkpoint".into()));
                }
            }
            let state = ckpt
                .training
                .ok_or_else(|| CliError::Invalid(format!("{} holds no optimizer state", path.display())))?;
            (ckpt.model, Some(state))
        }
        None => (Model::<f64>::new(require_model(&mut cfg)?, plan.seed)?, None),
    };
    if let Some(first) = dataset.first() {
        if first.features.d() != model.config().d {
            return Err(CliError::Invalid(format!(
                "model expects d = {}, data has d = {}",
                model.config().d,
                first.features.d()
            )));
        }
    }
    fs::create_dir_all(out).map_err(io_at(out))?;
    if state.is_none() {
        save_checkpoint(out.join("init.tgmm"), &model, None)?;
    }
    let log_path = out.join("log.ndjson");
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_at(&log_path))?);
    let options = FitOptions {
        checkpoint_dir: Some(out),
        resume: state,
        threads,
        log: Some(&mut log),
    };
    let result = fit(&mut model, &dataset, &plan, options);
    log.flush().map_err(io_at(&log_path))?;
    let records = result?;
    if let Some(last) = records.last() {
        println!(
            "epoch {} loss {:.6} val_map {}",
            last.epoch,
            last.mean_loss,
            last.val_map.map_or("-".to_string(), |m| format!("{m:.6}"))
        );
    }
    Ok(())
}

fn eval(checkpoint: &Path, manifest: &Path, threads: usize) -> Result<()> {
    let model = load_checkpoint::<f64>(checkpoint)?.model;
    let dataset = load_dataset::<f64>(manifest)?;
    if dataset.is_empty() {
        return Err(CliError::Invalid(format!("{}: manifest lists no videos", manifest.display())));
    }
    let samples: Vec<_> = dataset.iter().collect();
    let report = evaluate(&model, &samples, threads)?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(TgmError::from)?);
    Ok(())
}

fn gradcheck(common: Common, inject_bug: bool) -> Result<()> {
    let cfg = read_config(common.config.as_deref())?;
    let mut spec = cfg.gradcheck.unwrap_or_default();
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    let cases = run_gradcheck(&spec, inject_bug)?;
    let mut failed = 0;
    for case in &cases {
        let r = &case.report;
        if !r.pass {
            failed += 1;
        }
        println!(
            "{} {} max_rel_err {:.3e} worst {} checked {}",
            if r.pass { "PASS" } else { "FAIL" },
            case.name,
            r.max_rel_err,
            r.worst_parameter.as_deref().unwrap_or("-"),
            r.checked
        );
        if !r.skipped.is_empty() {
            println!("    skipped (frozen): {}", r.skipped.join(", "));
        }
    }
    println!("{} of {} cases passed", cases.len() - failed, cases.len());
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn params(common: Common, kernel_len: Option<usize>) -> Result<()> {
    let mut cfg = read_config(common.config.as_deref())?;
    let mut model = require_model(&mut cfg)?;
    if let Some(l) = kernel_len {
        for layer in &mut model.layers {
            layer.kernel_len = l;
        }
    }
    model.validate()?;
    let fmt = |n: usize| n.to_formatted_string(&Locale::en);
    println!(
        "{:<10} {:<26} {:<24} {:>5} {:>5} {:>4} {:>12}",
        "layer", "form", "source", "c_in", "c_out", "M", "params"
    );
    for (i, l) in model.layers.iter().enumerate() {
        println!(
            "{:<10} {:<26} {:<24} {:>5} {:>5} {:>4} {:>12}",
            i,
            format!("{:?}", l.form),
            format!("{:?}", l.source),
            l.c_in,
            l.c_out,
            l.num_gaussians,
            fmt(l.param_count())
        );
    }
    println!("{:<10} {:>80}", "classifier", fmt(model.classifier_param_count()));
    println!("{:<10} {:>80}", "total", fmt(model.param_count()));
    Ok(())
}

fn export_kernels(checkpoint: &Path, out: &Path) -> Result<()> {
    let model = load_checkpoint::<f64>(checkpoint)?.model;
    let kernels = model.kernels()?;
    let views: Vec<_> = kernels.iter().map(|k| k.view()).collect();
    let mut file = BufWriter::new(File::create(out).map_err(io_at(out))?);
    write_kernel_csv(&mut file, &views).map_err(io_at(out))?;
    file.flush().map_err(io_at(out))?;
    Ok(())
}
