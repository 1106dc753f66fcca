//! `pat`: synthetic data, training, evaluation, mask export and gradient
//! checks for the part-aware transformer.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration error,
//! 3 I/O error, 4 numeric abort, 5 checkpoint error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pat_core::autodiff::Fault;
use pat_core::data::{load_ppm, synth_generate, Dataset, DatasetError, ImageError, SynthConfig};
use pat_core::evaluator::{evaluate_dataset, export_masks, EvalError, Metric};
use pat_core::gradcheck_suite::{self, Scope};
use pat_core::kvconfig::ConfigError;
use pat_core::trainer::{Checkpoint, CheckpointError};
use pat_core::trainer::{load_model, train, TrainConfig, TrainError};
use pat_core::TensorError;

const SEED_VAR: &str = "PAT_SEED";
const MAX_RANK: usize = 10;

#[derive(Parser)]
#[command(name = "pat", version, about = "Part-aware transformer for occluded person re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic occluded re-ID corpus.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints and metrics.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate retrieval on the query/gallery split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "cosine")]
        metric: Metric,
    },
    /// Export per-prototype and fused part masks for one image.
    Masks {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long)]
        scope: Scope,
        #[arg(long, default_value_t = 64)]
        precision: u32,
        #[arg(long, hide = true, value_name = "OP")]
        inject_fault: Option<String>,
    },
}

/// A failed command: exit code plus message.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn new(code: u8, msg: impl Into<String>) -> Self {
        Failure { code, msg: msg.into() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::new(2, e.to_string())
    }
}

impl From<TensorError> for Failure {
    fn from(e: TensorError) -> Self {
        let code = match e {
            TensorError::Degenerate { .. } | TensorError::NonScalarLoss(_) => 4,
            _ => 2,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<ImageError> for Failure {
    fn from(e: ImageError) -> Self {
        Failure::new(3, e.to_string())
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        Failure::new(3, e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        let code = if matches!(e, CheckpointError::Io { .. }) { 3 } else { 5 };
        Failure::new(code, e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(e) => e.into(),
            TrainError::Tensor(e) => e.into(),
            TrainError::Checkpoint(e) => e.into(),
            e @ (TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient { .. }) => Failure::new(4, e.to_string()),
            e @ TrainError::Io { .. } => Failure::new(3, e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Tensor(e) => e.into(),
            e @ (EvalError::Image { .. } | EvalError::Io { .. }) => Failure::new(3, e.to_string()),
            e @ (EvalError::NoMasks | EvalError::Split(_)) => Failure::new(2, e.to_string()),
        }
    }
}

fn read_config(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::new(2, format!("cannot read config {}: {e}", path.display())))
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::new(2, format!("{SEED_VAR} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn print_config(text: &str) {
    println!("# resolved config");
    print!("{text}");
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, TrainConfig), Failure> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = TrainConfig::parse(&ckpt.config).map_err(|e| Failure::new(5, format!("{}: stored config: {e}", path.display())))?;
    Ok((ckpt, cfg))
}

fn check_image_size(cfg: &TrainConfig, h: usize, w: usize, what: &str) -> Result<(), Failure> {
    if (h, w) != (cfg.image_height, cfg.image_width) {
        return Err(Failure::new(
            2,
            format!("{what} is {h}x{w} but the model expects {}x{}", cfg.image_height, cfg.image_width),
        ));
    }
    Ok(())
}

fn synth(config: &Path, out: &Path) -> Result<(), Failure> {
    let mut cfg = SynthConfig::parse(&read_config(config)?)?;
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    print_config(&cfg.to_text());
    let data = Dataset::from_images(synth_generate(&cfg)?);
    data.save(out)?;
    println!("wrote {} images of {} identities to {}", data.len(), cfg.num_identities, out.display());
    Ok(())
}

fn run_train(config: &Path, data_dir: &Path, out: &Path, set: &[String], resume: Option<&Path>) -> Result<(), Failure> {
    let text = read_config(config)?;
    let mut overrides = Vec::new();
    if let Some(seed) = env_seed()? {
        overrides.push(format!("seed={seed}"));
    }
    overrides.extend(set.iter().cloned());
    let cfg = TrainConfig::parse_with(&text, &overrides)?;
    print_config(&cfg.to_text());
    let data = Dataset::load(data_dir)?;
    if let Some(img) = data.images.first() {
        check_image_size(&cfg, img.height(), img.width(), "training data")?;
    }
    let ckpt = match resume {
        Some(p) => Some(load_checkpoint(p)?.0),
        None => None,
    };
    let epochs = cfg.epochs;
    let trainer = train(&cfg, &data, out, ckpt.as_ref(), |m| {
        println!(
            "epoch {}/{epochs} lr {:.3e} loss {:.4} (en {:.4} div {:.4} dis {:.4})",
            m.epoch, m.lr, m.total, m.encoder, m.diversity, m.discriminability
        );
    })?;
    println!("trained {} epochs; output in {}", trainer.epoch, out.display());
    Ok(())
}

fn eval(checkpoint: &Path, data_dir: &Path, out: &Path, metric: Metric) -> Result<(), Failure> {
    let (ckpt, mut cfg) = load_checkpoint(checkpoint)?;
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    print_config(&cfg.to_text());
    println!("metric = {metric:?}");
    let model = load_model(&ckpt)?;
    let data = Dataset::load(data_dir)?;
    if let Some(img) = data.images.first() {
        check_image_size(&cfg, img.height(), img.width(), "evaluation data")?;
    }
    let result = evaluate_dataset(&model, &data, metric, MAX_RANK, cfg.seed)?;
    fs::create_dir_all(out).map_err(|e| Failure::new(3, format!("{}: {e}", out.display())))?;
    let path = out.join("retrieval.csv");
    fs::write(&path, result.to_csv()).map_err(|e| Failure::new(3, format!("{}: {e}", path.display())))?;
    if !result.dropped.is_empty() {
        println!("{} queries without a valid gallery match were dropped", result.dropped.len());
    }
    println!("{}", result.summary());
    Ok(())
}

fn masks(checkpoint: &Path, image: &Path, out: &Path) -> Result<(), Failure> {
    let (ckpt, cfg) = load_checkpoint(checkpoint)?;
    print_config(&cfg.to_text());
    let model = load_model(&ckpt)?;
    let img = load_ppm(image)?;
    check_image_size(&cfg, img.shape()[0], img.shape()[1], &image.display().to_string())?;
    for p in export_masks(&model, &img, out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn gradcheck(scope: Scope, precision: u32, fault: Option<&str>) -> Result<(), Failure> {
    if precision != 64 {
        return Err(Failure::new(2, format!("gradient checks run at 64-bit precision only, got {precision}")));
    }
    let fault = match fault {
        None => None,
        Some("matmul") => Some(Fault::MatmulBackward),
        Some(other) => return Err(Failure::new(2, format!("no fault named {other:?}"))),
    };
    println!("scope = {scope:?}\nprecision = {precision}\nseed = {}", gradcheck_suite::SEED);
    let results = gradcheck_suite::run(scope, fault)?;
    let mut failed = Vec::new();
    for u in &results {
        println!(
            "{:<24} worst {:.3e}  tol {:.0e}  coords {:>5}  skipped {}  {}",
            u.name,
            u.worst,
            u.tolerance,
            u.coords,
            u.skipped,
            if u.passed() { "ok" } else { "FAIL" }
        );
        if !u.passed() {
            failed.push(u.name.as_str());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(1, format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth { config, out } => synth(config, out),
        Command::Train {
            config,
            data,
            out,
            set,
            resume,
        } => run_train(config, data, out, set, resume.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            out,
            metric,
        } => eval(checkpoint, data, out, *metric),
        Command::Masks { checkpoint, image, out } => masks(checkpoint, image, out),
        Command::Gradcheck {
            scope,
            precision,
            inject_fault,
        } => gradcheck(*scope, *precision, inject_fault.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
