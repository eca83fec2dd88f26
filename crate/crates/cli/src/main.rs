use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vdm_core::config::RunConfig;
use vdm_core::Error;

mod commands;
mod svg;

#[derive(Parser, Debug)]
#[command(name = "vdm", version, about = "Differentiable patch masking for vision transformers")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the counting-patches dataset.
    GenData(GenDataArgs),
    /// Train the classifier or the interpretation network.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Explain one image: saliency map, overlay and mask JSON.
    Explain(ExplainArgs),
    /// Perturbation curves and AUC summaries for attribution methods.
    Eval(EvalArgs),
    /// Finite-difference check of every op and of the full masking loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// Training images; validation and evaluation sizes come from the config.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    val_count: Option<usize>,
    #[arg(long)]
    eval_count: Option<usize>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    patch_px: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum TrainCommand {
    Vit(TrainVitArgs),
    Diffmask(TrainDiffmaskArgs),
}

#[derive(Args, Debug)]
struct TrainVitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainDiffmaskArgs {
    #[arg(long)]
    data: PathBuf,
    /// Classifier checkpoint; it stays frozen.
    #[arg(long)]
    vit: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_gates: Option<f64>,
    #[arg(long)]
    lr_baseline: Option<f64>,
    #[arg(long)]
    lr_lambda: Option<f64>,
    #[arg(long)]
    lambda_init: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    /// Binary RGB pixmap (P6).
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    vit: PathBuf,
    #[arg(long)]
    diffmask: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vit: PathBuf,
    /// Required when `diffmask` is among the methods.
    #[arg(long)]
    diffmask: Option<PathBuf>,
    /// Comma-separated subset of diffmask, rollout, random.
    #[arg(long, default_value = "diffmask,rollout,random")]
    methods: String,
    #[arg(long)]
    out: PathBuf,
    /// Also write curves.svg.
    #[arg(long)]
    svg: bool,
    /// Replacement color for removed patches: gray or mean.
    #[arg(long)]
    fill: Option<String>,
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    points: usize,
    #[arg(long, hide = true, value_enum)]
    inject_fault: Option<FaultArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaultArg {
    Tanh,
}

/// Failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Diverged(_) => 3,
            Error::AtStep { source, .. } if matches!(**source, Error::Diverged(_)) => 3,
            Error::Config(_)
            | Error::Dimension(_)
            | Error::Parse { .. }
            | Error::Checkpoint(_)
            | Error::Io(_)
            | Error::Json(_) => 2,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenData(a) => commands::gen_data(cfg, a),
        Command::Train(TrainCommand::Vit(a)) => commands::train_vit(cfg, a),
        Command::Train(TrainCommand::Diffmask(a)) => commands::train_diffmask(cfg, a),
        Command::Explain(a) => commands::explain(cfg, a),
        Command::Eval(a) => commands::eval(cfg, a),
        Command::Gradcheck(a) => commands::gradcheck(cfg, a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
