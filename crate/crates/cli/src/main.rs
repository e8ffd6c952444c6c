//! `rpo`: curate preference pairs, pretrain and fine-tune the denoiser,
//! evaluate checkpoints and run ablations.
//!
//! Every command prints `config_hash <hex>` as its first line of stdout.
//! Failures go to stderr as one JSON object and exit with status 1; usage
//! errors exit with status 2.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use config::{CliConfig, Overrides};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Checkpoint {
        path: PathBuf,
        source: rpo::diffusion::DiffusionError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Backend(#[from] rpo::backends::BackendError),
    #[error(transparent)]
    Diffusion(#[from] rpo::diffusion::DiffusionError),
    #[error(transparent)]
    Store(#[from] rpo::store::StoreError),
    #[error(transparent)]
    Pipeline(#[from] rpo::pipeline::PipelineError),
    #[error(transparent)]
    Train(#[from] rpo::trainer::TrainError),
    #[error(transparent)]
    Eval(#[from] rpo::eval::EvalError),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Checkpoint { .. } => "checkpoint",
            Self::Io(_) => "io",
            Self::Backend(_) => "backend",
            Self::Diffusion(_) => "diffusion",
            Self::Store(_) => "store",
            Self::Pipeline(_) => "pipeline",
            Self::Train(_) => "train",
            Self::Eval(_) => "eval",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rpo", version, about = "Relabelled preference optimisation for a toy diffusion model")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "RPO_CONFIG")]
    config: Option<PathBuf>,
    /// Seed for every component and the split salt.
    #[arg(long, global = true, env = "RPO_SEED")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "RPO_OUT")]
    out: Option<PathBuf>,
    #[arg(long, global = true, env = "RPO_CRITIC_URL")]
    critic_url: Option<String>,
    #[arg(long, global = true, env = "RPO_INSTRUCTOR_URL")]
    instructor_url: Option<String>,
    #[arg(long, global = true, env = "RPO_EDITOR_URL")]
    editor_url: Option<String>,
    #[arg(long, global = true, env = "RPO_SCORER_URL")]
    scorer_url: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Axis {
    /// Critic informativeness levels.
    Critic,
    /// Training-set sizes.
    Scale,
    /// Two-step against one-step instruction chain.
    Chain,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the critique, instruct, edit and relabel chain into a dataset store.
    Curate {
        /// Number of originals to draw.
        #[arg(long)]
        inputs: Option<usize>,
        /// Store directory [default: <out>/store].
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Pretrain the reference denoiser on the base generator.
    TrainElbo {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Fine-tune the reference on the train split of a store.
    TrainDpo {
        /// [default: <out>/reference.ckpt]
        #[arg(long)]
        reference: Option<PathBuf>,
        /// [default: <out>/store]
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate checkpoints; later ones are also compared against the first.
    Eval {
        /// [default: <out>/dpo.ckpt]
        checkpoints: Vec<PathBuf>,
    },
    /// Curate, train and evaluate one cell per variant.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
        /// [default: <out>/reference.ckpt]
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Print the resolved configuration as JSON.
    Config,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides = Overrides {
        seed: cli.seed,
        out: cli.out,
        critic_url: cli.critic_url,
        instructor_url: cli.instructor_url,
        editor_url: cli.editor_url,
        scorer_url: cli.scorer_url,
        ..Default::default()
    };
    match &cli.command {
        Command::Curate { inputs, .. } => overrides.curate_inputs = *inputs,
        Command::TrainElbo { steps } => overrides.elbo_steps = *steps,
        Command::TrainDpo { steps, .. } => overrides.dpo_steps = *steps,
        _ => {}
    }
    let config = CliConfig::resolve(cli.config.as_deref(), &overrides)?;
    println!("config_hash {}", config.hash());

    match cli.command {
        Command::Curate { store, .. } => commands::curate(&config, store),
        Command::TrainElbo { .. } => commands::train_elbo(&config),
        Command::TrainDpo { reference, store, .. } => commands::train_dpo(&config, reference, store),
        Command::Eval { checkpoints } => commands::eval(&config, checkpoints),
        Command::Ablate { axis, reference } => commands::ablate(&config, axis, reference),
        Command::Config => {
            let json = serde_json::to_string_pretty(&config).expect("config serialises");
            println!("{json}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("RPO_LOG").unwrap_or_else(|_| "warn".into()),
        )
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
