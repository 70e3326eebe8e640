//! `xdrive` command-line pipeline: synthetic data, preparation, two-stage
//! training, evaluation, generation and dataset reports.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or input paths. Exit code 2.
    Usage(String),
    /// Anything that went wrong while running. Exit code 1.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }
}

impl From<xdrive::Error> for CliError {
    fn from(e: xdrive::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

#[derive(Parser, Debug)]
#[command(name = "xdrive", version, about = "Attention-based driving controller with textual explanations")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Shared {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for inference. Results do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// TOML file of defaults; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic driving dataset in the raw layout.
    Synth(commands::SynthArgs),
    /// Derive controls, frames and the vocabulary from a raw dataset.
    Prep(commands::PrepArgs),
    /// Train the attention controller.
    TrainController(commands::TrainControllerArgs),
    /// Train an explainer on a frozen controller.
    TrainExplainer(commands::TrainExplainerArgs),
    /// Score checkpoints on a dataset split and write metrics.csv.
    Evaluate(commands::EvaluateArgs),
    /// Generate explanations and attention maps for clips.
    Explain(commands::ExplainArgs),
    /// Descriptive statistics of an annotation file.
    Stats(commands::StatsArgs),
    /// Inter-annotator agreement between two annotation files.
    Agreement(commands::AgreementArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Prep(_) => "prep",
            Command::TrainController(_) => "train-controller",
            Command::TrainExplainer(_) => "train-explainer",
            Command::Evaluate(_) => "evaluate",
            Command::Explain(_) => "explain",
            Command::Stats(_) => "stats",
            Command::Agreement(_) => "agreement",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut settings = config::Settings::load(cli.shared.config.as_deref(), cli.command.name())?;
    let ctx = commands::Context::resolve(&cli.shared, &mut settings, cli.command.name())?;
    match cli.command {
        Command::Synth(a) => commands::synth(&ctx, settings, a),
        Command::Prep(a) => commands::prep(&ctx, settings, a),
        Command::TrainController(a) => commands::train_controller(&ctx, settings, a),
        Command::TrainExplainer(a) => commands::train_explainer(&ctx, settings, a),
        Command::Evaluate(a) => commands::evaluate(&ctx, settings, a),
        Command::Explain(a) => commands::explain(&ctx, settings, a),
        Command::Stats(a) => commands::stats(&ctx, settings, a),
        Command::Agreement(a) => commands::agreement(&ctx, settings, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
