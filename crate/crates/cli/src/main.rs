//! `csm`: generate cohorts, train causal shape models, and query them.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "csm", version, about = "Causal shape models for 3D meshes")]
struct Cli {
    /// TOML run configuration; flags override its keys.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `data.dir`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a synthetic cohort and write meshes plus manifest.
    GenerateData(GenerateArgs),
    /// Train a model on the cohort's training split.
    Train(TrainArgs),
    /// Reconstruct one subject from its inferred exogenous noise.
    Reconstruct(SubjectArgs),
    /// Sample a population under an intervention.
    Intervene(InterveneArgs),
    /// Counterfactual meshes for one subject under a list of interventions.
    Counterfact(CounterfactArgs),
    /// Run an evaluation suite and write tables, figures and meshes.
    Evaluate(EvaluateArgs),
    /// Convert a mesh, optionally colouring it by displacement from a reference.
    ExportMesh(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Overrides `data.train`.
    #[arg(long)]
    pub train: Option<usize>,
    /// Overrides `data.val`.
    #[arg(long)]
    pub val: Option<usize>,
    /// Overrides `data.test`.
    #[arg(long)]
    pub test: Option<usize>,
    /// Overrides `template.subdivisions`.
    #[arg(long)]
    pub subdivisions: Option<u32>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Overrides `training.epochs` (total, including resumed epochs).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides `training.batch_size`.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckpointArg {
    /// Model checkpoint; `<output_dir>/checkpoint.json` by default.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SubjectArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    /// Subject id from the cohort manifest.
    #[arg(long)]
    pub subject: usize,
}

#[derive(Debug, Args)]
pub struct InterveneArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    /// Assignments such as `a=70,s=1`; may repeat.
    #[arg(long = "do", value_name = "NODE=VALUE")]
    pub assignments: Vec<String>,
    /// Number of samples.
    #[arg(long, short, default_value_t = 10)]
    pub n: usize,
    /// Fix the latent code to zero instead of sampling it.
    #[arg(long)]
    pub zero_latent: bool,
}

#[derive(Debug, Args)]
pub struct CounterfactArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    /// Subject id from the cohort manifest.
    #[arg(long)]
    pub subject: usize,
    /// One output step per occurrence, e.g. `--do a=80 --do a=85,s=0`;
    /// without any, the null intervention.
    #[arg(long = "do", value_name = "NODE=VALUE[,NODE=VALUE]")]
    pub steps: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    /// all, reconstruction, compactness, specificity, interpolation, traits,
    /// trajectories or projection.
    #[arg(long, default_value = "all")]
    pub suite: String,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Input mesh (PLY or OBJ).
    pub input: PathBuf,
    /// Output mesh; the extension picks the format.
    pub output: PathBuf,
    /// Reference mesh on the same topology; adds `signed_disp_mm` to PLY output.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.data {
        config.data.dir = Some(dir.clone());
    }
    if let Some(dir) = &cli.out {
        config.output_dir = Some(dir.clone());
    }
    match &cli.command {
        Command::GenerateData(a) => {
            config.data.train = a.train.unwrap_or(config.data.train);
            config.data.val = a.val.unwrap_or(config.data.val);
            config.data.test = a.test.unwrap_or(config.data.test);
            config.template.subdivisions = a.subdivisions.unwrap_or(config.template.subdivisions);
        }
        Command::Train(a) => {
            config.training.epochs = a.epochs.unwrap_or(config.training.epochs);
            config.training.batch_size = a.batch_size.unwrap_or(config.training.batch_size);
        }
        _ => {}
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::ExportMesh(a) = &cli.command {
        return commands::export_mesh(a);
    }
    let config = resolve_config(&cli)?;
    match &cli.command {
        Command::GenerateData(_) => commands::generate_data(&config),
        Command::Train(a) => commands::train(&config, a),
        Command::Reconstruct(a) => commands::reconstruct(&config, a),
        Command::Intervene(a) => commands::intervene(&config, a),
        Command::Counterfact(a) => commands::counterfact(&config, a),
        Command::Evaluate(a) => commands::evaluate(&config, a),
        Command::ExportMesh(_) => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("{}", CliError::usage(first).line());
            return ExitCode::from(error::EXIT_USER);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit)
        }
    }
}
