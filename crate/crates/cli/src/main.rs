//! `trajret`: runs the trajectory retrieval pipeline stage by stage inside a
//! working directory.

mod commands;
mod config;
mod error;
mod masks;
mod workspace;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trajret_core::pairs::Split;
use trajret_core::token_select::KeepMode;

use config::{PipelineConfig, SourceConfig};
use error::CliError;

const DEFAULT_CONFIG: &str = "trajret.toml";

#[derive(Debug, Parser)]
#[command(name = "trajret", version, about = "Multimodal GUI trajectory retrieval pipeline")]
struct Cli {
    /// Pipeline config (TOML). Defaults to ./trajret.toml when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Working directory for stage artifacts; overrides `work_dir`.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus (manifest plus screenshots).
    Synth(SynthArgs),
    /// Validate source corpora and merge them into the working directory.
    Ingest(IngestArgs),
    /// Describe screenshots and generate silver queries.
    Annotate(AnnotateArgs),
    /// Derive retrieval pairs for every subtask.
    Extract(ExtractArgs),
    /// Build the state, trajectory and interval candidate pools.
    Pools(PoolsArgs),
    /// Assign pairs to train / IND / OOD.
    Split(SplitArgs),
    /// Write the interleaved key and value sequences of every pair.
    Serialize(SerializeArgs),
    /// Train the encoder on the train split.
    Train(TrainArgs),
    /// Embed every candidate pool with the trained encoder.
    Embed,
    /// Compute Recall@K on the evaluation splits.
    Eval(EvalArgs),
    /// Render count tables, recall tables or token-selection overlays.
    Report {
        #[command(subcommand)]
        what: ReportCommand,
    },
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub trajectories: usize,
    #[arg(long, default_value_t = 1)]
    pub min_steps: u32,
    #[arg(long, default_value_t = 6)]
    pub max_steps: u32,
    #[arg(long, default_value_t = 112)]
    pub image_size: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Source corpus as NAME=DIR; replaces the configured sources.
    #[arg(long = "source", value_parser = parse_source)]
    pub sources: Vec<SourceConfig>,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    /// Chat-completions URL, or "mock".
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    /// Re-describe states that already have a description.
    #[arg(long)]
    pub overwrite: bool,
    /// Keep existing descriptions and only generate silver queries.
    #[arg(long)]
    pub skip_describe: bool,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Apply the length cap.
    #[arg(long)]
    pub lite: bool,
}

#[derive(Debug, Args)]
pub struct PoolsArgs {
    #[arg(long)]
    pub lite: bool,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ood_fraction: Option<f64>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Exact per-subtask train counts.
    #[arg(long)]
    pub stratified: bool,
}

#[derive(Debug, Args)]
pub struct SerializeArgs {
    /// Only pairs of this split.
    #[arg(long, value_parser = parse_split)]
    pub split: Option<Split>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Warm-up fraction of the schedule.
    #[arg(long)]
    pub warmup: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub sub_batch: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, value_parser = parse_keep_mode)]
    pub keep_mode: Option<KeepMode>,
    #[arg(long)]
    pub interleave: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Validate and echo the effective config without training.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Comma-separated cutoffs.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// Comma-separated splits to evaluate.
    #[arg(long, value_delimiter = ',', value_parser = parse_split)]
    pub splits: Option<Vec<Split>>,
}

#[derive(Debug, Subcommand)]
pub enum ReportCommand {
    /// Pair counts per task and subtask, by source.
    Counts,
    /// Recall tables from the last evaluation.
    Recall {
        /// Row label of the overall table.
        #[arg(long, default_value = "trajret")]
        method: String,
    },
    /// Screenshots with dropped patches darkened.
    Masks {
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_source(s: &str) -> Result<SourceConfig, String> {
    let (name, root) = s.split_once('=').ok_or("expected NAME=DIR")?;
    if name.is_empty() || root.is_empty() {
        return Err("expected NAME=DIR".into());
    }
    Ok(SourceConfig {
        name: name.to_string(),
        root: PathBuf::from(root),
    })
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "ind" => Ok(Split::Ind),
        "ood" => Ok(Split::Ood),
        _ => Err(format!("unknown split '{s}' (train, ind, ood)")),
    }
}

fn parse_keep_mode(s: &str) -> Result<KeepMode, String> {
    match s {
        "random" => Ok(KeepMode::Random),
        "first_patch" | "first-patch" => Ok(KeepMode::FirstPatch),
        _ => Err(format!("unknown keep mode '{s}' (random, first_patch)")),
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None if std::path::Path::new(DEFAULT_CONFIG).is_file() => PipelineConfig::load(DEFAULT_CONFIG.as_ref())?,
        None => PipelineConfig::default(),
    };
    if let Some(dir) = &cli.work_dir {
        cfg.work_dir = dir.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::Synth(args) = &cli.command {
        return commands::synth(args);
    }
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth(_) => unreachable!("handled above"),
        Command::Ingest(args) => commands::ingest(&mut cfg, &args),
        Command::Annotate(args) => commands::annotate(&mut cfg, &args),
        Command::Extract(args) => commands::extract(&mut cfg, &args),
        Command::Pools(args) => commands::pools(&mut cfg, &args),
        Command::Split(args) => commands::split(&mut cfg, &args),
        Command::Serialize(args) => commands::serialize(&mut cfg, &args),
        Command::Train(args) => commands::train(&mut cfg, &args),
        Command::Embed => commands::embed(&mut cfg),
        Command::Eval(args) => commands::eval(&mut cfg, &args),
        Command::Report { what } => commands::report(&mut cfg, &what),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
