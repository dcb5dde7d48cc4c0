use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use declineforge_cli::{cmd_run_all, CliError, Outcome, Pipeline, PipelineConfig, Stage};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Synth,
    Cluster,
    Split,
    Pretrain,
    Embed,
    Evaluate,
    RunAll,
    Report,
}

/// Cognitive-decline modeling pipeline on synthetic cohorts.
#[derive(Debug, Parser)]
#[command(name = "declineforge", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overwrite existing stage outputs.
    #[arg(long)]
    force: bool,
    /// Master seed, overriding the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Workspace directory, overriding the config file.
    #[arg(long)]
    workspace: Option<PathBuf>,
}

fn stage_of(c: Command) -> Option<Stage> {
    match c {
        Command::Synth => Some(Stage::Synth),
        Command::Cluster => Some(Stage::Cluster),
        Command::Split => Some(Stage::Split),
        Command::Pretrain => Some(Stage::Pretrain),
        Command::Embed => Some(Stage::Embed),
        Command::Evaluate => Some(Stage::Evaluate),
        Command::Report => Some(Stage::Report),
        Command::RunAll => None,
    }
}

fn execute(args: &Args) -> Result<(), CliError> {
    let mut cfg = PipelineConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(ws) = &args.workspace {
        cfg.paths.workspace = ws.clone();
    }
    match stage_of(args.command) {
        Some(stage) => {
            Pipeline::new(cfg)?.run_stage(stage, args.force)?;
            println!("{stage}: done");
        }
        None => {
            let outcomes = cmd_run_all(&cfg, args.force)?;
            if outcomes.iter().all(|(_, o)| *o == Outcome::UpToDate) {
                println!("workspace is up to date");
            }
            for (stage, o) in outcomes {
                match o {
                    Outcome::Ran => println!("{stage}: done"),
                    Outcome::UpToDate => println!("{stage}: up to date"),
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match execute(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
