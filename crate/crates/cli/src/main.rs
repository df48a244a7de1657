use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use prunelab_cli::{commands, CliResult, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(name = "prunelab", version, about = "Fine-pruning experiments on synthetic transfer tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat key = value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides `seed` (or `task_seed` for gen-tasks).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for the sweep.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the source and target task CSVs.
    GenTasks,
    /// Dense training on the source task.
    Pretrain,
    /// Fine-prune the pretrained model on the target task.
    Fineprune,
    /// Grid of pruners, kept fractions and seeds.
    Sweep,
    /// Run the verification oracles.
    Verify,
}

fn load(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        let key = if matches!(cli.command, Command::GenTasks) { "task_seed" } else { "seed" };
        cfg.set(key, &seed.to_string())?;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = load(cli)?;
    match cli.command {
        Command::GenTasks => commands::gen_tasks(&cfg).map(drop),
        Command::Pretrain => commands::pretrain(&cfg).map(drop),
        Command::Fineprune => commands::fineprune(&cfg).map(drop),
        Command::Sweep => commands::sweep(&cfg, cli.jobs.max(1)).map(drop),
        Command::Verify => commands::verify(&cfg).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PRUNELAB_LOG", "info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
