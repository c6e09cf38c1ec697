use std::path::PathBuf;
use std::process::ExitCode;

use anisoalign::pipeline::{self, RunConfig};
use anisoalign::{Error, Result};
use clap::{Parser, Subcommand};

/// Diagnose and correct the geometric gap between two embedding modalities.
#[derive(Debug, Parser)]
#[command(name = "anisoalign", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run config; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run directory that holds inputs and receives outputs.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,

    /// Master seed; replaces every per-stage seed with a derived one.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "ANISO_THREADS")]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate a synthetic paired corpus with a planted gap.
    Gen,
    /// Geometric gap diagnostics of a paired corpus.
    Diagnose,
    /// Apply the closed-form baseline transforms to the held-out text.
    Transform,
    /// Fit the frame and train the image phase prior.
    TrainPrior,
    /// Train the refiner and align the held-out text.
    Align,
    /// Score every substitute corpus on held-out pairs.
    Eval,
    /// Join evaluation results into one table.
    Report,
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads.filter(|&n| n > 0) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = cli.out.as_path();
    let manifest = match cli.command {
        Command::Gen => pipeline::cmd_gen(&cfg, out)?,
        Command::Diagnose => pipeline::cmd_diagnose(&cfg, out)?,
        Command::Transform => pipeline::cmd_transform(&cfg, out)?,
        Command::TrainPrior => pipeline::cmd_train_prior(&cfg, out)?,
        Command::Align => pipeline::cmd_align(&cfg, out)?,
        Command::Eval => pipeline::cmd_eval(&cfg, out)?,
        Command::Report => pipeline::cmd_report(&cfg, out)?,
    };
    for f in &manifest.outputs {
        println!("{}  {}", f.sha256, f.path);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
