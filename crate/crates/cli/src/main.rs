use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cxrcast::commands;
use cxrcast::config::{Command, RunConfig};
use cxrcast::Error;

#[derive(Parser)]
#[command(name = "cxrcast", version, about = "Forecast chest X-ray findings from ICU trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic cohort and labeled embeddings.
    Synth(Common),
    /// Turn a cohort into per-patient tensor blobs.
    Preprocess(Common),
    /// Fit the findings classifier on labeled embeddings.
    TrainClassifier(Common),
    /// Train the forecasting model.
    Train(Common),
    /// Score the model and the previous-CXR baseline across horizons.
    Evaluate(Common),
    /// Per-hour finding probabilities for one patient.
    Predict(Common),
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory; must be new or empty.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads. Computation runs on one thread; results never depend on this.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

fn run(cli: Cli) -> Result<(), Error> {
    let (command, args) = match cli.command {
        Cmd::Synth(a) => (Command::Synth, a),
        Cmd::Preprocess(a) => (Command::Preprocess, a),
        Cmd::TrainClassifier(a) => (Command::TrainClassifier, a),
        Cmd::Train(a) => (Command::Train, a),
        Cmd::Evaluate(a) => (Command::Evaluate, a),
        Cmd::Predict(a) => (Command::Predict, a),
    };
    if args.threads == 0 {
        return Err(Error::Usage("--threads must be at least 1".into()));
    }
    if args.threads > 1 {
        log::info!("--threads {} requested; running single-threaded", args.threads);
    }
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let outcome = commands::run(command, &config, args.out.as_deref())?;
    println!("{}", outcome.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
