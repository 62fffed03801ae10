use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vamoe::harness::{self, RunConfig};

#[derive(Parser)]
#[command(
    name = "vamoe",
    version,
    about = "Variable-adaptive mixture-of-experts weather model experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the upper-air model from scratch.
    TrainInitial(Common),
    /// Expand a trained model with surface variables and train the new modules.
    TrainIncremental(Common),
    /// Score a checkpoint against persistence on a test split.
    Evaluate(Common),
    /// Compare frozen incremental training, fine-tuning and full retraining.
    ForgettingReport(Common),
    /// Run the finite-difference gradient suite.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory for the run directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> vamoe::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> vamoe::Result<PathBuf> {
    match cli.command {
        Command::TrainInitial(c) => {
            let r = harness::train_initial(&c.load()?, &c.out)?;
            Ok(r.dir)
        }
        Command::TrainIncremental(c) => {
            let r = harness::train_incremental(&c.load()?, &c.out)?;
            println!("trainable ratio {:.3}", r.trainable_ratio());
            Ok(r.dir)
        }
        Command::Evaluate(c) => Ok(harness::evaluate_checkpoint(&c.load()?, &c.out)?.dir),
        Command::ForgettingReport(c) => {
            let r = harness::forgetting_report(&c.load()?, &c.out)?;
            print!("{}", r.to_table());
            Ok(r.dir)
        }
        Command::Gradcheck(c) => {
            let (dir, r) = harness::gradcheck(&c.load()?, &c.out)?;
            print!("{}", r.to_table());
            Ok(dir)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(dir) => {
            println!("ok dir={}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} msg={msg:?}", e.kind());
            ExitCode::FAILURE
        }
    }
}
