//! Train a small upper-air model and compare it with persistence.

use vamoe::harness::commands::{beats_persistence, error_growth};
use vamoe::harness::{train_initial, RunConfig};

fn main() -> vamoe::Result<()> {
    let mut config = RunConfig::default();
    config.data.initial_pairs = 96;
    config.data.incremental_pairs = 48;
    config.data.test_pairs = 24;
    config.train.epochs_initial = 6;
    let run = train_initial(&config, &std::env::temp_dir().join("vamoe-examples"))?;
    for log in &run.outcome.logs {
        println!(
            "epoch {:>2}: pred {:.4} recon {:.4}",
            log.epoch, log.pred, log.recon
        );
    }
    println!(
        "beats persistence at lead 1 on {:.0}% of channels, lead 3 >= lead 1 on {:.0}%",
        100.0 * beats_persistence(&run.outcome.evaluation, &run.persistence),
        100.0 * error_growth(&run.outcome.evaluation)
    );
    println!("artifacts in {}", run.dir.display());
    Ok(())
}
