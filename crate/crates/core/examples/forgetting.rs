//! A scaled-down three-arm forgetting comparison: frozen incremental
//! training, naive fine-tuning, and retraining from scratch. The
//! `forgetting-report` verb runs the full-size version.

use vamoe::harness::{forgetting_report, RunConfig};

fn main() -> vamoe::Result<()> {
    let mut config = RunConfig::default();
    config.data.initial_pairs = 128;
    config.data.incremental_pairs = 64;
    config.data.test_pairs = 32;
    config.data.eval_starts = 16;
    config.train.epochs_initial = 6;
    config.train.epochs_incremental = 6;
    config.forgetting.seeds = 2;
    let report = forgetting_report(&config, &std::env::temp_dir().join("vamoe-examples"))?;
    print!("{}", report.to_table());
    Ok(())
}
