//! Train for two epochs only (far from converged), then score the saved checkpoint the way the `evaluate`
//! verb does.

use vamoe::harness::{evaluate_checkpoint, train_initial, RunConfig};

fn main() -> vamoe::Result<()> {
    let out = std::env::temp_dir().join("vamoe-examples");
    let mut config = RunConfig::default();
    config.data.initial_pairs = 48;
    config.data.incremental_pairs = 24;
    config.data.test_pairs = 16;
    config.train.epochs_initial = 2;
    let run = train_initial(&config, &out)?;

    config.paths.checkpoint = Some(run.dir.join("initial.vamo"));
    config.paths.stats = Some(run.dir.join("stats.txt"));
    let scored = evaluate_checkpoint(&config, &out)?;
    let e = &scored.evaluation;
    for (li, lead) in e.leads.iter().enumerate() {
        let m = e.rmse[li].iter().sum::<f64>() / e.channels.len() as f64;
        let p = scored.persistence.rmse[li].iter().sum::<f64>() / e.channels.len() as f64;
        println!("lead {lead}: model {m:.4} persistence {p:.4}");
    }
    println!("report in {}", scored.dir.display());
    Ok(())
}
