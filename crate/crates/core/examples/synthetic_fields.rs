//! Generate the desk-scale synthetic trajectory, split it, and look at
//! per-channel statistics and the persistence baseline.

use vamoe::data::{self, build_splits, NormalizationStats, SplitSizes, SyntheticFieldSpec};
use vamoe::harness::persistence;

fn main() -> vamoe::Result<()> {
    let spec = SyntheticFieldSpec::desk(16, 32, 3, 0);
    let sizes = SplitSizes {
        initial: 64,
        incremental: 32,
        test: 24,
        gap: 4,
    };
    let splits = build_splits(&spec, sizes)?;
    println!(
        "{} channels ({} upper-air, {} surface), test window starts at frame {}",
        splits.test.channels(),
        splits.initial_train.channels(),
        splits.test.catalog.incremental_channels(),
        splits.test_start
    );

    let stats = NormalizationStats::from_dataset(&splits.full_train)?;
    for ((name, m), s) in stats.names.iter().zip(&stats.mean).zip(&stats.std).take(6) {
        println!("{name:>5}: mean {m:+.3} std {s:.3}");
    }

    let test = stats.normalize(&splits.test)?;
    let p = persistence(&test, 0, false)?;
    for (lead, row) in p.leads.iter().zip(&p.rmse) {
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        println!("persistence lead {lead}: mean normalized RMSE {mean:.3}");
    }

    let path = std::env::temp_dir().join("vamoe-test-split.vamg");
    data::save(&splits.test, &path)?;
    let back = data::load(&path)?;
    println!(
        "saved {} ({} frames), reload equal: {}",
        path.display(),
        back.frames(),
        back.data() == splits.test.data()
    );
    Ok(())
}
