//! Run directories and the shared data preparation of every command.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::data::{build_splits, Dataset, NormalizationStats, Splits};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;

/// Create `<out>/<verb>-<unix seconds>` (with a numeric suffix if taken) and
/// echo the effective config into it.
pub fn create_run_dir(out: &Path, verb: &str, config: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let base = format!("{verb}-{secs}");
    let mut n = 0usize;
    let dir = loop {
        let name = if n == 0 {
            base.clone()
        } else {
            format!("{base}-{n}")
        };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => break dir,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    };
    write_text(&dir.join("config.toml"), &config.to_toml())?;
    Ok(dir)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Normalised splits for one data seed.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub raw: Splits,
    /// Statistics of the initial training split (upper-air channels).
    pub stats_initial: NormalizationStats,
    /// `stats_initial` extended with statistics of the new channels over
    /// the incremental training split.
    pub stats_full: NormalizationStats,
    pub initial_train: Dataset,
    pub incremental_train: Dataset,
    pub full_train: Dataset,
    pub test_initial: Dataset,
    pub test: Dataset,
}

pub fn prepare_data(config: &RunConfig, seed: u64) -> Result<PreparedData> {
    let raw = build_splits(&config.field_spec(seed), config.split_sizes())?;
    let stats_initial = NormalizationStats::from_dataset(&raw.initial_train)?;
    prepare_with(raw, stats_initial)
}

/// Like [`prepare_data`], but with the initial statistics fixed (those
/// stored next to a base checkpoint).
pub fn prepare_with(raw: Splits, stats_initial: NormalizationStats) -> Result<PreparedData> {
    let stats_full = stats_initial
        .extended(&NormalizationStats::from_dataset(&raw.incremental_train)?)
        .for_catalog(&raw.incremental_train.catalog)?;
    Ok(PreparedData {
        initial_train: stats_initial.normalize(&raw.initial_train)?,
        incremental_train: stats_full.normalize(&raw.incremental_train)?,
        full_train: stats_full.normalize(&raw.full_train)?,
        test_initial: stats_initial.normalize(&raw.test_initial)?,
        test: stats_full.normalize(&raw.test)?,
        raw,
        stats_initial,
        stats_full,
    })
}
