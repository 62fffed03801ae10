use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::eval::Evaluation;
use crate::harness::train::EpochLog;

/// One row of the long-format metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub phase: String,
    pub epoch: usize,
    pub lead: usize,
    pub channel: String,
    pub rmse: f64,
    pub loss_pred: f64,
    pub loss_recon: f64,
    pub trainable_params: usize,
}

/// Rows for one evaluation: one per (lead, channel).
pub fn rows(phase: &str, log: &EpochLog, eval: &Evaluation, trainable: usize) -> Vec<MetricsRow> {
    let mut out = Vec::with_capacity(eval.leads.len() * eval.channels.len());
    for (li, &lead) in eval.leads.iter().enumerate() {
        for (ci, ch) in eval.channels.iter().enumerate() {
            out.push(MetricsRow {
                phase: phase.to_string(),
                epoch: log.epoch,
                lead,
                channel: ch.clone(),
                rmse: eval.rmse[li][ci],
                loss_pred: log.pred,
                loss_recon: log.recon,
                trainable_params: trainable,
            });
        }
    }
    out
}

pub fn write_csv<R: Serialize>(path: impl AsRef<Path>, rows: &[R]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!("checked io kind"),
        }
    } else {
        Error::Malformed(format!("{}: {e}", path.display()))
    }
}
