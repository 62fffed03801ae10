use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::incremental::plan::PhasePlan;
use crate::tensor::{ParamStore, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct PreservationEntry {
    pub name: String,
    pub frozen: bool,
    pub max_abs_diff: f64,
    /// Any element differs bitwise.
    pub changed: bool,
}

/// Per-parameter comparison of two snapshots of one model lineage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreservationReport {
    pub entries: Vec<PreservationEntry>,
    /// Parameters present only in the later snapshot.
    pub added: Vec<String>,
}

impl PreservationReport {
    /// Frozen parameters whose values changed.
    pub fn violations(&self) -> Vec<&PreservationEntry> {
        self.entries.iter().filter(|e| e.frozen && e.changed).collect()
    }

    pub fn is_clean(&self) -> bool {
        self.violations().is_empty()
    }

    pub fn ensure_clean(&self) -> Result<()> {
        let v = self.violations();
        match v.first() {
            None => Ok(()),
            Some(first) => Err(Error::PreservationViolated {
                count: v.len(),
                first: first.name.clone(),
            }),
        }
    }

    pub fn to_table(&self) -> String {
        let width = self
            .entries
            .iter()
            .map(|e| e.name.len())
            .chain(std::iter::once(9))
            .max()
            .unwrap_or(9);
        let mut s = format!(
            "{:<width$}  {:<9}  {:>12}  {:<7}  {}\n",
            "parameter", "state", "max_abs_diff", "changed", "status"
        );
        for e in &self.entries {
            let status = match (e.frozen, e.changed) {
                (true, true) => "VIOLATION",
                (false, false) => "unchanged",
                _ => "ok",
            };
            let _ = writeln!(
                s,
                "{:<width$}  {:<9}  {:>12.3e}  {:<7}  {}",
                e.name,
                if e.frozen { "frozen" } else { "trainable" },
                e.max_abs_diff,
                e.changed,
                status
            );
        }
        for a in &self.added {
            let _ = writeln!(s, "{a:<width$}  added");
        }
        let _ = writeln!(s, "violations: {}", self.violations().len());
        s
    }

    /// `name = max_abs_diff changed` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(s, "{} = {:e} {}", e.name, e.max_abs_diff, e.changed);
        }
        s
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (file, body) in [
            ("preservation.txt", self.to_table()),
            ("preservation.kv", self.to_key_values()),
        ] {
            let path = dir.join(file);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Compare `before` against `after`. Frozen status comes from `plan`
/// evaluated on the parameter names. Every parameter of `before` must exist
/// in `after`; only trainable parameters may change shape (they are then
/// reported as changed).
pub fn verify_preservation<T: Scalar>(
    before: &ParamStore<T>,
    after: &ParamStore<T>,
    plan: &PhasePlan,
) -> Result<PreservationReport> {
    let mut report = PreservationReport::default();
    for b in before.iter() {
        let a = after
            .by_name(&b.name)
            .map_err(|_| Error::ManifestMismatch(format!("`{}` missing after training", b.name)))?;
        let frozen = plan.is_frozen(&b.name)?;
        if a.value.shape() != b.value.shape() {
            if frozen {
                return Err(Error::ManifestMismatch(format!(
                    "frozen `{}` changed shape from {:?} to {:?}",
                    b.name,
                    b.value.shape(),
                    a.value.shape()
                )));
            }
            report.entries.push(PreservationEntry {
                name: b.name.clone(),
                frozen,
                max_abs_diff: f64::INFINITY,
                changed: true,
            });
            continue;
        }
        let mut max = 0.0f64;
        let mut changed = false;
        for (&x, &y) in b.value.data().iter().zip(a.value.data()) {
            if x.f64().to_bits() != y.f64().to_bits() {
                changed = true;
                let d = (x.f64() - y.f64()).abs();
                max = if d.is_nan() { f64::INFINITY } else { max.max(d) };
            }
        }
        report.entries.push(PreservationEntry {
            name: b.name.clone(),
            frozen,
            max_abs_diff: max,
            changed,
        });
    }
    report.added = after
        .iter()
        .filter(|p| before.id(&p.name).is_none())
        .map(|p| p.name.clone())
        .collect();
    Ok(report)
}
