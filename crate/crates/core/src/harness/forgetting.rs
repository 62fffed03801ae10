//! Three-arm forgetting comparison: frozen incremental training, naive
//! fine-tuning, and a full retrain from scratch.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;
use crate::harness::commands::{fit_full, fit_incremental, fit_initial};
use crate::harness::config::RunConfig;
use crate::harness::eval::Evaluation;
use crate::harness::metrics::write_csv;
use crate::harness::run::{create_run_dir, prepare_data, write_text};
use crate::model::VariableKind;

pub const ARMS: [&str; 3] = ["frozen", "finetune", "full"];

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub arm: &'static str,
    pub evaluation: Evaluation,
    pub train_seconds: f64,
    pub trainable_params: usize,
}

impl ArmResult {
    /// Mean over upper-air channels and leads of (arm RMSE − pre RMSE).
    pub fn degradation(&self, pre: &Evaluation) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (li, &lead) in self.evaluation.leads.iter().enumerate() {
            for (ci, ch) in self.evaluation.channels.iter().enumerate() {
                if self.evaluation.kinds[ci] != VariableKind::UpperAir {
                    continue;
                }
                if let Some(p) = pre.get(lead, ch) {
                    sum += self.evaluation.rmse[li][ci] - p;
                    n += 1;
                }
            }
        }
        sum / n as f64
    }
}

#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    /// Initial model on the upper-air test split.
    pub pre: Evaluation,
    pub pre_seconds: f64,
    pub arms: Vec<ArmResult>,
}

#[derive(Debug, Clone)]
pub struct ArmSummary {
    pub arm: &'static str,
    /// Mean RMSE per lead, averaged over seeds.
    pub upper_air: Vec<f64>,
    pub surface: Vec<f64>,
    pub degradation: f64,
    pub train_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct ForgettingReport {
    pub dir: PathBuf,
    pub seeds: Vec<SeedResult>,
    pub summary: Vec<ArmSummary>,
}

impl ForgettingReport {
    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.summary.iter().find(|a| a.arm == name)
    }

    /// Frozen-arm degradation ≤ fine-tune degradation.
    pub fn frozen_forgets_less(&self) -> bool {
        match (self.arm("frozen"), self.arm("finetune")) {
            (Some(a), Some(b)) => a.degradation <= b.degradation,
            _ => false,
        }
    }

    /// Frozen-arm training time < full-retrain training time.
    pub fn frozen_is_cheaper(&self) -> bool {
        match (self.arm("frozen"), self.arm("full")) {
            (Some(a), Some(c)) => a.train_seconds < c.train_seconds,
            _ => false,
        }
    }

    pub fn to_table(&self) -> String {
        let leads = self
            .seeds
            .first()
            .map(|s| s.pre.leads.clone())
            .unwrap_or_default();
        let mut s = format!("forgetting comparison over {} seed(s)\n", self.seeds.len());
        s.push_str(&format!("{:<9}", "arm"));
        for l in &leads {
            s.push_str(&format!(" {:>9}", format!("ua@{l}")));
        }
        for l in &leads {
            s.push_str(&format!(" {:>9}", format!("sfc@{l}")));
        }
        s.push_str(&format!(" {:>12} {:>9}\n", "degradation", "train_s"));
        let n = self.seeds.len() as f64;
        s.push_str(&format!("{:<9}", "pre"));
        for li in 0..leads.len() {
            let m: f64 = self
                .seeds
                .iter()
                .map(|r| {
                    r.pre
                        .mean(r.pre.leads[li], VariableKind::UpperAir)
                        .unwrap_or(f64::NAN)
                })
                .sum::<f64>()
                / n;
            s.push_str(&format!(" {m:>9.5}"));
        }
        for _ in &leads {
            s.push_str(&format!(" {:>9}", "-"));
        }
        let pre_s: f64 = self.seeds.iter().map(|r| r.pre_seconds).sum::<f64>() / n;
        s.push_str(&format!(" {:>12} {pre_s:>9.2}\n", "-"));
        for a in &self.summary {
            s.push_str(&format!("{:<9}", a.arm));
            for v in a.upper_air.iter().chain(&a.surface) {
                s.push_str(&format!(" {v:>9.5}"));
            }
            s.push_str(&format!(" {:>12.5} {:>9.2}\n", a.degradation, a.train_seconds));
        }
        s.push_str(&format!(
            "frozen degradation <= finetune degradation: {}\nfrozen train time < full train time: {}\n",
            self.frozen_forgets_less(),
            self.frozen_is_cheaper()
        ));
        s
    }
}

#[derive(Debug, Serialize)]
struct Row<'a> {
    seed: u64,
    arm: &'a str,
    lead: usize,
    channel: &'a str,
    kind: &'a str,
    rmse: f64,
    pre_rmse: Option<f64>,
    train_seconds: f64,
    trainable_params: usize,
}

fn kind_name(k: VariableKind) -> &'static str {
    match k {
        VariableKind::UpperAir => "upper_air",
        VariableKind::Surface => "surface",
    }
}

/// Run one seed of the comparison (no files written).
pub fn run_seed(config: &RunConfig, seed: u64) -> Result<SeedResult> {
    let data = prepare_data(config, seed)?;
    let initial = fit_initial(config, seed, &data)?;
    let frozen = fit_incremental(config, seed, &initial.model, &data, true)?;
    frozen.report.ensure_clean()?;
    let finetune = fit_incremental(config, seed, &initial.model, &data, false)?;
    let full = fit_full(config, seed, &data)?;
    let arm = |arm, p: &crate::harness::commands::PhaseOutcome| ArmResult {
        arm,
        evaluation: p.evaluation.clone(),
        train_seconds: p.train_seconds,
        trainable_params: p.model.params.trainable_count(),
    };
    Ok(SeedResult {
        seed,
        arms: vec![
            arm(ARMS[0], &frozen.phase),
            arm(ARMS[1], &finetune.phase),
            arm(ARMS[2], &full),
        ],
        pre: initial.evaluation,
        pre_seconds: initial.train_seconds,
    })
}

fn summarize(seeds: &[SeedResult]) -> Vec<ArmSummary> {
    let n = seeds.len() as f64;
    ARMS.iter()
        .enumerate()
        .map(|(ai, &arm)| {
            let per_lead = |kind| -> Vec<f64> {
                let leads = &seeds[0].arms[ai].evaluation.leads;
                leads
                    .iter()
                    .map(|&l| {
                        seeds
                            .iter()
                            .map(|s| s.arms[ai].evaluation.mean(l, kind).unwrap_or(f64::NAN))
                            .sum::<f64>()
                            / n
                    })
                    .collect()
            };
            ArmSummary {
                arm,
                upper_air: per_lead(VariableKind::UpperAir),
                surface: per_lead(VariableKind::Surface),
                degradation: seeds.iter().map(|s| s.arms[ai].degradation(&s.pre)).sum::<f64>() / n,
                train_seconds: seeds.iter().map(|s| s.arms[ai].train_seconds).sum::<f64>() / n,
            }
        })
        .collect()
}

/// `forgetting-report`: seeds `config.seed ..` (`forgetting.seeds` of
/// them). Writes `forgetting.csv` and `forgetting.txt`.
pub fn forgetting_report(config: &RunConfig, out: &Path) -> Result<ForgettingReport> {
    let dir = create_run_dir(out, "forgetting-report", config)?;
    let seeds = (0..config.forgetting.seeds as u64)
        .map(|i| run_seed(config, config.seed.wrapping_add(i)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for s in &seeds {
        for (li, &lead) in s.pre.leads.iter().enumerate() {
            for (ci, ch) in s.pre.channels.iter().enumerate() {
                rows.push(Row {
                    seed: s.seed,
                    arm: "pre",
                    lead,
                    channel: ch,
                    kind: kind_name(s.pre.kinds[ci]),
                    rmse: s.pre.rmse[li][ci],
                    pre_rmse: Some(s.pre.rmse[li][ci]),
                    train_seconds: s.pre_seconds,
                    trainable_params: 0,
                });
            }
        }
        for a in &s.arms {
            let e = &a.evaluation;
            for (li, &lead) in e.leads.iter().enumerate() {
                for (ci, ch) in e.channels.iter().enumerate() {
                    rows.push(Row {
                        seed: s.seed,
                        arm: a.arm,
                        lead,
                        channel: ch,
                        kind: kind_name(e.kinds[ci]),
                        rmse: e.rmse[li][ci],
                        pre_rmse: s.pre.get(lead, ch),
                        train_seconds: a.train_seconds,
                        trainable_params: a.trainable_params,
                    });
                }
            }
        }
    }
    write_csv(dir.join("forgetting.csv"), &rows)?;
    let report = ForgettingReport {
        summary: summarize(&seeds),
        seeds,
        dir,
    };
    write_text(&report.dir.join("forgetting.txt"), &report.to_table())?;
    Ok(report)
}
